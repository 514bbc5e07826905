//! Quaternion helpers in `(w, x, y, z)` order, the ambient layout used for
//! S³ points throughout the crate.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3, Vector4};

pub type Wxyz = [f64; 4];

pub const IDENTITY: Wxyz = [1.0, 0.0, 0.0, 0.0];

pub fn mul(a: &[f64], b: &[f64]) -> Wxyz {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn conj(q: &[f64]) -> Wxyz {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn norm(q: &[f64]) -> f64 {
    dot(q, q).sqrt()
}

pub fn normalized(q: &[f64]) -> Wxyz {
    let n = norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn neg(q: &[f64]) -> Wxyz {
    [-q[0], -q[1], -q[2], -q[3]]
}

pub fn to_unit(q: &[f64]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn from_unit(q: &UnitQuaternion<f64>) -> Wxyz {
    [q.w, q.i, q.j, q.k]
}

pub fn as_vector(q: &[f64]) -> Vector4<f64> {
    Vector4::new(q[0], q[1], q[2], q[3])
}

/// Rotates a 3-vector by conjugation `q [0, v] q⁻¹`.
pub fn rotate(q: &[f64], v: &Vector3<f64>) -> Vector3<f64> {
    let p = mul(&mul(q, &[0.0, v.x, v.y, v.z]), &conj(q));
    Vector3::new(p[1], p[2], p[3])
}

pub fn rotation_matrix(q: &[f64]) -> Matrix3<f64> {
    to_unit(q).to_rotation_matrix().into_inner()
}

pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Wxyz {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return IDENTITY;
    }
    let (s, c) = (0.5 * angle).sin_cos();
    let a = axis / n;
    [c, s * a.x, s * a.y, s * a.z]
}

/// Decomposes a unit quaternion into (unit axis, angle in `[0, π]`).
///
/// The axis sign is chosen so the angle is nonnegative; for the identity the
/// axis is `None`.
pub fn to_axis_angle(q: &[f64]) -> (Option<Vector3<f64>>, f64) {
    let q = if q[0] < 0.0 { neg(q) } else { [q[0], q[1], q[2], q[3]] };
    let v = Vector3::new(q[1], q[2], q[3]);
    let s = v.norm();
    if s == 0.0 {
        return (None, 0.0);
    }
    let angle = 2.0 * s.atan2(q[0]);
    (Some(v / s), angle)
}

pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Wxyz {
    let ua = to_unit(a);
    let mut bq = [b[0], b[1], b[2], b[3]];
    if dot(a, b) < 0.0 {
        bq = neg(&bq);
    }
    let ub = to_unit(&bq);
    match ua.try_slerp(&ub, t, 1e-12) {
        Some(q) => from_unit(&q),
        None => from_unit(&ua.nlerp(&ub, t)),
    }
}

pub fn yaw(angle: f64) -> Wxyz {
    from_axis_angle(&Vector3::z(), angle)
}

pub fn from_rotation_vector(v: &Vector3<f64>) -> Wxyz {
    from_unit(&UnitQuaternion::from_scaled_axis(*v))
}

pub fn to_rotation_vector(q: &[f64]) -> Vector3<f64> {
    let (axis, angle) = to_axis_angle(q);
    axis.map(|a| a * angle).unwrap_or_else(Vector3::zeros)
}

pub fn unit_axis(v: Vector3<f64>) -> Unit<Vector3<f64>> {
    Unit::new_normalize(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_matches_nalgebra() {
        let a = from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.7);
        let b = from_axis_angle(&Vector3::new(-0.3, 0.1, 0.9), 2.1);
        let ours = mul(&a, &b);
        let theirs = from_unit(&(to_unit(&a) * to_unit(&b)));
        for i in 0..4 {
            assert!((ours[i] - theirs[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn rotate_about_z() {
        let q = yaw(std::f64::consts::FRAC_PI_2);
        let r = rotate(&q, &Vector3::x());
        assert!((r - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn axis_angle_roundtrip() {
        let axis = Vector3::new(0.2, -0.4, 0.9).normalize();
        let q = from_axis_angle(&axis, 2.5);
        let (a, ang) = to_axis_angle(&q);
        assert!((ang - 2.5).abs() < 1e-12);
        assert!((a.unwrap() - axis).norm() < 1e-12);
        // negated quaternion represents the same rotation
        let (a2, ang2) = to_axis_angle(&neg(&q));
        assert!((ang2 - 2.5).abs() < 1e-12);
        assert!((a2.unwrap() - axis).norm() < 1e-12);
    }
}
