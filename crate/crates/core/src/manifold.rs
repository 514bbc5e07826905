//! Product manifolds built from ℝⁿ, S¹, S² and S³ factors.
//!
//! Points are stored as flat ambient coordinate vectors (Euclidean
//! coordinates, circle angles in `(−π, π]`, unit 3-vectors, unit quaternions
//! in `(w, x, y, z)` order). Tangent vectors use minimal coordinates in an
//! orthonormal frame attached to their base point.
//!
//! Every sphere factor uses the first basis vector as its origin `e`
//! (`(1, 0, 0)` on S², the identity quaternion on S³). The tangent frame at a
//! point `g` is the fixed frame `{e₁, …, eₙ}` at `e` parallel-transported
//! along the geodesic from `e` to `g`. At the antipode of `e` that geodesic is
//! not unique and a fixed reflection is used instead, which keeps the frame
//! orthonormal everywhere.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::quat::{self, Wxyz};

/// Points closer than this (in chordal distance) to the antipode are
/// treated as lying on the cut locus.
pub const CUT_LOCUS_TOL: f64 = 1e-7;

/// Unit-norm tolerance for manifold points.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Euclid(usize),
    Circle,
    Sphere2,
    Quaternion,
}

impl Factor {
    pub fn ambient_dim(self) -> usize {
        match self {
            Factor::Euclid(n) => n,
            Factor::Circle => 1,
            Factor::Sphere2 => 3,
            Factor::Quaternion => 4,
        }
    }

    pub fn tangent_dim(self) -> usize {
        match self {
            Factor::Euclid(n) => n,
            Factor::Circle => 1,
            Factor::Sphere2 => 2,
            Factor::Quaternion => 3,
        }
    }

    pub fn is_sphere(self) -> bool {
        matches!(self, Factor::Sphere2 | Factor::Quaternion)
    }

    fn origin(self) -> Vec<f64> {
        let mut v = vec![0.0; self.ambient_dim()];
        if self.is_sphere() {
            v[0] = 1.0;
        }
        v
    }
}

/// How a factor reacts to a rigid frame transformation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    /// Rotate and translate (positions); rotate for S² and S³.
    Full,
    /// Rotate only (velocities, directions).
    RotationOnly,
    /// Leave unchanged (time, magnitudes, gripper).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Factor>", into = "Vec<Factor>")]
pub struct ManifoldDescriptor {
    factors: Vec<Factor>,
    ambient_offsets: Vec<usize>,
    tangent_offsets: Vec<usize>,
}

impl TryFrom<Vec<Factor>> for ManifoldDescriptor {
    type Error = Error;

    fn try_from(factors: Vec<Factor>) -> Result<Self> {
        ManifoldDescriptor::new(factors)
    }
}

impl From<ManifoldDescriptor> for Vec<Factor> {
    fn from(m: ManifoldDescriptor) -> Self {
        m.factors
    }
}

impl ManifoldDescriptor {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::arg("a manifold needs at least one factor"));
        }
        if factors.iter().any(|f| *f == Factor::Euclid(0)) {
            return Err(Error::arg("Euclid(0) is not a valid factor"));
        }
        let mut ambient_offsets = Vec::with_capacity(factors.len() + 1);
        let mut tangent_offsets = Vec::with_capacity(factors.len() + 1);
        let (mut a, mut t) = (0, 0);
        for f in &factors {
            ambient_offsets.push(a);
            tangent_offsets.push(t);
            a += f.ambient_dim();
            t += f.tangent_dim();
        }
        ambient_offsets.push(a);
        tangent_offsets.push(t);
        Ok(Self {
            factors,
            ambient_offsets,
            tangent_offsets,
        })
    }

    pub fn euclidean(n: usize) -> Self {
        Self::new(vec![Factor::Euclid(n)]).expect("n > 0")
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn ambient_dim(&self) -> usize {
        *self.ambient_offsets.last().unwrap()
    }

    pub fn tangent_dim(&self) -> usize {
        *self.tangent_offsets.last().unwrap()
    }

    pub fn ambient_range(&self, i: usize) -> Range<usize> {
        self.ambient_offsets[i]..self.ambient_offsets[i + 1]
    }

    pub fn tangent_range(&self, i: usize) -> Range<usize> {
        self.tangent_offsets[i]..self.tangent_offsets[i + 1]
    }

    pub fn is_euclidean(&self) -> bool {
        self.factors.iter().all(|f| matches!(f, Factor::Euclid(_)))
    }

    pub fn origin(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.ambient_dim(),
            self.factors.iter().flat_map(|f| f.origin()),
        )
    }

    /// The manifold formed by a subset of factors, in the given order.
    pub fn submanifold(&self, idx: &[usize]) -> Result<Self> {
        self.check_indices(idx)?;
        Self::new(idx.iter().map(|&i| self.factors[i]).collect())
    }

    /// Ambient coordinates of the selected factors, concatenated.
    pub fn extract(&self, p: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
        let mut out = Vec::new();
        for &i in idx {
            out.extend_from_slice(&p.as_slice()[self.ambient_range(i)]);
        }
        DVector::from_vec(out)
    }

    /// Tangent coordinate indices covered by the selected factors.
    pub fn tangent_indices(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().flat_map(|&i| self.tangent_range(i)).collect()
    }

    pub fn check_indices(&self, idx: &[usize]) -> Result<()> {
        if idx.is_empty() {
            return Err(Error::arg("empty factor selection"));
        }
        let mut seen = vec![false; self.factors.len()];
        for &i in idx {
            if i >= self.factors.len() {
                return Err(Error::arg(format!(
                    "factor index {i} out of range for {} factors",
                    self.factors.len()
                )));
            }
            if seen[i] {
                return Err(Error::arg(format!("factor index {i} selected twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    fn check_ambient(&self, p: &DVector<f64>, context: &'static str) -> Result<()> {
        if p.len() != self.ambient_dim() {
            return Err(Error::Dimension {
                context,
                expected: self.ambient_dim(),
                got: p.len(),
            });
        }
        Ok(())
    }

    fn check_tangent(&self, t: &DVector<f64>, context: &'static str) -> Result<()> {
        if t.len() != self.tangent_dim() {
            return Err(Error::Dimension {
                context,
                expected: self.tangent_dim(),
                got: t.len(),
            });
        }
        Ok(())
    }

    /// Checks dimension and unit norms (within `tol`) of a point.
    pub fn check_point(&self, p: &DVector<f64>, tol: f64) -> Result<()> {
        self.check_ambient(p, "point")?;
        for (i, f) in self.factors.iter().enumerate() {
            let s = &p.as_slice()[self.ambient_range(i)];
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::arg(format!("factor {i} has non-finite coordinates")));
            }
            if f.is_sphere() {
                let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > tol {
                    return Err(Error::arg(format!(
                        "factor {i} ({f:?}) has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Renormalizes sphere factors and wraps circle angles.
    pub fn normalize(&self, p: &mut DVector<f64>) {
        for (i, f) in self.factors.iter().enumerate() {
            let r = self.ambient_range(i);
            match f {
                Factor::Circle => p[r.start] = wrap_angle(p[r.start]),
                Factor::Sphere2 | Factor::Quaternion => {
                    let n = p.rows(r.start, r.len()).norm();
                    p.rows_mut(r.start, r.len()).scale_mut(1.0 / n);
                }
                Factor::Euclid(_) => {}
            }
        }
    }

    pub fn exp_map(&self, base: &DVector<f64>, t: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(base, "exp_map base")?;
        self.check_tangent(t, "exp_map tangent")?;
        let mut out = DVector::zeros(self.ambient_dim());
        for (i, f) in self.factors.iter().enumerate() {
            let ar = self.ambient_range(i);
            let tr = self.tangent_range(i);
            let b = &base.as_slice()[ar.clone()];
            let v = &t.as_slice()[tr];
            let o = &mut out.as_mut_slice()[ar];
            match f {
                Factor::Euclid(_) => {
                    for k in 0..o.len() {
                        o[k] = b[k] + v[k];
                    }
                }
                Factor::Circle => o[0] = wrap_angle(b[0] + v[0]),
                Factor::Sphere2 | Factor::Quaternion => o.copy_from_slice(&sphere::exp(b, v)),
            }
        }
        Ok(out)
    }

    pub fn log_map(&self, base: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        self.log_map_impl(base, p, true)
    }

    /// Like [`Self::log_map`], but a point on the cut locus maps to a
    /// deviation of length π along the first tangent axis instead of an
    /// error. Used where data may sit exactly opposite an estimate.
    pub fn log_map_lenient(&self, base: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        self.log_map_impl(base, p, false)
    }

    fn log_map_impl(&self, base: &DVector<f64>, p: &DVector<f64>, strict: bool) -> Result<DVector<f64>> {
        self.check_ambient(base, "log_map base")?;
        self.check_ambient(p, "log_map point")?;
        let mut out = DVector::zeros(self.tangent_dim());
        for (i, f) in self.factors.iter().enumerate() {
            let ar = self.ambient_range(i);
            let tr = self.tangent_range(i);
            let b = &base.as_slice()[ar.clone()];
            let q = &p.as_slice()[ar];
            let o = &mut out.as_mut_slice()[tr];
            match f {
                Factor::Euclid(_) => {
                    for k in 0..o.len() {
                        o[k] = q[k] - b[k];
                    }
                }
                Factor::Circle => {
                    o[0] = match circle_log(b[0], q[0]) {
                        Err(_) if !strict => PI,
                        r => r?,
                    }
                }
                Factor::Sphere2 | Factor::Quaternion => match sphere::log(b, q) {
                    Ok(v) => o.copy_from_slice(&v),
                    Err(_) if !strict => {
                        o.fill(0.0);
                        o[0] = PI;
                    }
                    Err(e) => return Err(e),
                },
            }
        }
        Ok(out)
    }

    pub fn geodesic_distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut sq = 0.0;
        for (i, f) in self.factors.iter().enumerate() {
            let r = self.ambient_range(i);
            let x = &a.as_slice()[r.clone()];
            let y = &b.as_slice()[r];
            let d = match f {
                Factor::Euclid(_) => x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt(),
                Factor::Circle => wrap_angle(y[0] - x[0]).abs(),
                Factor::Sphere2 | Factor::Quaternion => sphere::distance(x, y),
            };
            sq += d * d;
        }
        sq.sqrt()
    }

    /// Block-diagonal matrix mapping tangent coordinates at `from` to tangent
    /// coordinates at `to` by parallel transport along the geodesic.
    pub fn transport_matrix(&self, from: &DVector<f64>, to: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_ambient(from, "transport origin")?;
        self.check_ambient(to, "transport target")?;
        let n = self.tangent_dim();
        let mut m = DMatrix::identity(n, n);
        for (i, f) in self.factors.iter().enumerate() {
            if f.is_sphere() {
                let ar = self.ambient_range(i);
                let tr = self.tangent_range(i);
                let g = sphere::transport(&from.as_slice()[ar.clone()], &to.as_slice()[ar])?;
                m.view_mut((tr.start, tr.start), (tr.len(), tr.len())).copy_from(&g);
            } else if *f == Factor::Circle {
                let ar = self.ambient_range(i);
                circle_log(from[ar.start], to[ar.start])?;
            }
        }
        Ok(m)
    }

    pub fn parallel_transport(
        &self,
        cov: &DMatrix<f64>,
        from: &DVector<f64>,
        to: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.tangent_dim();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension {
                context: "transported covariance",
                expected: n,
                got: cov.nrows(),
            });
        }
        let g = self.transport_matrix(from, to)?;
        Ok(symmetrize(&(&g * cov * g.transpose())))
    }

    /// Applies a rigid transformation using default per-factor policies:
    /// 3-D Euclidean factors rotate (and translate when `trans` is given),
    /// sphere factors rotate, everything else is left alone.
    pub fn act(
        &self,
        m: &DVector<f64>,
        rot: &[f64],
        trans: Option<&Vector3<f64>>,
    ) -> Result<DVector<f64>> {
        let policies: Vec<FramePolicy> = self
            .factors
            .iter()
            .map(|f| match f {
                Factor::Euclid(3) if trans.is_some() => FramePolicy::Full,
                Factor::Euclid(3) => FramePolicy::RotationOnly,
                Factor::Euclid(_) | Factor::Circle => FramePolicy::Identity,
                _ => FramePolicy::Full,
            })
            .collect();
        let zero = Vector3::zeros();
        self.act_with(m, rot, trans.unwrap_or(&zero), &policies)
    }

    /// Applies a rigid transformation `(rot, trans)` with explicit policies.
    pub fn act_with(
        &self,
        m: &DVector<f64>,
        rot: &[f64],
        trans: &Vector3<f64>,
        policies: &[FramePolicy],
    ) -> Result<DVector<f64>> {
        self.check_ambient(m, "acted point")?;
        self.check_policies(policies)?;
        check_unit_rotation(rot)?;
        let r = quat::rotation_matrix(rot);
        let mut out = m.clone();
        for (i, (f, pol)) in self.factors.iter().zip(policies).enumerate() {
            if *pol == FramePolicy::Identity {
                continue;
            }
            let ar = self.ambient_range(i);
            let s = &m.as_slice()[ar.clone()];
            let o = &mut out.as_mut_slice()[ar];
            match f {
                Factor::Euclid(_) => {
                    let mut v = r * Vector3::new(s[0], s[1], s[2]);
                    if *pol == FramePolicy::Full {
                        v += trans;
                    }
                    o.copy_from_slice(v.as_slice());
                }
                Factor::Sphere2 => {
                    let v = quat::rotate(rot, &Vector3::new(s[0], s[1], s[2]));
                    o.copy_from_slice(v.as_slice());
                }
                Factor::Quaternion => o.copy_from_slice(&quat::mul(rot, s)),
                Factor::Circle => unreachable!("checked by check_policies"),
            }
        }
        Ok(out)
    }

    fn check_policies(&self, policies: &[FramePolicy]) -> Result<()> {
        if policies.len() != self.factors.len() {
            return Err(Error::Dimension {
                context: "frame policies",
                expected: self.factors.len(),
                got: policies.len(),
            });
        }
        for (i, (f, p)) in self.factors.iter().zip(policies).enumerate() {
            let ok = match f {
                Factor::Euclid(3) | Factor::Sphere2 | Factor::Quaternion => true,
                Factor::Euclid(_) | Factor::Circle => *p == FramePolicy::Identity,
            };
            if !ok {
                return Err(Error::arg(format!(
                    "factor {i} ({f:?}) only supports the identity frame policy"
                )));
            }
        }
        Ok(())
    }

    /// Frame transformation of a point together with the tangent-space
    /// Jacobian used to carry covariances along.
    ///
    /// Sphere factors follow the homogeneous-space construction: the tangent
    /// frame at the origin is pushed through the action to the image of the
    /// origin (the surrogate base `b̂` on S², the frame quaternion itself on
    /// S³) and then parallel-transported to the image of the mean.
    pub fn frame_jacobian(
        &self,
        mean: &DVector<f64>,
        rot: &[f64],
        trans: &Vector3<f64>,
        policies: &[FramePolicy],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let image = self.act_with(mean, rot, trans, policies)?;
        let n = self.tangent_dim();
        let mut jac = DMatrix::identity(n, n);
        let r = quat::rotation_matrix(rot);
        for (i, (f, pol)) in self.factors.iter().zip(policies).enumerate() {
            if *pol == FramePolicy::Identity {
                continue;
            }
            let tr = self.tangent_range(i);
            let ar = self.ambient_range(i);
            let block = match f {
                Factor::Euclid(_) => DMatrix::from_column_slice(3, 3, r.as_slice()),
                Factor::Sphere2 => {
                    let e = Factor::Sphere2.origin();
                    let base = surrogate_base_s2(rot)?;
                    let pushed = &DMatrix::from_column_slice(3, 3, r.as_slice()) * sphere::frame(&e);
                    let at_base = sphere::frame(base.as_slice()).transpose() * pushed;
                    sphere::transport(base.as_slice(), &image.as_slice()[ar])? * at_base
                }
                Factor::Quaternion => {
                    let left = left_mult_matrix(rot);
                    let pushed = &left * sphere::frame(&quat::IDENTITY);
                    let at_base = sphere::frame(rot).transpose() * pushed;
                    sphere::transport(rot, &image.as_slice()[ar])? * at_base
                }
                Factor::Circle => unreachable!(),
            };
            jac.view_mut((tr.start, tr.start), (tr.len(), tr.len())).copy_from(&block);
        }
        Ok((image, jac))
    }

    /// Maps an S³ factor of a point to its antipode and returns the tangent
    /// Jacobian of that map (the antipodal map is an isometry, so the
    /// represented rotation and any covariance carried along are unchanged).
    pub fn flip_quaternion(&self, p: &DVector<f64>, factor: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.factors.get(factor) != Some(&Factor::Quaternion) {
            return Err(Error::arg(format!("factor {factor} is not a quaternion")));
        }
        let ar = self.ambient_range(factor);
        let tr = self.tangent_range(factor);
        let mut out = p.clone();
        for k in ar.clone() {
            out[k] = -p[k];
        }
        let from = sphere::frame(&p.as_slice()[ar.clone()]);
        let to = sphere::frame(&out.as_slice()[ar]);
        let block = -(to.transpose() * from);
        let n = self.tangent_dim();
        let mut jac = DMatrix::identity(n, n);
        jac.view_mut((tr.start, tr.start), (3, 3)).copy_from(&block);
        Ok((out, jac))
    }

    /// Negates S³ factors of `p` whose dot product with the matching factor
    /// of `reference` is negative.
    pub fn align_signs(&self, p: &DVector<f64>, reference: &DVector<f64>) -> DVector<f64> {
        let mut out = p.clone();
        for (i, f) in self.factors.iter().enumerate() {
            if *f == Factor::Quaternion {
                let r = self.ambient_range(i);
                if quat::dot(&p.as_slice()[r.clone()], &reference.as_slice()[r.clone()]) < 0.0 {
                    out.rows_mut(r.start, 4).neg_mut();
                }
            }
        }
        out
    }

    /// Orthonormal tangent frame of one sphere factor at `p`, as ambient
    /// column vectors. Identity-sized for flat factors.
    pub fn factor_frame(&self, p: &DVector<f64>, factor: usize) -> DMatrix<f64> {
        let f = self.factors[factor];
        let s = &p.as_slice()[self.ambient_range(factor)];
        if f.is_sphere() {
            sphere::frame(s)
        } else {
            DMatrix::identity(f.ambient_dim(), f.tangent_dim())
        }
    }
}

pub fn check_unit_rotation(rot: &[f64]) -> Result<()> {
    if rot.len() != 4 {
        return Err(Error::Dimension {
            context: "rotation quaternion",
            expected: 4,
            got: rot.len(),
        });
    }
    let n = quat::norm(rot);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::arg(format!("rotation quaternion has norm {n}")));
    }
    Ok(())
}

fn left_mult_matrix(q: &[f64]) -> DMatrix<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    DMatrix::from_row_slice(
        4,
        4,
        &[
            w, -x, -y, -z, //
            x, w, -z, y, //
            y, z, w, -x, //
            z, -y, x, w,
        ],
    )
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

fn circle_log(base: f64, p: f64) -> Result<f64> {
    let d = wrap_angle(p - base);
    if PI - d.abs() < CUT_LOCUS_TOL {
        return Err(Error::Singularity(format!(
            "circle angles {base} and {p} are antipodal"
        )));
    }
    Ok(d)
}

/// S² surrogate base `b̂ = (q [0, e] q⁻¹)₁:₃` for the S² origin `e`.
pub fn surrogate_base_s2(rot: &[f64]) -> Result<Vector3<f64>> {
    check_unit_rotation(rot)?;
    Ok(quat::rotate(rot, &Vector3::x()))
}

/// Flips quaternion signs so that consecutive elements have nonnegative dot
/// products. The rotations represented are unchanged.
pub fn make_continuous(qs: &[Wxyz]) -> Vec<Wxyz> {
    let mut out: Vec<Wxyz> = Vec::with_capacity(qs.len());
    for q in qs {
        let q = match out.last() {
            Some(prev) if quat::dot(prev, q) < 0.0 => quat::neg(q),
            _ => *q,
        };
        out.push(q);
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Unit-sphere primitives in arbitrary ambient dimension with the origin at
/// the first basis vector.
pub(crate) mod sphere {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    fn check_not_antipodal(a: &[f64], b: &[f64]) -> Result<()> {
        let gap = a.iter().zip(b).map(|(x, y)| (x + y).powi(2)).sum::<f64>().sqrt();
        if gap < CUT_LOCUS_TOL {
            return Err(Error::Singularity(format!(
                "points {a:?} and {b:?} are antipodal (gap {gap:.2e})"
            )));
        }
        Ok(())
    }

    /// Columns: the origin frame transported along the geodesic from the
    /// origin to `g`.
    pub fn frame(g: &[f64]) -> DMatrix<f64> {
        let n = g.len();
        let c = g[0];
        let s = norm(&g[1..]);
        let mut u = vec![0.0; n];
        if s > 0.0 {
            for k in 1..n {
                u[k] = g[k] / s;
            }
        } else {
            u[1] = 1.0;
        }
        let mut f = DMatrix::zeros(n, n - 1);
        for j in 1..n {
            let col = j - 1;
            for k in 0..n {
                let mut v = if k == j { 1.0 } else { 0.0 };
                v += (c - 1.0) * u[j] * u[k];
                f[(k, col)] = v;
            }
            f[(0, col)] -= s * u[j];
        }
        f
    }

    pub fn exp(g: &[f64], v: &[f64]) -> Vec<f64> {
        let theta = norm(v);
        if theta == 0.0 {
            return g.to_vec();
        }
        let w = frame(g) * DVector::from_column_slice(v);
        let (s, c) = theta.sin_cos();
        let mut p: Vec<f64> = g.iter().zip(w.iter()).map(|(a, b)| c * a + s * b / theta).collect();
        let n = norm(&p);
        p.iter_mut().for_each(|x| *x /= n);
        p
    }

    pub fn log(g: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        check_not_antipodal(g, p)?;
        let c = dot(g, p);
        let w: Vec<f64> = p.iter().zip(g).map(|(a, b)| a - c * b).collect();
        let s = norm(&w);
        if s == 0.0 {
            return Ok(vec![0.0; g.len() - 1]);
        }
        let theta = s.atan2(c);
        let amb = DVector::from_iterator(w.len(), w.iter().map(|x| x * theta / s));
        Ok((frame(g).transpose() * amb).as_slice().to_vec())
    }

    pub fn distance(a: &[f64], b: &[f64]) -> f64 {
        let c = dot(a, b);
        let w: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - c * y).collect();
        norm(&w).atan2(c)
    }

    /// Ambient rotation along the minimal geodesic from `g` to `h`.
    pub fn rotation_between(g: &[f64], h: &[f64]) -> Result<DMatrix<f64>> {
        check_not_antipodal(g, h)?;
        let n = g.len();
        let c = dot(g, h);
        let w: Vec<f64> = h.iter().zip(g).map(|(a, b)| a - c * b).collect();
        let s = norm(&w);
        let mut r = DMatrix::identity(n, n);
        if s == 0.0 {
            return Ok(r);
        }
        let u: Vec<f64> = w.iter().map(|x| x / s).collect();
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] += s * (u[i] * g[j] - g[i] * u[j]) + (c - 1.0) * (g[i] * g[j] + u[i] * u[j]);
            }
        }
        Ok(r)
    }

    /// Parallel transport from `T_g` to `T_h` in frame coordinates.
    pub fn transport(g: &[f64], h: &[f64]) -> Result<DMatrix<f64>> {
        let r = rotation_between(g, h)?;
        Ok(frame(h).transpose() * r * frame(g))
    }
}
