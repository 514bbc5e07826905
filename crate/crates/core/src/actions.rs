//! Velocity factorization into unit directions and magnitudes, and the
//! model manifold layouts built on top of it.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::demo::Pose;
use crate::error::{Error, Result};
use crate::manifold::{Factor, FramePolicy, ManifoldDescriptor};
use crate::quat::{self, Wxyz};

pub const LIN_EPS: f64 = 1e-6;
pub const ANG_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedVelocity {
    pub lin_dir: Vector3<f64>,
    pub ang_dir: Vector3<f64>,
    /// Meters per step.
    pub lin_mag: f64,
    /// Radians per step, in `[0, π]`.
    pub ang_mag: f64,
    pub valid_lin: bool,
    pub valid_ang: bool,
}

impl FactorizedVelocity {
    pub fn zero(lin_dir: Vector3<f64>, ang_dir: Vector3<f64>) -> Self {
        Self {
            lin_dir,
            ang_dir,
            lin_mag: 0.0,
            ang_mag: 0.0,
            valid_lin: false,
            valid_ang: false,
        }
    }
}

/// Factorizes one step. `prev` supplies the fallback directions for
/// degenerate components (world +z when absent).
pub fn factorize(x_dot: &Vector3<f64>, q_t: &[f64], q_next: &[f64], prev: Option<&FactorizedVelocity>) -> FactorizedVelocity {
    let (prev_lin, prev_ang) = prev.map_or((Vector3::z(), Vector3::z()), |p| (p.lin_dir, p.ang_dir));
    let lin_mag = x_dot.norm();
    let (lin_dir, valid_lin, lin_mag) = if lin_mag > LIN_EPS {
        (x_dot / lin_mag, true, lin_mag)
    } else {
        (prev_lin, false, lin_mag)
    };
    let dq = quat::mul(q_next, &quat::conj(q_t));
    let (axis, angle) = quat::to_axis_angle(&dq);
    let (ang_dir, valid_ang) = match axis {
        Some(a) if angle > ANG_EPS => (a, true),
        _ => (prev_ang, false),
    };
    FactorizedVelocity {
        lin_dir,
        ang_dir,
        lin_mag,
        ang_mag: angle,
        valid_lin,
        valid_ang,
    }
}

/// Inverse of [`factorize`]: translation per step and relative rotation.
pub fn compose(f: &FactorizedVelocity) -> (Vector3<f64>, Wxyz) {
    let x_dot = if f.valid_lin { f.lin_dir * f.lin_mag } else { Vector3::zeros() };
    let dq = if f.valid_ang {
        quat::from_axis_angle(&f.ang_dir, f.ang_mag)
    } else {
        quat::IDENTITY
    };
    (x_dot, dq)
}

/// Forward-difference factorization of a pose sequence; the last step has
/// zero velocity. Degenerate steps before the first valid one take that
/// step's direction instead of the +z default.
pub fn factorize_sequence(poses: &[Pose]) -> Vec<FactorizedVelocity> {
    let mut out: Vec<FactorizedVelocity> = Vec::with_capacity(poses.len());
    for t in 0..poses.len() {
        let f = if t + 1 < poses.len() {
            factorize(&(poses[t + 1].pos - poses[t].pos), &poses[t].quat, &poses[t + 1].quat, out.last())
        } else {
            let (l, a) = out.last().map_or((Vector3::z(), Vector3::z()), |p| (p.lin_dir, p.ang_dir));
            FactorizedVelocity::zero(l, a)
        };
        out.push(f);
    }
    if let Some(first) = out.iter().position(|f| f.valid_lin) {
        let d = out[first].lin_dir;
        out[..first].iter_mut().for_each(|f| f.lin_dir = d);
    }
    if let Some(first) = out.iter().position(|f| f.valid_ang) {
        let d = out[first].ang_dir;
        out[..first].iter_mut().for_each(|f| f.ang_dir = d);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    /// Normalized time in, pose per frame out.
    Time,
    /// Pose per frame in, factorized velocity out.
    State,
    /// Pose per frame in, plain linear velocity and rotation vector out.
    StateNaive,
}

impl Driver {
    pub fn name(self) -> &'static str {
        match self {
            Driver::Time => "time",
            Driver::State => "state",
            Driver::StateNaive => "state_naive",
        }
    }

    pub fn is_state(self) -> bool {
        !matches!(self, Driver::Time)
    }
}

/// Semantic role of one factor of a model manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role", content = "frame")]
pub enum Role {
    Time,
    Position(usize),
    Orientation(usize),
    LinDir(usize),
    AngDir(usize),
    LinVel(usize),
    AngVel(usize),
    LinMag,
    AngMag,
    Gripper,
}

impl Role {
    pub fn factor(self) -> Factor {
        match self {
            Role::Time | Role::LinMag | Role::Gripper => Factor::Euclid(1),
            Role::Position(_) | Role::LinVel(_) | Role::AngVel(_) => Factor::Euclid(3),
            Role::Orientation(_) => Factor::Quaternion,
            Role::LinDir(_) | Role::AngDir(_) => Factor::Sphere2,
            Role::AngMag => Factor::Circle,
        }
    }

    pub fn policy(self) -> FramePolicy {
        match self {
            Role::Position(_) | Role::Orientation(_) => FramePolicy::Full,
            Role::LinDir(_) | Role::AngDir(_) | Role::LinVel(_) | Role::AngVel(_) => FramePolicy::RotationOnly,
            Role::Time | Role::LinMag | Role::AngMag | Role::Gripper => FramePolicy::Identity,
        }
    }

    /// Frame index for per-frame roles.
    pub fn frame(self) -> Option<usize> {
        match self {
            Role::Position(f)
            | Role::Orientation(f)
            | Role::LinDir(f)
            | Role::AngDir(f)
            | Role::LinVel(f)
            | Role::AngVel(f) => Some(f),
            _ => None,
        }
    }

    pub fn is_pose(self) -> bool {
        matches!(self, Role::Position(_) | Role::Orientation(_))
    }
}

/// Factor roles of a model manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub driver: Driver,
    pub frames: usize,
    pub roles: Vec<Role>,
    pub manifold: ManifoldDescriptor,
}

impl Layout {
    pub fn new(frames: usize, driver: Driver) -> Result<Self> {
        if frames == 0 {
            return Err(Error::arg("a model needs at least one frame"));
        }
        let mut roles = Vec::new();
        if driver == Driver::Time {
            roles.push(Role::Time);
        }
        for f in 0..frames {
            roles.push(Role::Position(f));
            roles.push(Role::Orientation(f));
            match driver {
                Driver::Time => {}
                Driver::State => {
                    roles.push(Role::LinDir(f));
                    roles.push(Role::AngDir(f));
                }
                Driver::StateNaive => {
                    roles.push(Role::LinVel(f));
                    roles.push(Role::AngVel(f));
                }
            }
        }
        if driver == Driver::State {
            roles.push(Role::LinMag);
            roles.push(Role::AngMag);
        }
        roles.push(Role::Gripper);
        let manifold = ManifoldDescriptor::new(roles.iter().map(|r| r.factor()).collect())?;
        Ok(Self {
            driver,
            frames,
            roles,
            manifold,
        })
    }

    pub fn index_of(&self, role: Role) -> Option<usize> {
        self.roles.iter().position(|r| *r == role)
    }

    pub fn policies(&self) -> Vec<FramePolicy> {
        self.roles.iter().map(|r| r.policy()).collect()
    }

    /// Factors conditioned on during regression.
    pub fn inputs(&self) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&i| match self.driver {
                Driver::Time => self.roles[i] == Role::Time,
                _ => self.roles[i].is_pose(),
            })
            .collect()
    }

    /// Factors that belong to frame `f` or are global (frame-free).
    pub fn frame_factors(&self, f: usize) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&i| self.roles[i].frame().is_none_or(|g| g == f))
            .collect()
    }

    /// Factors of frame `f` only.
    pub fn frame_only_factors(&self, f: usize) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i].frame() == Some(f)).collect()
    }

    /// Roles with every frame index mapped to 0: the layout of the fused
    /// world-frame model, which has the same shape as a one-frame model.
    pub fn single_frame(&self) -> Layout {
        Layout::new(1, self.driver).expect("one frame is valid")
    }
}

/// Model manifold for `frames` frames and the given driver.
pub fn model_manifold(frames: usize, driver: Driver) -> Result<ManifoldDescriptor> {
    Layout::new(frames, driver).map(|l| l.manifold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_translation() {
        let f = factorize(&Vector3::new(0.0, 0.0, 0.02), &quat::IDENTITY, &quat::IDENTITY, None);
        assert_eq!(f.lin_dir, Vector3::z());
        assert!((f.lin_mag - 0.02).abs() < 1e-15);
        assert!(f.valid_lin);
        assert!(!f.valid_ang);
        assert_eq!(f.ang_mag, 0.0);
    }

    #[test]
    fn degenerate_holds_previous_direction() {
        let a = factorize(&Vector3::new(0.1, 0.0, 0.0), &quat::IDENTITY, &quat::yaw(0.1), None);
        let b = factorize(&Vector3::zeros(), &quat::yaw(0.1), &quat::yaw(0.1), Some(&a));
        assert_eq!(b.lin_dir, Vector3::x());
        assert_eq!(b.ang_dir, Vector3::z());
        assert!(!b.valid_lin && !b.valid_ang);
    }

    #[test]
    fn leading_rest_takes_first_direction() {
        let poses: Vec<Pose> = [0.0, 0.0, 0.0, 0.01, 0.03]
            .iter()
            .map(|&x| Pose::new(Vector3::new(x, 0.0, 0.0), quat::IDENTITY))
            .collect();
        let f = factorize_sequence(&poses);
        assert!(f.iter().all(|v| v.lin_dir == Vector3::x()));
        assert!(!f[0].valid_lin && f[2].valid_lin);
        assert!(f.iter().all(|v| v.ang_dir == Vector3::z()));
    }

    #[test]
    fn compose_examples() {
        let f = FactorizedVelocity {
            lin_dir: Vector3::x(),
            ang_dir: Vector3::z(),
            lin_mag: 0.05,
            ang_mag: 0.0,
            valid_lin: true,
            valid_ang: false,
        };
        let (v, dq) = compose(&f);
        assert_eq!(v, Vector3::new(0.05, 0.0, 0.0));
        assert_eq!(dq, quat::IDENTITY);
        let (v, dq) = compose(&FactorizedVelocity::zero(Vector3::x(), Vector3::y()));
        assert_eq!(v, Vector3::zeros());
        assert_eq!(dq, quat::IDENTITY);
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(model_manifold(1, Driver::State).unwrap().tangent_dim(), 13);
        assert_eq!(model_manifold(2, Driver::Time).unwrap().tangent_dim(), 14);
        assert_eq!(model_manifold(1, Driver::Time).unwrap().tangent_dim(), 8);
        assert!(model_manifold(0, Driver::Time).is_err());
        let naive = Layout::new(1, Driver::StateNaive).unwrap();
        assert_eq!(naive.manifold.tangent_dim(), 3 + 3 + 3 + 3 + 1);
    }

    #[test]
    fn layout_inputs() {
        let l = Layout::new(2, Driver::State).unwrap();
        assert_eq!(l.inputs(), vec![0, 1, 4, 5]);
        let t = Layout::new(2, Driver::Time).unwrap();
        assert_eq!(t.inputs(), vec![0]);
        assert_eq!(t.frame_factors(1), vec![0, 3, 4, 5]);
    }
}
