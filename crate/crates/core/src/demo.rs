//! Demonstration data: timed end-effector poses, gripper widths and the
//! candidate frames observed at the start of each episode.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::check_unit_rotation;
use crate::quat::{self, Wxyz};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Vector3<f64>,
    pub quat: Wxyz,
}

impl Pose {
    pub fn new(pos: Vector3<f64>, quat: Wxyz) -> Self {
        Self { pos, quat }
    }

    /// Flat `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.pos.x, self.pos.y, self.pos.z, self.quat[0], self.quat[1], self.quat[2], self.quat[3]]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            pos: Vector3::new(s[0], s[1], s[2]),
            quat: [s[3], s[4], s[5], s[6]],
        }
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.to_array())
    }
}

/// A static coordinate frame attached to a scene object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameInstance {
    pub rotation: Wxyz,
    pub origin: Vector3<f64>,
}

impl FrameInstance {
    pub fn new(rotation: Wxyz, origin: Vector3<f64>) -> Result<Self> {
        check_unit_rotation(&rotation)?;
        Ok(Self { rotation, origin })
    }

    pub fn identity() -> Self {
        Self {
            rotation: quat::IDENTITY,
            origin: Vector3::zeros(),
        }
    }

    /// World pose -> pose expressed in this frame.
    pub fn to_local(&self, p: &Pose) -> Pose {
        let inv = quat::conj(&self.rotation);
        Pose {
            pos: quat::rotate(&inv, &(p.pos - self.origin)),
            quat: quat::mul(&inv, &p.quat),
        }
    }

    /// Pose expressed in this frame -> world pose.
    pub fn to_world(&self, p: &Pose) -> Pose {
        Pose {
            pos: quat::rotate(&self.rotation, &p.pos) + self.origin,
            quat: quat::mul(&self.rotation, &p.quat),
        }
    }

    /// Composition `g ∘ self` for a rigid transform `g = (rot, trans)`.
    pub fn transformed(&self, rot: &Wxyz, trans: &Vector3<f64>) -> FrameInstance {
        FrameInstance {
            rotation: quat::normalized(&quat::mul(rot, &self.rotation)),
            origin: quat::rotate(rot, &self.origin) + trans,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub time: Vec<f64>,
    pub poses: Vec<Pose>,
    pub gripper: Vec<f64>,
    pub frames: BTreeMap<String, FrameInstance>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        if n < 2 {
            return Err(Error::arg("a demonstration needs at least two samples"));
        }
        if self.time.len() != n || self.gripper.len() != n {
            return Err(Error::arg(format!(
                "demonstration arrays differ in length (time {}, poses {n}, gripper {})",
                self.time.len(),
                self.gripper.len()
            )));
        }
        for p in &self.poses {
            check_unit_rotation(&p.quat)?;
        }
        for f in self.frames.values() {
            check_unit_rotation(&f.rotation)?;
        }
        Ok(())
    }

    pub fn frame(&self, demo: usize, id: &str) -> Result<&FrameInstance> {
        self.frames.get(id).ok_or_else(|| Error::MissingFrame {
            demo,
            frame: id.to_string(),
        })
    }

    /// Copy restricted to samples `range`, with time shifted to start at 0.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Demonstration {
        let t0 = self.time[range.start];
        Demonstration {
            time: self.time[range.clone()].iter().map(|t| t - t0).collect(),
            poses: self.poses[range.clone()].to_vec(),
            gripper: self.gripper[range].to_vec(),
            frames: self.frames.clone(),
        }
    }

    /// Flips quaternion signs for temporal continuity.
    pub fn make_continuous(&mut self) {
        let qs: Vec<Wxyz> = self.poses.iter().map(|p| p.quat).collect();
        for (p, q) in self.poses.iter_mut().zip(crate::manifold::make_continuous(&qs)) {
            p.quat = q;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    /// Control period in seconds.
    pub dt: f64,
    pub demos: Vec<Demonstration>,
}

impl DemonstrationSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::arg("dt must be positive"));
        }
        if self.demos.is_empty() {
            return Err(Error::arg("the demonstration set is empty"));
        }
        self.demos.iter().try_for_each(|d| d.validate())
    }

    /// Frame ids present in every demonstration.
    pub fn common_frames(&self) -> Vec<String> {
        let Some(first) = self.demos.first() else {
            return Vec::new();
        };
        first
            .frames
            .keys()
            .filter(|k| self.demos.iter().all(|d| d.frames.contains_key(*k)))
            .cloned()
            .collect()
    }
}
