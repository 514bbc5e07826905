//! Scenario descriptions and the minimum-jerk demonstration generator.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::demo::{Demonstration, DemonstrationSet, FrameInstance, Pose};
use crate::error::{Error, Result};
use crate::quat::{self, Wxyz};

/// End-effector orientation with the gripper pointing down.
pub const GRIPPER_DOWN: Wxyz = [0.0, 1.0, 0.0, 0.0];
pub const GRIPPER_OPEN: f64 = 0.08;
pub const GRIPPER_CLOSED: f64 = 0.0;

/// Uniform ranges for one frame's origin and yaw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSampler {
    pub id: String,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub yaw: [f64; 2],
}

impl FrameSampler {
    pub fn new(id: &str, x: [f64; 2], y: [f64; 2], yaw: [f64; 2]) -> Self {
        Self {
            id: id.to_string(),
            x,
            y,
            z: [0.0, 0.0],
            yaw,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FrameInstance {
        let u = |rng: &mut R, r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        let origin = Vector3::new(u(rng, self.x), u(rng, self.y), u(rng, self.z));
        let yaw = u(rng, self.yaw);
        FrameInstance {
            rotation: quat::yaw(yaw),
            origin,
        }
    }
}

/// A pose given relative to a named frame (the world when `frame` is
/// `None`). The gripper-down orientation is turned by `yaw` in that frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: Option<String>,
    pub offset: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl Waypoint {
    pub fn at(frame: &str, offset: [f64; 3]) -> Self {
        Self {
            frame: Some(frame.to_string()),
            offset,
            yaw: 0.0,
        }
    }

    pub fn resolve(&self, frames: &BTreeMap<String, FrameInstance>) -> Result<Pose> {
        let local = Pose::new(Vector3::from(self.offset), quat::mul(&quat::yaw(self.yaw), &GRIPPER_DOWN));
        match &self.frame {
            None => Ok(local),
            Some(id) => {
                let f = frames.get(id).ok_or_else(|| Error::MissingFrame {
                    demo: 0,
                    frame: id.clone(),
                })?;
                Ok(f.to_world(&local))
            }
        }
    }
}

/// One motion segment followed by a pause during which the gripper moves
/// to `gripper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillPlan {
    pub name: String,
    pub target: Waypoint,
    /// Nominal motion length in steps.
    pub duration: usize,
    /// Pause after the motion, in steps.
    pub pause: usize,
    pub gripper: f64,
}

/// Object transported by the task and the place it must end up at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarrySpec {
    pub object_frame: String,
    pub place: Waypoint,
    /// Success radius around the place point (m).
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub frames: Vec<FrameSampler>,
    pub home: Waypoint,
    pub initial_idle: usize,
    /// Extra idle steps at the start, drawn uniformly from `0..=idle_jitter`.
    pub idle_jitter: usize,
    pub skills: Vec<SkillPlan>,
    /// Relative spread of the motion durations: each is scaled by
    /// `U(1 - j, 1 + j)`.
    pub duration_jitter: f64,
    /// Extra pause steps per skill, drawn uniformly from `0..=pause_jitter`.
    pub pause_jitter: usize,
    /// Per-waypoint position noise (m).
    pub sigma_pos: f64,
    /// Per-waypoint rotation noise (rad).
    pub sigma_rot: f64,
    /// Per-sample position noise (m).
    pub sample_sigma_pos: f64,
    /// Per-sample rotation noise (rad).
    pub sample_sigma_rot: f64,
    /// Steps over which the gripper opens or closes at the start of a pause.
    pub gripper_steps: usize,
    pub dt: f64,
    pub demos: usize,
    pub seed: u64,
    pub carry: Option<CarrySpec>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        pick_and_place()
    }
}

pub const OBJECT: &str = "object";
pub const GOAL: &str = "goal";

/// Pick an object and place it above a goal, with three clutter frames.
pub fn pick_and_place() -> ScenarioSpec {
    let quarter = std::f64::consts::FRAC_PI_4;
    let pi = std::f64::consts::PI;
    let mut frames = vec![
        FrameSampler::new(OBJECT, [0.35, 0.55], [-0.25, -0.05], [-quarter, quarter]),
        FrameSampler::new(GOAL, [0.35, 0.55], [0.05, 0.25], [-quarter, quarter]),
    ];
    for i in 0..3 {
        frames.push(FrameSampler::new(&format!("clutter{i}"), [0.2, 0.7], [-0.4, 0.4], [-pi, pi]));
    }
    let skill = |name: &str, target: Waypoint, duration, pause, gripper| SkillPlan {
        name: name.to_string(),
        target,
        duration,
        pause,
        gripper,
    };
    ScenarioSpec {
        frames,
        home: Waypoint {
            frame: None,
            offset: [0.3, 0.0, 0.4],
            yaw: 0.0,
        },
        initial_idle: 5,
        idle_jitter: 0,
        skills: vec![
            skill("approach", Waypoint::at(OBJECT, [0.0, 0.0, 0.10]), 60, 12, GRIPPER_OPEN),
            skill("grasp", Waypoint::at(OBJECT, [0.0, 0.0, 0.0]), 40, 12, GRIPPER_CLOSED),
            skill("transfer", Waypoint::at(GOAL, [0.0, 0.0, 0.12]), 50, 12, GRIPPER_CLOSED),
            skill("place", Waypoint::at(GOAL, [0.0, 0.0, 0.03]), 40, 8, GRIPPER_OPEN),
        ],
        duration_jitter: 0.25,
        pause_jitter: 0,
        sigma_pos: 1e-3,
        sigma_rot: 1e-3,
        sample_sigma_pos: 0.0,
        sample_sigma_rot: 0.0,
        gripper_steps: 4,
        dt: 0.05,
        demos: 5,
        seed: 0,
        carry: Some(CarrySpec {
            object_frame: OBJECT.to_string(),
            place: Waypoint::at(GOAL, [0.0, 0.0, 0.03]),
            tolerance: 0.03,
        }),
    }
}

/// Pick and place with strongly varying idle, motion and pause timing
/// across demonstrations.
pub fn pick_and_place_varied() -> ScenarioSpec {
    ScenarioSpec {
        idle_jitter: 60,
        pause_jitter: 20,
        duration_jitter: 0.5,
        ..pick_and_place()
    }
}

/// `10s³ − 15s⁴ + 6s⁵`: zero velocity and acceleration at both ends.
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sigma)
}

fn perturb<R: Rng + ?Sized>(rng: &mut R, p: &Pose, sigma_pos: f64, sigma_rot: f64) -> Pose {
    let dq = quat::from_rotation_vector(&gaussian(rng, sigma_rot));
    Pose::new(p.pos + gaussian(rng, sigma_pos), quat::normalized(&quat::mul(&dq, &p.quat)))
}

/// Ground truth of one generated demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoTruth {
    /// Center of every inter-skill pause, in the step index of forward
    /// differences (the same convention as segmentation cuts).
    pub pause_centers: Vec<f64>,
    /// Motion length of every skill.
    pub durations: Vec<usize>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.skills.is_empty() {
            return Err(Error::arg("a scenario needs at least one skill"));
        }
        if !(self.dt > 0.0) || self.demos == 0 {
            return Err(Error::arg("dt and the demo count must be positive"));
        }
        if self.sigma_pos < 0.0 || self.sigma_rot < 0.0 || self.sample_sigma_pos < 0.0 || self.sample_sigma_rot < 0.0 {
            return Err(Error::arg("noise levels must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.duration_jitter) {
            return Err(Error::arg("duration_jitter must lie in [0, 1)"));
        }
        let declared: Vec<&str> = self.frames.iter().map(|f| f.id.as_str()).collect();
        let mut wps: Vec<&Waypoint> = self.skills.iter().map(|s| &s.target).collect();
        wps.push(&self.home);
        if let Some(c) = &self.carry {
            wps.push(&c.place);
            if !declared.contains(&c.object_frame.as_str()) {
                return Err(Error::arg(format!("carried object frame '{}' is not declared", c.object_frame)));
            }
        }
        for w in wps {
            if let Some(f) = &w.frame {
                if !declared.contains(&f.as_str()) {
                    return Err(Error::arg(format!("waypoint frame '{f}' is not declared")));
                }
            }
        }
        if self.skills.iter().any(|s| s.duration < 2) {
            return Err(Error::arg("skill durations must be at least two steps"));
        }
        Ok(())
    }

    pub fn frame_ids(&self) -> Vec<String> {
        self.frames.iter().map(|f| f.id.clone()).collect()
    }

    pub fn sample_frames<R: Rng + ?Sized>(&self, rng: &mut R) -> BTreeMap<String, FrameInstance> {
        self.frames.iter().map(|f| (f.id.clone(), f.sample(rng))).collect()
    }

    /// Place point of the carried object in the given scene.
    pub fn place_point(&self, frames: &BTreeMap<String, FrameInstance>) -> Result<Option<Vector3<f64>>> {
        match &self.carry {
            None => Ok(None),
            Some(c) => Ok(Some(c.place.resolve(frames)?.pos)),
        }
    }

    /// Generates one demonstration in the given scene.
    pub fn demo<R: Rng + ?Sized>(
        &self,
        frames: &BTreeMap<String, FrameInstance>,
        rng: &mut R,
    ) -> Result<(Demonstration, DemoTruth)> {
        let start = self.home.resolve(frames)?;
        let idle = self.initial_idle + if self.idle_jitter > 0 { rng.random_range(0..=self.idle_jitter) } else { 0 };
        let mut poses = vec![start; idle.max(1)];
        let mut gripper = vec![GRIPPER_OPEN; poses.len()];
        let mut pause_centers = Vec::new();
        let mut durations = Vec::new();
        let mut current = start;
        let mut width = GRIPPER_OPEN;
        for (i, skill) in self.skills.iter().enumerate() {
            let target = perturb(rng, &skill.target.resolve(frames)?, self.sigma_pos, self.sigma_rot);
            if (target.pos - current.pos).norm() < 1e-9 && quat::dot(&target.quat, &current.quat).abs() > 1.0 - 1e-12 {
                return Err(Error::arg(format!("skill '{}' has a zero-length segment", skill.name)));
            }
            let scale = if self.duration_jitter > 0.0 {
                rng.random_range(1.0 - self.duration_jitter..=1.0 + self.duration_jitter)
            } else {
                1.0
            };
            let n = ((skill.duration as f64 * scale).round() as usize).max(2);
            durations.push(n);
            let to_q = if quat::dot(&current.quat, &target.quat) < 0.0 { quat::neg(&target.quat) } else { target.quat };
            for j in 1..n {
                let s = min_jerk(j as f64 / (n - 1) as f64);
                poses.push(Pose::new(current.pos + (target.pos - current.pos) * s, quat::slerp(&current.quat, &to_q, s)));
                gripper.push(width);
            }
            let from = width;
            let pause = skill.pause + if self.pause_jitter > 0 { rng.random_range(0..=self.pause_jitter) } else { 0 };
            let ramp = self.gripper_steps.min(pause).max(1);
            let pause_start = poses.len();
            for j in 0..pause {
                let a = ((j + 1) as f64 / ramp as f64).min(1.0);
                poses.push(Pose::new(target.pos, to_q));
                gripper.push(from + (skill.gripper - from) * a);
            }
            if i + 1 < self.skills.len() {
                // the last motion sample already sits at the target
                pause_centers.push(pause_start as f64 - 1.0 + (pause as f64 - 1.0) / 2.0);
            }
            width = skill.gripper;
            current = Pose::new(target.pos, to_q);
        }
        let poses: Vec<Pose> = poses
            .iter()
            .map(|p| perturb(rng, p, self.sample_sigma_pos, self.sample_sigma_rot))
            .collect();
        let mut demo = Demonstration {
            time: (0..poses.len()).map(|j| j as f64 * self.dt).collect(),
            poses,
            gripper,
            frames: frames.clone(),
        };
        demo.make_continuous();
        Ok((
            demo,
            DemoTruth {
                pause_centers,
                durations,
            },
        ))
    }

    /// Generates `self.demos` demonstrations with freshly sampled frames.
    pub fn generate(&self) -> Result<(DemonstrationSet, Vec<DemoTruth>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut demos = Vec::with_capacity(self.demos);
        let mut truth = Vec::with_capacity(self.demos);
        for _ in 0..self.demos {
            let frames = self.sample_frames(&mut rng);
            let (d, t) = self.demo(&frames, &mut rng)?;
            demos.push(d);
            truth.push(t);
        }
        Ok((DemonstrationSet { dt: self.dt, demos }, truth))
    }
}

/// Generates a demonstration set from a scenario.
pub fn generate(spec: &ScenarioSpec) -> Result<DemonstrationSet> {
    spec.generate().map(|r| r.0)
}
