//! Kinematic pick-and-place world and the episode evaluation harness.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{run_sequence, CascadeConfig, Command, Plant, Rollout, RolloutConfig, RolloutStatus, TaskModel, TraceStep};
use crate::demo::{FrameInstance, Pose};
use crate::exec::{self, Execution};
use crate::gaussian::Regularization;
use crate::quat;

use super::scenario::{ScenarioSpec, GRIPPER_OPEN};

/// Gripper width below which the gripper counts as closed.
pub const GRASP_WIDTH: f64 = 0.04;
/// Maximum end-effector distance to the object for a grasp to bind.
pub const GRASP_RADIUS: f64 = 0.02;

/// End effector, gripper and one graspable object. The object binds when
/// the gripper closes near it and is released when the gripper opens.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub ee: Pose,
    pub gripper: f64,
    pub object: Vector3<f64>,
    /// Object position in the end-effector frame while grasped.
    pub held: Option<Vector3<f64>>,
    pub grasped_once: bool,
}

impl World {
    pub fn new(ee: Pose, object: Vector3<f64>) -> Self {
        Self {
            ee,
            gripper: GRIPPER_OPEN,
            object,
            held: None,
            grasped_once: false,
        }
    }
}

impl Plant for World {
    fn observe(&self) -> (Pose, f64) {
        (self.ee, self.gripper)
    }

    fn apply(&mut self, cmd: &Command, frozen: bool) {
        if !frozen {
            self.ee = Pose::new(cmd.pose.pos, quat::normalized(&cmd.pose.quat));
        }
        if let Some(rel) = self.held {
            self.object = self.ee.pos + quat::rotate(&self.ee.quat, &rel);
        }
        let was_open = self.gripper >= GRASP_WIDTH;
        self.gripper = cmd.gripper;
        let closed = self.gripper < GRASP_WIDTH;
        match self.held {
            Some(_) if !closed => self.held = None,
            None if closed && was_open && (self.ee.pos - self.object).norm() <= GRASP_RADIUS => {
                self.held = Some(quat::rotate(&quat::conj(&self.ee.quat), &(self.object - self.ee.pos)));
                self.grasped_once = true;
            }
            _ => {}
        }
    }
}

/// Anything that can drive the world through one episode.
pub trait Policy: Sync {
    fn rollout(&self, frames: &BTreeMap<String, FrameInstance>, world: &mut World, cfg: &RolloutConfig, seed: u64) -> Rollout;
}

/// A learned task model, adapted to each episode's frames.
#[derive(Clone, Debug)]
pub struct TaskPolicy {
    pub task: TaskModel,
    pub reg: Regularization,
    pub cascade: CascadeConfig,
}

impl TaskPolicy {
    pub fn new(task: TaskModel) -> Self {
        Self {
            task,
            reg: Regularization::default(),
            cascade: CascadeConfig {
                exec: Execution::Sequential,
                ..CascadeConfig::default()
            },
        }
    }
}

impl Policy for TaskPolicy {
    fn rollout(&self, frames: &BTreeMap<String, FrameInstance>, world: &mut World, cfg: &RolloutConfig, seed: u64) -> Rollout {
        let cascade = CascadeConfig { seed, ..self.cascade };
        match self.task.adapt(frames, self.reg, &cascade) {
            Ok(adapted) => run_sequence(&self.task, &adapted, cfg, world),
            Err(e) => Rollout {
                status: RolloutStatus::NumericalFailure(e.to_string()),
                trace: Vec::new(),
                switches: Vec::new(),
                resets: 0,
            },
        }
    }
}

/// Replays the scenario's noiseless plan in the episode's frames.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    pub scenario: ScenarioSpec,
}

impl Policy for ScriptedPolicy {
    fn rollout(&self, frames: &BTreeMap<String, FrameInstance>, world: &mut World, cfg: &RolloutConfig, seed: u64) -> Rollout {
        let spec = ScenarioSpec {
            sigma_pos: 0.0,
            sigma_rot: 0.0,
            sample_sigma_pos: 0.0,
            sample_sigma_rot: 0.0,
            duration_jitter: 0.0,
            ..self.scenario.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (demo, _) = match spec.demo(frames, &mut rng) {
            Ok(d) => d,
            Err(e) => return failed(e.to_string()),
        };
        replay(demo.poses.iter().copied().zip(demo.gripper.iter().copied()), world, cfg)
    }
}

/// Emits uniformly random poses inside the workspace.
#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy {
    pub steps: usize,
}

impl Policy for RandomPolicy {
    fn rollout(&self, _frames: &BTreeMap<String, FrameInstance>, world: &mut World, cfg: &RolloutConfig, seed: u64) -> Rollout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cmds: Vec<(Pose, f64)> = (0..self.steps)
            .map(|_| {
                let p = Vector3::new(rng.random_range(0.1..0.8), rng.random_range(-0.5..0.5), rng.random_range(0.0..0.5));
                let q = quat::from_rotation_vector(&Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ));
                (Pose::new(p, q), rng.random_range(0.0..GRIPPER_OPEN))
            })
            .collect();
        replay(cmds.into_iter(), world, cfg)
    }
}

fn failed(msg: String) -> Rollout {
    Rollout {
        status: RolloutStatus::NumericalFailure(msg),
        trace: Vec::new(),
        switches: Vec::new(),
        resets: 0,
    }
}

fn replay(cmds: impl Iterator<Item = (Pose, f64)>, world: &mut World, cfg: &RolloutConfig) -> Rollout {
    let mut trace = Vec::new();
    for (step, (pose, gripper)) in cmds.enumerate() {
        let frozen = cfg.freeze.is_some_and(|f| f.active(step));
        world.apply(&Command { pose, gripper }, frozen);
        trace.push(TraceStep {
            step,
            skill: 0,
            pose: world.ee,
            gripper: world.gripper,
            top_component: 0,
            top_weight: 1.0,
            reset: false,
        });
    }
    Rollout {
        status: RolloutStatus::Completed,
        trace,
        switches: Vec::new(),
        resets: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub rollout: RolloutConfig,
    /// Keep full traces of every episode.
    pub keep_traces: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: 0,
            rollout: RolloutConfig::default(),
            keep_traces: false,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub success: bool,
    pub status: RolloutStatus,
    pub steps: usize,
    /// Distance of the object from the place point at the end (m).
    pub final_error: f64,
    pub grasped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceStep>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean and standard deviation of successful trajectory lengths.
    pub mean_length: f64,
    pub std_length: f64,
    pub timeouts: usize,
    pub numerical_failures: usize,
    pub results: Vec<EpisodeResult>,
}

/// Seed of episode `i` of an evaluation seeded with `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64 + 1);
    rng.random()
}

/// Runs one episode in freshly sampled frames.
pub fn run_episode<P: Policy + ?Sized>(policy: &P, scenario: &ScenarioSpec, cfg: &EvalConfig, episode: usize) -> EpisodeResult {
    let seed = episode_seed(cfg.seed, episode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = scenario.sample_frames(&mut rng);
    let home = scenario.home.resolve(&frames).expect("validated scenario");
    let place = scenario.place_point(&frames).expect("validated scenario");
    let object = scenario
        .carry
        .as_ref()
        .and_then(|c| frames.get(&c.object_frame))
        .map_or(Vector3::new(f64::NAN, f64::NAN, f64::NAN), |f| f.origin);
    let mut world = World::new(home, object);
    let out = policy.rollout(&frames, &mut world, &cfg.rollout, seed);
    let final_error = place.map_or(f64::INFINITY, |p| (world.object - p).norm());
    let tol = scenario.carry.as_ref().map_or(0.0, |c| c.tolerance);
    let success = out.status == RolloutStatus::Completed && final_error <= tol && world.held.is_none();
    EpisodeResult {
        episode,
        success,
        steps: out.trace.len(),
        status: out.status,
        final_error,
        grasped: world.grasped_once,
        trace: cfg.keep_traces.then_some(out.trace),
    }
}

/// Evaluates a policy over `cfg.episodes` independent episodes.
pub fn evaluate<P: Policy + ?Sized>(policy: &P, scenario: &ScenarioSpec, cfg: &EvalConfig) -> EvalSummary {
    let results = exec::map_indices(cfg.exec, cfg.episodes, |i| run_episode(policy, scenario, cfg, i));
    summarize(results)
}

pub fn summarize(results: Vec<EpisodeResult>) -> EvalSummary {
    let episodes = results.len();
    let lengths: Vec<f64> = results.iter().filter(|r| r.success).map(|r| r.steps as f64).collect();
    let successes = lengths.len();
    let mean_length = if successes > 0 { lengths.iter().sum::<f64>() / successes as f64 } else { 0.0 };
    let std_length = if successes > 1 {
        (lengths.iter().map(|l| (l - mean_length).powi(2)).sum::<f64>() / (successes - 1) as f64).sqrt()
    } else {
        0.0
    };
    EvalSummary {
        episodes,
        successes,
        success_rate: if episodes > 0 { successes as f64 / episodes as f64 } else { 0.0 },
        mean_length,
        std_length,
        timeouts: results.iter().filter(|r| r.status == RolloutStatus::Timeout).count(),
        numerical_failures: results
            .iter()
            .filter(|r| matches!(r.status, RolloutStatus::NumericalFailure(_)))
            .count(),
        results,
    }
}
