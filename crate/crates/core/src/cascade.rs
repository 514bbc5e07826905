//! Skill sequencing: stitching adapted skill HMMs at their boundaries,
//! time reversal of skills, and the closed-loop controller that runs a
//! sequence of skills on a plant.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::actions::{compose, Driver, FactorizedVelocity, Layout, Role};
use crate::demo::{FrameInstance, Pose};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gaussian::{kl_monte_carlo_with_se, Regularization, KL_DEFAULT_SAMPLES};
use crate::manifold::{wrap_angle, ManifoldDescriptor};
use crate::mixture::{GmrState, HMMModel};
use crate::quat::{self, Wxyz};
use crate::tpgmm::{driver_input, SkillModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub kl_samples: usize,
    pub seed: u64,
    /// Connect every component pair instead of the last quarter of the first
    /// skill to the first quarter of the second.
    pub full: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            kl_samples: KL_DEFAULT_SAMPLES,
            seed: 0,
            full: false,
            exec: Execution::default(),
        }
    }
}

/// Transition structure across one skill boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeBlock {
    /// Source components of the first skill.
    pub rows: Vec<usize>,
    /// Target components of the second skill.
    pub cols: Vec<usize>,
    /// `KL(h1_i ‖ h2_j)` over the pose factors, `rows × cols`.
    pub kl: DMatrix<f64>,
    /// First skill's transitions after joint row normalization.
    pub intra: DMatrix<f64>,
    /// Inter-skill transitions, `K1 × K2`, zero outside `rows × cols`.
    pub inter: DMatrix<f64>,
}

impl CascadeBlock {
    /// Initial state distribution of the second skill given the first
    /// skill's final state distribution.
    pub fn handover(&self, alpha: &DVector<f64>, fallback: &DVector<f64>) -> DVector<f64> {
        let mut logs = vec![f64::NEG_INFINITY; fallback.len()];
        for (c, &j) in self.cols.iter().enumerate() {
            let terms: Vec<f64> = self
                .rows
                .iter()
                .enumerate()
                .filter(|(_, &i)| alpha[i] > 0.0)
                .map(|(r, &i)| alpha[i].ln() - self.kl[(r, c)])
                .collect();
            logs[j] = log_sum_exp(&terms);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return fallback.clone();
        }
        let e = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - m).exp()));
        let s = e.sum();
        e / s
    }

    /// The joint chain of both skills as one block matrix.
    pub fn joint(&self, second: &DMatrix<f64>) -> DMatrix<f64> {
        let (k1, k2) = (self.intra.nrows(), second.nrows());
        let mut out = DMatrix::zeros(k1 + k2, k1 + k2);
        out.view_mut((0, 0), (k1, k1)).copy_from(&self.intra);
        out.view_mut((0, k1), (k1, k2)).copy_from(&self.inter);
        out.view_mut((k1, k1), (k2, k2)).copy_from(second);
        out
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Components in the order they are visited: by mean time when the model
/// has a time factor, by index otherwise.
pub fn visit_order(skill: &SkillModel, hmm: &HMMModel) -> Vec<usize> {
    let layout = if hmm.manifold == skill.hmm.manifold { skill.layout() } else { skill.world_layout() };
    let mut order: Vec<usize> = (0..hmm.k()).collect();
    if let Some(ti) = layout.index_of(Role::Time) {
        let r = hmm.manifold.ambient_range(ti).start;
        order.sort_by(|&a, &b| hmm.components[a].mean[r].total_cmp(&hmm.components[b].mean[r]));
    }
    order
}

fn quarter(k: usize) -> usize {
    k.div_ceil(4)
}

/// Stitches two adapted skills. Inter-skill weights are `exp(-KL)` between
/// the pose marginals, and each source row is normalized together with the
/// first skill's own transitions.
pub fn cascade_pair(
    h1: &HMMModel,
    order1: &[usize],
    pose1: &[usize],
    h2: &HMMModel,
    order2: &[usize],
    pose2: &[usize],
    cfg: &CascadeConfig,
) -> Result<CascadeBlock> {
    let (k1, k2) = (h1.k(), h2.k());
    if order1.len() != k1 || order2.len() != k2 {
        return Err(Error::arg("visit order does not cover every component"));
    }
    let (rows, cols): (Vec<usize>, Vec<usize>) = if cfg.full {
        ((0..k1).collect(), (0..k2).collect())
    } else {
        (order1[k1 - quarter(k1)..].to_vec(), order2[..quarter(k2)].to_vec())
    };
    let m1 = h1.marginalize(pose1)?;
    let m2 = h2.marginalize(pose2)?;
    if m1.manifold != m2.manifold {
        return Err(Error::arg("pose factors of cascaded skills differ"));
    }
    let mut kl = DMatrix::zeros(rows.len(), cols.len());
    for (r, &i) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            let seed = cfg.seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let (d, _) = kl_monte_carlo_with_se(&m1.components[i], &m2.components[j], cfg.kl_samples, seed, cfg.exec)?;
            kl[(r, c)] = d.max(0.0);
        }
    }
    let mut intra = h1.transitions.clone();
    let mut inter = DMatrix::zeros(k1, k2);
    for (r, &i) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            inter[(i, j)] = (-kl[(r, c)]).exp();
        }
    }
    for i in 0..k1 {
        let s = intra.row(i).sum() + inter.row(i).sum();
        if s > 0.0 {
            intra.row_mut(i).scale_mut(1.0 / s);
            inter.row_mut(i).scale_mut(1.0 / s);
        }
    }
    Ok(CascadeBlock {
        rows,
        cols,
        kl,
        intra,
        inter,
    })
}

/// Time-reversed copy of a time-driven skill. Component contents are
/// mirrored in time and the chain visits them in mirrored rank order, so
/// reversing twice restores the original model.
pub fn reverse_skill(skill: &SkillModel) -> Result<SkillModel> {
    if skill.driver != Driver::Time {
        return Err(Error::UnsupportedDriver(skill.driver.name()));
    }
    let layout = skill.layout();
    let ti = layout.index_of(Role::Time).expect("time-driven layout has a time factor");
    let hmm = &skill.hmm;
    let k = hmm.k();
    let order = visit_order(skill, hmm);
    let mut sigma = vec![0; k];
    for r in 0..k {
        sigma[order[r]] = order[k - 1 - r];
    }
    let a = hmm.manifold.ambient_range(ti).start;
    let tt = hmm.manifold.tangent_range(ti).start;
    let mut components = hmm.components.clone();
    for c in components.iter_mut() {
        c.mean[a] = 1.0 - c.mean[a];
        let n = c.cov.nrows();
        for j in 0..n {
            if j != tt {
                c.cov[(tt, j)] = -c.cov[(tt, j)];
                c.cov[(j, tt)] = -c.cov[(j, tt)];
            }
        }
    }
    let priors = DVector::from_iterator(k, (0..k).map(|i| hmm.priors[sigma[i]]));
    let transitions = DMatrix::from_fn(k, k, |i, j| hmm.transitions[(sigma[i], sigma[j])]);
    Ok(SkillModel {
        hmm: HMMModel::new(hmm.manifold.clone(), priors, transitions, components)?,
        ..skill.clone()
    })
}

/// An ordered sequence of skills.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub skills: Vec<SkillModel>,
}

/// A task adapted to one scene.
#[derive(Clone, Debug)]
pub struct AdaptedTask {
    pub models: Vec<HMMModel>,
    pub blocks: Vec<CascadeBlock>,
}

impl TaskModel {
    pub fn new(skills: Vec<SkillModel>) -> Result<Self> {
        if skills.is_empty() {
            return Err(Error::arg("a task needs at least one skill"));
        }
        Ok(Self { skills })
    }

    /// Task with the given skill order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let skills = order
            .iter()
            .map(|&i| self.skills.get(i).cloned().ok_or_else(|| Error::arg(format!("no skill {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(skills)
    }

    /// Adapts every skill to the scene and stitches consecutive skills.
    pub fn adapt(
        &self,
        frames: &BTreeMap<String, FrameInstance>,
        reg: Regularization,
        cfg: &CascadeConfig,
    ) -> Result<AdaptedTask> {
        let models = self.skills.iter().map(|s| s.adapt(frames, reg)).collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::with_capacity(models.len().saturating_sub(1));
        for i in 0..models.len().saturating_sub(1) {
            let (s1, s2) = (&self.skills[i], &self.skills[i + 1]);
            blocks.push(cascade_pair(
                &models[i],
                &visit_order(s1, &models[i]),
                &pose_factors(&s1.world_layout()),
                &models[i + 1],
                &visit_order(s2, &models[i + 1]),
                &pose_factors(&s2.world_layout()),
                &CascadeConfig {
                    seed: cfg.seed.wrapping_add(i as u64),
                    ..*cfg
                },
            )?);
        }
        Ok(AdaptedTask { models, blocks })
    }
}

fn pose_factors(layout: &Layout) -> Vec<usize> {
    (0..layout.roles.len()).filter(|&i| layout.roles[i].is_pose()).collect()
}

/// Pose and gripper command sent to a plant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    pub pose: Pose,
    pub gripper: f64,
}

pub trait Plant {
    /// Current end-effector pose and gripper width.
    fn observe(&self) -> (Pose, f64);
    /// Executes one command. A frozen plant keeps its pose but still
    /// actuates the gripper.
    fn apply(&mut self, cmd: &Command, frozen: bool);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PostProcessing {
    /// Commands go to the plant unchanged.
    None,
    /// Per-step translation and rotation limits (m, rad).
    Clamp { v_max: f64, w_max: f64 },
    /// Clamping, and time only advances while the observed position is
    /// within `delta` of the current target.
    Threshold { delta: f64, v_max: f64, w_max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Freeze {
    pub start: usize,
    pub duration: usize,
}

impl Freeze {
    pub fn active(&self, step: usize) -> bool {
        step >= self.start && step < self.start + self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub post: PostProcessing,
    pub freeze: Option<Freeze>,
    /// Step budget; defaults to five times the summed skill lengths.
    pub max_steps: Option<usize>,
    /// Extra steps after the last skill reaches its terminal component.
    pub settle_steps: usize,
    /// Terminal-component weight required to switch skills.
    pub switch_weight: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            post: PostProcessing::None,
            freeze: None,
            max_steps: None,
            settle_steps: 10,
            switch_weight: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum RolloutStatus {
    Completed,
    Timeout,
    NumericalFailure(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub skill: usize,
    pub pose: Pose,
    pub gripper: f64,
    pub top_component: usize,
    pub top_weight: f64,
    pub reset: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub status: RolloutStatus,
    pub trace: Vec<TraceStep>,
    /// Step at which each skill after the first started.
    pub switches: Vec<usize>,
    pub resets: usize,
}

/// Locates the ambient slice of `role` in a regression output.
struct OutputMap {
    manifold: ManifoldDescriptor,
    roles: Vec<Role>,
}

impl OutputMap {
    fn new(layout: &Layout, outputs: &[usize]) -> Self {
        Self {
            manifold: layout.manifold.submanifold(outputs).expect("outputs are valid factors"),
            roles: outputs.iter().map(|&i| layout.roles[i]).collect(),
        }
    }

    fn get<'a>(&self, mean: &'a DVector<f64>, role: Role) -> Option<&'a [f64]> {
        let i = self.roles.iter().position(|r| *r == role)?;
        Some(&mean.as_slice()[self.manifold.ambient_range(i)])
    }
}

fn vec3(s: &[f64]) -> Vector3<f64> {
    Vector3::new(s[0], s[1], s[2])
}

fn limit_rotation(from: &Wxyz, to: &Wxyz, w_max: f64) -> Wxyz {
    let to = if quat::dot(from, to) < 0.0 { quat::neg(to) } else { *to };
    let (_, angle) = quat::to_axis_angle(&quat::mul(&to, &quat::conj(from)));
    if angle > w_max && angle > 0.0 {
        quat::slerp(from, &to, w_max / angle)
    } else {
        to
    }
}

fn limit(from: &Pose, to: &Pose, post: &PostProcessing) -> Pose {
    let (v_max, w_max) = match *post {
        PostProcessing::None => return *to,
        PostProcessing::Clamp { v_max, w_max } | PostProcessing::Threshold { v_max, w_max, .. } => (v_max, w_max),
    };
    let mut d = to.pos - from.pos;
    let n = d.norm();
    if n > v_max {
        d *= v_max / n;
    }
    Pose::new(from.pos + d, limit_rotation(&from.quat, &to.quat, w_max))
}

fn finite(p: &Pose, g: f64) -> bool {
    p.pos.iter().all(|v| v.is_finite()) && p.quat.iter().all(|v| v.is_finite()) && g.is_finite()
}

/// Runs the adapted skills in order on `plant`.
///
/// A skill hands over to the next once its terminal component carries more
/// than `switch_weight` of the state distribution (and, for time-driven
/// skills, its time has run out). The next skill starts from the state
/// distribution propagated through the inter-skill block.
pub fn run_sequence<P: Plant>(task: &TaskModel, adapted: &AdaptedTask, cfg: &RolloutConfig, plant: &mut P) -> Rollout {
    let budget = cfg
        .max_steps
        .unwrap_or(5 * task.skills.iter().map(|s| s.t_bar).sum::<usize>());
    let mut trace = Vec::new();
    let mut switches = Vec::new();
    let mut resets = 0;
    let mut prior: Option<DVector<f64>> = None;
    let mut step = 0usize;
    let fail = |msg: String, trace: Vec<TraceStep>, switches: Vec<usize>, resets: usize| Rollout {
        status: RolloutStatus::NumericalFailure(msg),
        trace,
        switches,
        resets,
    };

    for (si, skill) in task.skills.iter().enumerate() {
        let model = &adapted.models[si];
        let layout = skill.world_layout();
        let mut gmr = match prior.take() {
            Some(p) => GmrState::with_prior(model, &layout.inputs(), p),
            None => skill.gmr(model),
        };
        let gmr = match gmr.as_mut() {
            Ok(g) => g,
            Err(e) => return fail(e.to_string(), trace, switches, resets),
        };
        let out_map = OutputMap::new(&layout, gmr.outputs());
        let terminal = *visit_order(skill, model).last().expect("models have components");
        let dt_norm = 1.0 / (skill.t_bar.max(2) - 1) as f64;
        let mut t = 0.0f64;
        let mut last_target: Option<Vector3<f64>> = None;
        let mut settle: Option<usize> = None;
        let last = si + 1 == task.skills.len();
        if si > 0 {
            switches.push(step);
        }
        loop {
            if step >= budget {
                return Rollout {
                    status: RolloutStatus::Timeout,
                    trace,
                    switches,
                    resets,
                };
            }
            let (obs, _) = plant.observe();
            if skill.driver == Driver::Time {
                if let Some(prev) = last_target {
                    let close = match cfg.post {
                        PostProcessing::Threshold { delta, .. } => (obs.pos - prev).norm() <= delta,
                        _ => true,
                    };
                    if close {
                        t = (t + dt_norm).min(1.0);
                    }
                }
            }
            let input = driver_input(skill.driver, t, &obs);
            let out = match gmr.step(&input) {
                Ok(o) => o,
                Err(e) => return fail(format!("skill {si}, step {step}: {e}"), trace, switches, resets),
            };
            if out.reset {
                resets += 1;
            }
            let mean = &out.gaussian.mean;
            let gripper = out_map.get(mean, Role::Gripper).map_or(0.0, |g| g[0]);
            let target = match skill.driver {
                Driver::Time => Pose::new(
                    vec3(out_map.get(mean, Role::Position(0)).expect("time output has a position")),
                    quat::normalized(out_map.get(mean, Role::Orientation(0)).expect("time output has an orientation")),
                ),
                Driver::State => {
                    let f = FactorizedVelocity {
                        lin_dir: vec3(out_map.get(mean, Role::LinDir(0)).expect("state output")),
                        ang_dir: vec3(out_map.get(mean, Role::AngDir(0)).expect("state output")),
                        lin_mag: out_map.get(mean, Role::LinMag).expect("state output")[0].max(0.0),
                        ang_mag: wrap_angle(out_map.get(mean, Role::AngMag).expect("state output")[0]).abs(),
                        valid_lin: true,
                        valid_ang: true,
                    };
                    let (dx, dq) = compose(&f);
                    Pose::new(obs.pos + dx, quat::normalized(&quat::mul(&dq, &obs.quat)))
                }
                Driver::StateNaive => {
                    let dx = vec3(out_map.get(mean, Role::LinVel(0)).expect("naive output"));
                    let dq = quat::from_rotation_vector(&vec3(out_map.get(mean, Role::AngVel(0)).expect("naive output")));
                    Pose::new(obs.pos + dx, quat::normalized(&quat::mul(&dq, &obs.quat)))
                }
            };
            if !finite(&target, gripper) {
                return fail(format!("skill {si}, step {step}: non-finite prediction"), trace, switches, resets);
            }
            last_target = Some(target.pos);
            let cmd = Command {
                pose: limit(&obs, &target, &cfg.post),
                gripper,
            };
            let frozen = cfg.freeze.is_some_and(|f| f.active(step));
            plant.apply(&cmd, frozen);
            let (top_component, top_weight) = out
                .weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, w)| (i, *w))
                .unwrap_or((0, 0.0));
            let (pose, g) = plant.observe();
            trace.push(TraceStep {
                step,
                skill: si,
                pose,
                gripper: g,
                top_component,
                top_weight,
                reset: out.reset,
            });
            step += 1;
            let time_done = skill.driver != Driver::Time || t >= 1.0 - 1e-9;
            if let Some(n) = settle.as_mut() {
                *n += 1;
                if *n >= cfg.settle_steps {
                    break;
                }
                continue;
            }
            if time_done && out.weights[terminal] > cfg.switch_weight {
                if last && cfg.settle_steps > 0 {
                    settle = Some(0);
                    continue;
                }
                break;
            }
        }
        debug!("skill {si} finished at step {step}");
        if let Some(block) = adapted.blocks.get(si) {
            prior = Some(block.handover(gmr.prior(), &adapted.models[si + 1].priors));
        }
    }
    Rollout {
        status: RolloutStatus::Completed,
        trace,
        switches,
        resets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{Demonstration, DemonstrationSet};
    use crate::tpgmm::{fit, FitConfig};
    use nalgebra::dvector;

    fn line_skill(from: Vector3<f64>, to: Vector3<f64>, seed: u64) -> SkillModel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let demos = (0..4)
            .map(|_| {
                let jitter = Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                let poses = (0..n)
                    .map(|j| {
                        let s = j as f64 / (n - 1) as f64;
                        let s = s * s * (3.0 - 2.0 * s);
                        let q = quat::from_axis_angle(&Vector3::new(0.1, 0.2, 1.0), 0.05 + rng.random_range(-0.01..0.01));
                        Pose::new(from + (to - from) * s + jitter * (s * (1.0 - s)), q)
                    })
                    .collect();
                let mut frames = BTreeMap::new();
                frames.insert("world".to_string(), FrameInstance::identity());
                Demonstration {
                    time: (0..n).map(|j| j as f64 * 0.05).collect(),
                    poses,
                    gripper: (0..n).map(|_| 0.08 + rng.random_range(-0.001..0.001)).collect(),
                    frames,
                }
            })
            .collect();
        let set = DemonstrationSet { dt: 0.05, demos };
        fit(&set, &["world".to_string()], Driver::Time, &FitConfig { k: 5, ..Default::default() }).unwrap().0
    }

    struct Teleport {
        pose: Pose,
        gripper: f64,
    }

    impl Plant for Teleport {
        fn observe(&self) -> (Pose, f64) {
            (self.pose, self.gripper)
        }
        fn apply(&mut self, cmd: &Command, frozen: bool) {
            if !frozen {
                self.pose = cmd.pose;
            }
            self.gripper = cmd.gripper;
        }
    }

    fn world() -> BTreeMap<String, FrameInstance> {
        let mut f = BTreeMap::new();
        f.insert("world".to_string(), FrameInstance::identity());
        f
    }

    #[test]
    fn reversal_is_an_involution() {
        let s = line_skill(Vector3::zeros(), Vector3::new(0.3, 0.0, 0.0), 1);
        let rr = reverse_skill(&reverse_skill(&s).unwrap()).unwrap();
        assert_eq!(rr.hmm.transitions, s.hmm.transitions);
        assert_eq!(rr.hmm.priors, s.hmm.priors);
        for (a, b) in rr.hmm.components.iter().zip(&s.hmm.components) {
            assert!((&a.mean - &b.mean).norm() < 1e-14);
            assert_eq!(a.cov, b.cov);
        }
    }

    #[test]
    fn reversed_skill_runs_backwards() {
        let (a, b) = (Vector3::new(0.1, 0.0, 0.2), Vector3::new(0.4, 0.1, 0.3));
        let s = line_skill(a, b, 2);
        let r = reverse_skill(&s).unwrap();
        let task = TaskModel::new(vec![r]).unwrap();
        let adapted = task.adapt(&world(), Regularization::default(), &CascadeConfig::default()).unwrap();
        let mut plant = Teleport {
            pose: Pose::new(b, quat::IDENTITY),
            gripper: 0.08,
        };
        let out = run_sequence(&task, &adapted, &RolloutConfig::default(), &mut plant);
        assert_eq!(out.status, RolloutStatus::Completed);
        assert!((plant.pose.pos - a).norm() < 0.01, "{:?}", plant.pose.pos);
    }

    #[test]
    fn state_driver_cannot_be_reversed() {
        let mut s = line_skill(Vector3::zeros(), Vector3::x(), 3);
        s.driver = Driver::State;
        assert!(matches!(reverse_skill(&s), Err(Error::UnsupportedDriver(_))));
    }

    #[test]
    fn two_skills_chain_and_switch_once() {
        let (a, b, c) = (Vector3::new(0.1, 0.0, 0.2), Vector3::new(0.4, 0.1, 0.3), Vector3::new(0.4, -0.2, 0.1));
        let task = TaskModel::new(vec![line_skill(a, b, 4), line_skill(b, c, 5)]).unwrap();
        let adapted = task.adapt(&world(), Regularization::default(), &CascadeConfig::default()).unwrap();
        let block = &adapted.blocks[0];
        assert_eq!(block.rows.len(), 2);
        for i in 0..block.intra.nrows() {
            let s = block.intra.row(i).sum() + block.inter.row(i).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut plant = Teleport {
            pose: Pose::new(a, quat::IDENTITY),
            gripper: 0.08,
        };
        let out = run_sequence(&task, &adapted, &RolloutConfig::default(), &mut plant);
        assert_eq!(out.status, RolloutStatus::Completed);
        assert_eq!(out.switches.len(), 1);
        assert!((plant.pose.pos - c).norm() < 0.01);
        let joint = block.joint(&adapted.models[1].transitions);
        assert_eq!(joint.nrows(), adapted.models[0].k() + adapted.models[1].k());
    }

    #[test]
    fn endpoint_blocks_carry_lowest_divergence() {
        let (a, b, c) = (Vector3::new(0.1, 0.0, 0.2), Vector3::new(0.4, 0.1, 0.3), Vector3::new(0.4, -0.2, 0.1));
        let task = TaskModel::new(vec![line_skill(a, b, 6), line_skill(b, c, 7)]).unwrap();
        let full = task
            .adapt(&world(), Regularization::default(), &CascadeConfig { full: true, kl_samples: 2000, ..Default::default() })
            .unwrap();
        let block = &full.blocks[0];
        let o1 = visit_order(&task.skills[0], &full.models[0]);
        let o2 = visit_order(&task.skills[1], &full.models[1]);
        let col = block.kl.column(o2[0]);
        let best = col[o1[o1.len() - 1]];
        assert!(col.iter().all(|&d| d >= best - 1e-9), "{}", block.kl);
    }

    #[test]
    fn clamp_limits_steps() {
        let from = Pose::new(Vector3::zeros(), quat::IDENTITY);
        let to = Pose::new(Vector3::new(1.0, 0.0, 0.0), quat::yaw(1.0));
        let p = limit(&from, &to, &PostProcessing::Clamp { v_max: 0.1, w_max: 0.2 });
        assert!((p.pos.norm() - 0.1).abs() < 1e-12);
        assert!((quat::to_axis_angle(&p.quat).1 - 0.2).abs() < 1e-9);
    }

    #[test]
    fn handover_falls_back_to_priors() {
        let block = CascadeBlock {
            rows: vec![1],
            cols: vec![0],
            kl: DMatrix::from_element(1, 1, 3.0),
            intra: DMatrix::identity(2, 2),
            inter: DMatrix::zeros(2, 2),
        };
        let fallback = dvector![0.5, 0.5];
        assert_eq!(block.handover(&dvector![1.0, 0.0], &fallback), fallback);
        assert_eq!(block.handover(&dvector![0.2, 0.8], &fallback), dvector![1.0, 0.0]);
    }
}
