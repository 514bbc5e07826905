//! Task-parameterized HMMs: demonstrations are expressed in every selected
//! frame, one joint model is fitted, and at execution time each frame's
//! marginal is mapped to the world and the marginals are fused.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::actions::{factorize_sequence, Driver, Layout, Role};
use crate::demo::{DemonstrationSet, FrameInstance, Pose};
use crate::error::{Error, Result};
use crate::gaussian::{Regularization, DEFAULT_EPS};
use crate::mixture::{em_fit, init_time_binned, product_models, EmConfig, EmReport, GmrState, HMMModel};
use crate::quat::{self, Wxyz};

#[derive(Clone, Debug, PartialEq)]
pub struct SkillModel {
    pub driver: Driver,
    pub selected_frames: Vec<String>,
    pub hmm: HMMModel,
    /// Resampled skill length in steps.
    pub t_bar: usize,
    /// Control period in seconds.
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub em: EmConfig,
    /// Covariance floor used by the time-binned initialization.
    pub init_eps: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 5,
            em: EmConfig::default(),
            init_eps: DEFAULT_EPS,
        }
    }
}

fn push_vec3(out: &mut Vec<f64>, v: &nalgebra::Vector3<f64>) {
    out.extend_from_slice(v.as_slice());
}

/// Expresses every demonstration in the given frames and stacks the
/// per-frame data according to the driver's layout.
pub fn project_demos(set: &DemonstrationSet, frames: &[String], driver: Driver) -> Result<Vec<Vec<DVector<f64>>>> {
    let layout = Layout::new(frames.len(), driver)?;
    // per demo, per frame: local poses with quaternion signs aligned
    let mut local: Vec<Vec<Vec<Pose>>> = Vec::with_capacity(set.demos.len());
    let mut instances: Vec<Vec<&FrameInstance>> = Vec::with_capacity(set.demos.len());
    for (d, demo) in set.demos.iter().enumerate() {
        let fs = frames.iter().map(|id| demo.frame(d, id)).collect::<Result<Vec<_>>>()?;
        let mut per_frame = Vec::with_capacity(frames.len());
        for f in &fs {
            let poses: Vec<Pose> = demo.poses.iter().map(|p| f.to_local(p)).collect();
            let qs: Vec<Wxyz> = crate::manifold::make_continuous(&poses.iter().map(|p| p.quat).collect::<Vec<_>>());
            per_frame.push(poses.iter().zip(qs).map(|(p, q)| Pose::new(p.pos, q)).collect::<Vec<_>>());
        }
        local.push(per_frame);
        instances.push(fs);
    }
    for f in 0..frames.len() {
        let Some(first) = local.first().and_then(|d| d[f].first()) else {
            continue;
        };
        let reference = if first.quat[0] < 0.0 { quat::neg(&first.quat) } else { first.quat };
        for demo in local.iter_mut() {
            let seq = &mut demo[f];
            if quat::dot(&seq[0].quat, &reference) < 0.0 {
                seq.iter_mut().for_each(|p| p.quat = quat::neg(&p.quat));
            }
        }
    }

    let mut out = Vec::with_capacity(set.demos.len());
    for (d, demo) in set.demos.iter().enumerate() {
        let len = demo.len();
        let vel = if driver.is_state() { factorize_sequence(&demo.poses) } else { Vec::new() };
        let mut seq = Vec::with_capacity(len);
        for j in 0..len {
            let mut x = Vec::with_capacity(layout.manifold.ambient_dim());
            for role in &layout.roles {
                match *role {
                    Role::Time => x.push(if len > 1 { j as f64 / (len - 1) as f64 } else { 0.0 }),
                    Role::Position(f) => push_vec3(&mut x, &local[d][f][j].pos),
                    Role::Orientation(f) => x.extend_from_slice(&local[d][f][j].quat),
                    Role::LinDir(f) => {
                        push_vec3(&mut x, &quat::rotate(&quat::conj(&instances[d][f].rotation), &vel[j].lin_dir))
                    }
                    Role::AngDir(f) => {
                        push_vec3(&mut x, &quat::rotate(&quat::conj(&instances[d][f].rotation), &vel[j].ang_dir))
                    }
                    Role::LinVel(f) => {
                        let v = if j + 1 < len { local[d][f][j + 1].pos - local[d][f][j].pos } else { nalgebra::Vector3::zeros() };
                        push_vec3(&mut x, &v)
                    }
                    Role::AngVel(f) => {
                        let v = if j + 1 < len {
                            let inv = quat::conj(&instances[d][f].rotation);
                            let dq = quat::mul(&demo.poses[j + 1].quat, &quat::conj(&demo.poses[j].quat));
                            quat::rotate(&inv, &quat::to_rotation_vector(&dq))
                        } else {
                            nalgebra::Vector3::zeros()
                        };
                        push_vec3(&mut x, &v)
                    }
                    Role::LinMag => x.push(vel[j].lin_mag),
                    Role::AngMag => x.push(vel[j].ang_mag),
                    Role::Gripper => x.push(demo.gripper[j]),
                }
            }
            seq.push(DVector::from_vec(x));
        }
        out.push(seq);
    }
    Ok(out)
}

/// Fits a skill model: time-binned initialization followed by EM.
pub fn fit(set: &DemonstrationSet, frames: &[String], driver: Driver, cfg: &FitConfig) -> Result<(SkillModel, EmReport)> {
    set.validate()?;
    let t_bar = set.demos[0].len();
    if set.demos.iter().any(|d| d.len() != t_bar) {
        return Err(Error::arg("skill demonstrations must be resampled to a common length"));
    }
    let layout = Layout::new(frames.len(), driver)?;
    let data = project_demos(set, frames, driver)?;
    let init = init_time_binned(&layout.manifold, &data, cfg.k, cfg.init_eps)?;
    let (hmm, report) = em_fit(&init, &data, &cfg.em)?;
    Ok((
        SkillModel {
            driver,
            selected_frames: frames.to_vec(),
            hmm,
            t_bar,
            dt: set.dt,
        },
        report,
    ))
}

impl SkillModel {
    pub fn layout(&self) -> Layout {
        Layout::new(self.selected_frames.len(), self.driver).expect("validated at construction")
    }

    /// Layout of the adapted world-frame model.
    pub fn world_layout(&self) -> Layout {
        Layout::new(1, self.driver).expect("one frame is valid")
    }

    /// Index of the component reached last: the one with the latest mean
    /// time for time-driven models, the last component otherwise.
    pub fn terminal(&self) -> usize {
        match self.layout().index_of(Role::Time) {
            Some(ti) => {
                let r = self.hmm.manifold.ambient_range(ti);
                (0..self.hmm.k())
                    .max_by(|&a, &b| self.hmm.components[a].mean[r.start].total_cmp(&self.hmm.components[b].mean[r.start]))
                    .unwrap()
            }
            None => self.hmm.k() - 1,
        }
    }

    /// Maps every frame's marginal to the world and fuses them
    /// componentwise.
    pub fn adapt(&self, frames: &BTreeMap<String, FrameInstance>, reg: Regularization) -> Result<HMMModel> {
        let layout = self.layout();
        let world = self.world_layout();
        let policies = world.policies();
        let mut marginals = Vec::with_capacity(self.selected_frames.len());
        for (f, id) in self.selected_frames.iter().enumerate() {
            let inst = frames.get(id).ok_or_else(|| Error::MissingFrame {
                demo: 0,
                frame: id.clone(),
            })?;
            let marg = self.hmm.marginalize(&layout.frame_factors(f))?;
            let mut m = marg.clone();
            for c in m.components.iter_mut() {
                *c = c.transform(&inst.rotation, &inst.origin, &policies, reg)?;
            }
            marginals.push(m);
        }
        product_models(&marginals)
    }

    /// Starts a regression over an adapted model.
    pub fn gmr<'m>(&self, adapted: &'m HMMModel) -> Result<GmrState<'m>> {
        GmrState::new(adapted, &self.world_layout().inputs())
    }
}

/// Input vector for a world-frame model: normalized time or the current
/// world pose.
pub fn driver_input(driver: Driver, t: f64, pose: &Pose) -> DVector<f64> {
    match driver {
        Driver::Time => DVector::from_element(1, t),
        _ => pose.to_dvector(),
    }
}
