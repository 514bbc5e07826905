//! Per-skill frame selection from the relative precision of single-frame
//! models.

use log::warn;
use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::actions::{Driver, Layout, Role};
use crate::demo::DemonstrationSet;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gaussian::{floor_eigenvalues, DEFAULT_EPS};
use crate::mixture::{init_time_binned, softmax};
use crate::segmentation::resample;
use crate::tpgmm::project_demos;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub skill: usize,
    pub candidates: Vec<String>,
    /// Relevance ω(f) per candidate.
    pub omega: Vec<f64>,
    /// Per-component relative precisions, `shares[k][c]`.
    pub shares: Vec<Vec<f64>>,
    pub selected: Vec<String>,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionConfig {
    pub k: usize,
    /// Threshold on ω; `None` means `2 / C`.
    pub tau: Option<f64>,
    pub eps: f64,
    pub exec: Execution,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tau: None,
            eps: DEFAULT_EPS,
            exec: Execution::default(),
        }
    }
}

pub fn default_tau(candidates: usize) -> f64 {
    2.0 / candidates as f64
}

/// Log-determinants of the pose block of each time-binned component of a
/// single-frame model.
fn pose_log_dets(set: &DemonstrationSet, candidate: &str, k: usize, eps: f64) -> Result<Vec<f64>> {
    let layout = Layout::new(1, Driver::Time)?;
    let data = project_demos(set, &[candidate.to_string()], Driver::Time)?;
    let hmm = init_time_binned(&layout.manifold, &data, k, eps)?;
    let idx = layout.manifold.tangent_indices(&[
        layout.index_of(Role::Position(0)).unwrap(),
        layout.index_of(Role::Orientation(0)).unwrap(),
    ]);
    hmm.components
        .iter()
        .map(|c| {
            let block: DMatrix<f64> = c.cov.select_rows(&idx).select_columns(&idx);
            let block = floor_eigenvalues(&block, eps);
            let chol = Cholesky::new(block).ok_or_else(|| Error::Numerical("pose block is not positive definite".into()))?;
            Ok(chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
        })
        .collect()
}

/// Scores every candidate frame for one (segmented, aligned) skill.
pub fn score_candidates(
    skill: usize,
    set: &DemonstrationSet,
    candidates: &[String],
    cfg: &SelectionConfig,
) -> Result<RelevanceReport> {
    if candidates.is_empty() {
        return Err(Error::arg("no candidate frames to score"));
    }
    let mut candidates = candidates.to_vec();
    candidates.sort();
    candidates.dedup();
    let log_dets: Vec<Vec<f64>> = exec::try_map_slice(cfg.exec, &candidates, |c| pose_log_dets(set, c, cfg.k, cfg.eps))?;
    let k = log_dets[0].len();
    let shares: Vec<Vec<f64>> = (0..k)
        .map(|comp| {
            // det(Σ)⁻¹ shares in the log domain: softmax of −log det
            let neg: Vec<f64> = log_dets.iter().map(|ld| -ld[comp]).collect();
            softmax(&neg).iter().copied().collect()
        })
        .collect();
    let omega: Vec<f64> = (0..candidates.len())
        .map(|c| shares.iter().map(|row| row[c]).fold(0.0, f64::max))
        .collect();
    let tau = cfg.tau.unwrap_or_else(|| default_tau(candidates.len()));
    let mut report = RelevanceReport {
        skill,
        candidates,
        omega,
        shares,
        selected: Vec::new(),
        tau,
    };
    report.selected = select(&report, tau);
    Ok(report)
}

/// Frames with ω above `tau`; falls back to the single best frame.
pub fn select(report: &RelevanceReport, tau: f64) -> Vec<String> {
    let chosen: Vec<String> = report
        .candidates
        .iter()
        .zip(&report.omega)
        .filter(|(_, &w)| w > tau)
        .map(|(c, _)| c.clone())
        .collect();
    if !chosen.is_empty() {
        return chosen;
    }
    let best = report
        .omega
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    warn!(
        "skill {}: no candidate exceeds tau = {tau:.3}; keeping '{}'",
        report.skill, report.candidates[best]
    );
    vec![report.candidates[best].clone()]
}

/// Scores candidates over whole (unsegmented) demonstrations, resampled to
/// their mean length; used for the global-selection ablation.
pub fn score_global(set: &DemonstrationSet, candidates: &[String], cfg: &SelectionConfig) -> Result<RelevanceReport> {
    let mean = set.demos.iter().map(|d| d.len()).sum::<usize>() as f64 / set.demos.len() as f64;
    let n = mean.round() as usize;
    let aligned = DemonstrationSet {
        dt: set.dt,
        demos: set.demos.iter().map(|d| resample(d, n)).collect(),
    };
    score_candidates(0, &aligned, candidates, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{Demonstration, FrameInstance, Pose};
    use crate::quat;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn demos(seed: u64) -> DemonstrationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demos = (0..5)
            .map(|_| {
                let obj = FrameInstance::new(quat::yaw(rng.random_range(-0.7..0.7)), Vector3::new(rng.random_range(0.3..0.6), rng.random_range(-0.3..0.3), 0.0)).unwrap();
                let clutter = FrameInstance::new(quat::yaw(rng.random_range(-3.0..3.0)), Vector3::new(rng.random_range(0.2..0.7), rng.random_range(-0.4..0.4), 0.0)).unwrap();
                let start = Pose::new(Vector3::new(0.3, 0.0, 0.4), [0.0, 1.0, 0.0, 0.0]);
                let goal = obj.to_world(&Pose::new(Vector3::new(0.0, 0.0, 0.05), [0.0, 1.0, 0.0, 0.0]));
                let n = 40;
                let poses = (0..n)
                    .map(|j| {
                        let s = j as f64 / (n - 1) as f64;
                        Pose::new(start.pos + (goal.pos - start.pos) * s, quat::slerp(&start.quat, &goal.quat, s))
                    })
                    .collect();
                let mut frames = BTreeMap::new();
                frames.insert("object".to_string(), obj);
                frames.insert("clutter".to_string(), clutter.clone());
                frames.insert("clutter_twin".to_string(), clutter);
                Demonstration {
                    time: (0..n).map(|j| j as f64 * 0.05).collect(),
                    poses,
                    gripper: vec![0.08; n],
                    frames,
                }
            })
            .collect();
        DemonstrationSet { dt: 0.05, demos }
    }

    #[test]
    fn single_candidate_has_full_relevance() {
        let set = demos(1);
        let r = score_candidates(0, &set, &["object".to_string()], &SelectionConfig::default()).unwrap();
        assert_eq!(r.omega, vec![1.0]);
    }

    #[test]
    fn identical_candidates_split_evenly() {
        let set = demos(2);
        let r = score_candidates(0, &set, &["clutter".to_string(), "clutter_twin".to_string()], &SelectionConfig::default()).unwrap();
        assert!((r.omega[0] - 0.5).abs() < 1e-12 && (r.omega[1] - 0.5).abs() < 1e-12);
        for row in &r.shares {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn consistent_frame_beats_clutter() {
        let set = demos(3);
        let r = score_candidates(0, &set, &["object".to_string(), "clutter".to_string()], &SelectionConfig::default()).unwrap();
        assert!(r.omega[1] > r.omega[0], "{r:?}");
        assert_eq!(r.candidates[1], "object");
    }

    #[test]
    fn fallback_picks_argmax() {
        let r = RelevanceReport {
            skill: 0,
            candidates: vec!["a".into(), "b".into()],
            omega: vec![0.3, 0.4],
            shares: vec![],
            selected: vec![],
            tau: 0.9,
        };
        assert_eq!(select(&r, 0.9), vec!["b".to_string()]);
    }
}
