//! Skill segmentation at near-zero-velocity pauses and temporal alignment
//! of the resulting segments.

use serde::{Deserialize, Serialize};

use crate::actions::factorize_sequence;
use crate::demo::{Demonstration, DemonstrationSet, Pose};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::quat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Combined magnitude threshold (m per step).
    pub vel_threshold: f64,
    pub min_pause_len: usize,
    pub boundary_margin: usize,
    pub expected_skills: Option<usize>,
    /// Weight of the angular magnitude (m/rad) in the combined magnitude.
    pub ang_weight: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            vel_threshold: 1e-3,
            min_pause_len: 5,
            boundary_margin: 10,
            expected_skills: None,
            ang_weight: 0.1,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vel_threshold > 0.0) || self.min_pause_len == 0 || self.ang_weight < 0.0 {
            return Err(Error::arg("segmentation thresholds must be positive"));
        }
        if self.expected_skills == Some(0) {
            return Err(Error::arg("expected_skills must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub cuts: Vec<Vec<usize>>,
    pub skill_count: usize,
    /// Resampled length of each skill (rounded mean segment length).
    pub durations: Vec<usize>,
}

/// Per-step linear and angular magnitudes (forward differences).
pub fn magnitudes(demo: &Demonstration) -> Vec<(f64, f64)> {
    factorize_sequence(&demo.poses).iter().map(|f| (f.lin_mag, f.ang_mag)).collect()
}

/// Pause centers of one demonstration.
pub fn find_cuts(demo: &Demonstration, cfg: &SegmentationConfig) -> Vec<usize> {
    let len = demo.len();
    let combined: Vec<f64> = magnitudes(demo).iter().map(|(l, a)| l + cfg.ang_weight * a).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (t, &m) in combined.iter().enumerate() {
        match (m < cfg.vel_threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, len - 1));
    }
    let mut kept: Vec<(usize, usize)> = runs
        .into_iter()
        .filter(|&(s, e)| {
            e + 1 - s >= cfg.min_pause_len && s >= cfg.boundary_margin && e + cfg.boundary_margin < len
        })
        .collect();
    if let Some(k) = cfg.expected_skills {
        let want = k - 1;
        if kept.len() > want {
            let mut order: Vec<usize> = (0..kept.len()).collect();
            // stable sort keeps earlier runs first among equal lengths
            order.sort_by_key(|&i| std::cmp::Reverse(kept[i].1 - kept[i].0));
            let mut chosen: Vec<usize> = order.into_iter().take(want).collect();
            chosen.sort_unstable();
            kept = chosen.into_iter().map(|i| kept[i]).collect();
        }
    }
    kept.iter().map(|&(s, e)| (s + e) / 2).collect()
}

/// Resamples a segment to `n` samples with lerp (positions, gripper, time)
/// and slerp (orientations). Endpoints are preserved exactly.
pub fn resample(demo: &Demonstration, n: usize) -> Demonstration {
    let len = demo.len();
    let mut out = Demonstration {
        time: Vec::with_capacity(n),
        poses: Vec::with_capacity(n),
        gripper: Vec::with_capacity(n),
        frames: demo.frames.clone(),
    };
    for i in 0..n {
        let u = if n == 1 { 0.0 } else { i as f64 * (len - 1) as f64 / (n - 1) as f64 };
        let (lo, a) = if i + 1 == n {
            (len - 1, 0.0)
        } else {
            let lo = (u.floor() as usize).min(len - 1);
            (lo, u - lo as f64)
        };
        let hi = (lo + 1).min(len - 1);
        let lerp = |x: f64, y: f64| if a == 0.0 { x } else { x + a * (y - x) };
        out.time.push(lerp(demo.time[lo], demo.time[hi]));
        out.gripper.push(lerp(demo.gripper[lo], demo.gripper[hi]));
        let (p, q) = (&demo.poses[lo], &demo.poses[hi]);
        out.poses.push(if a == 0.0 {
            *p
        } else {
            Pose::new(p.pos + (q.pos - p.pos) * a, quat::slerp(&p.quat, &q.quat, a))
        });
    }
    out
}

/// Splits every demonstration at its cuts and resamples skill `s` of every
/// demo to the rounded mean length of that skill.
pub fn segment_and_align(
    set: &DemonstrationSet,
    cfg: &SegmentationConfig,
    exec: Execution,
) -> Result<(SegmentationResult, Vec<DemonstrationSet>)> {
    cfg.validate()?;
    set.validate()?;
    if let Some(d) = set.demos.iter().position(|d| d.len() <= 2 * cfg.boundary_margin) {
        return Err(Error::arg(format!(
            "demonstration {d} is too short for a boundary margin of {}",
            cfg.boundary_margin
        )));
    }
    let cuts = exec::map_slice(exec, &set.demos, |d| find_cuts(d, cfg));
    let counts: Vec<usize> = cuts.iter().map(|c| c.len()).collect();
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::InconsistentSegmentation { counts });
    }
    let skill_count = counts[0] + 1;
    let bounds: Vec<Vec<(usize, usize)>> = set
        .demos
        .iter()
        .zip(&cuts)
        .map(|(d, c)| {
            let mut pts = vec![0];
            pts.extend(c);
            pts.push(d.len() - 1);
            pts.windows(2).map(|w| (w[0], w[1])).collect()
        })
        .collect();
    let durations: Vec<usize> = (0..skill_count)
        .map(|s| {
            let total: usize = bounds.iter().map(|b| b[s].1 - b[s].0 + 1).sum();
            ((total as f64 / set.demos.len() as f64).round() as usize).max(2)
        })
        .collect();
    let skills = (0..skill_count)
        .map(|s| DemonstrationSet {
            dt: set.dt,
            demos: set
                .demos
                .iter()
                .zip(&bounds)
                .map(|(d, b)| resample(&d.slice(b[s].0..b[s].1 + 1), durations[s]))
                .collect(),
        })
        .collect();
    Ok((
        SegmentationResult {
            cuts,
            skill_count,
            durations,
        },
        skills,
    ))
}
