//! End-to-end training: segmentation, per-skill frame selection and
//! per-skill model fitting, plus the ablated variants.

use log::info;
use serde::{Deserialize, Serialize};

use crate::actions::Driver;
use crate::cascade::TaskModel;
use crate::demo::DemonstrationSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gaussian::DEFAULT_EPS;
use crate::mixture::{EmConfig, EmReport};
use crate::segmentation::{resample, segment_and_align, SegmentationConfig, SegmentationResult};
use crate::selection::{score_candidates, score_global, RelevanceReport, SelectionConfig};
use crate::tpgmm::{fit, FitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// One model over whole demonstrations, aligned by global resampling.
    NoSegmentation,
    /// Every candidate frame is kept for every skill.
    NoSelection,
    /// One frame selection over whole demonstrations shared by all skills.
    GlobalSelection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub driver: Driver,
    /// Components per skill.
    pub k: usize,
    /// Components of the unsegmented model; `None` scales `k` by the
    /// number of skills found by segmentation.
    pub k_unsegmented: Option<usize>,
    pub tau: Option<f64>,
    pub segmentation: SegmentationConfig,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub eps: f64,
    /// Candidate frames; `None` uses the frames common to every demo.
    pub candidates: Option<Vec<String>>,
    pub variant: Variant,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            driver: Driver::Time,
            k: 5,
            k_unsegmented: None,
            tau: None,
            segmentation: SegmentationConfig::default(),
            em_max_iter: em.max_iter,
            em_tol: em.tol,
            eps: DEFAULT_EPS,
            candidates: None,
            variant: Variant::Full,
            exec: Execution::default(),
        }
    }
}

impl PipelineConfig {
    fn fit_config(&self, k: usize) -> FitConfig {
        FitConfig {
            k,
            em: EmConfig {
                max_iter: self.em_max_iter,
                tol: self.em_tol,
                eps: self.eps,
                exec: self.exec,
                ..EmConfig::default()
            },
            init_eps: self.eps,
        }
    }

    fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            k: self.k,
            tau: self.tau,
            eps: self.eps,
            exec: self.exec,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedTask {
    pub task: TaskModel,
    pub segmentation: Option<SegmentationResult>,
    pub relevance: Vec<RelevanceReport>,
    pub em: Vec<EmReport>,
}

/// Trains a task model from raw demonstrations.
pub fn train(set: &DemonstrationSet, cfg: &PipelineConfig) -> Result<TrainedTask> {
    set.validate()?;
    let candidates = match &cfg.candidates {
        Some(c) => c.clone(),
        None => set.common_frames(),
    };
    if candidates.is_empty() {
        return Err(Error::arg("no candidate frames are shared by all demonstrations"));
    }
    let (segmentation, skills) = segment_and_align(set, &cfg.segmentation, cfg.exec)?;
    let sel = cfg.selection_config();
    let mut relevance = Vec::new();
    let mut models = Vec::new();
    let mut em = Vec::new();
    match cfg.variant {
        Variant::NoSegmentation => {
            let n = (set.demos.iter().map(|d| d.len()).sum::<usize>() as f64 / set.demos.len() as f64).round() as usize;
            let aligned = DemonstrationSet {
                dt: set.dt,
                demos: set.demos.iter().map(|d| resample(d, n)).collect(),
            };
            let report = score_candidates(0, &aligned, &candidates, &sel)?;
            let k = cfg.k_unsegmented.unwrap_or(cfg.k * segmentation.skill_count);
            let (m, r) = fit(&aligned, &report.selected, cfg.driver, &cfg.fit_config(k))?;
            relevance.push(report);
            models.push(m);
            em.push(r);
            return Ok(TrainedTask {
                task: TaskModel::new(models)?,
                segmentation: None,
                relevance,
                em,
            });
        }
        Variant::GlobalSelection => {
            let report = score_global(set, &candidates, &sel)?;
            for skill in &skills {
                let (m, r) = fit(skill, &report.selected, cfg.driver, &cfg.fit_config(cfg.k))?;
                models.push(m);
                em.push(r);
            }
            relevance.push(report);
        }
        Variant::Full | Variant::NoSelection => {
            for (s, skill) in skills.iter().enumerate() {
                let report = score_candidates(s, skill, &candidates, &sel)?;
                let frames = if cfg.variant == Variant::Full { report.selected.clone() } else { report.candidates.clone() };
                info!("skill {s}: frames {frames:?}");
                let (m, r) = fit(skill, &frames, cfg.driver, &cfg.fit_config(cfg.k))?;
                relevance.push(report);
                models.push(m);
                em.push(r);
            }
        }
    }
    Ok(TrainedTask {
        task: TaskModel::new(models)?,
        segmentation: Some(segmentation),
        relevance,
        em,
    })
}
