//! `tapas`: synthesize demonstrations, segment them, select frames, fit
//! task models and evaluate them in the kinematic world.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};
use tapas_core::actions::Driver;
use tapas_core::cascade::{run_sequence, Freeze, PostProcessing, TaskModel, TraceStep};
use tapas_core::demo::DemonstrationSet;
use tapas_core::io;
use tapas_core::pipeline::{train, Variant};
use tapas_core::segmentation::{find_cuts, magnitudes, segment_and_align};
use tapas_core::selection::{score_candidates, SelectionConfig};
use tapas_core::synth::world::{run_episode, summarize, EpisodeResult};
use tapas_core::synth::{pick_and_place, pick_and_place_varied, EvalConfig, TaskPolicy, World};
use tapas_core::Execution;

use config::AppConfig;

#[derive(Parser, Debug)]
#[command(name = "tapas", version, about = "Task-parameterized skill learning from few demonstrations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (falls back to the config file, then TAPAS_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic demonstration dataset.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        demos: Option<usize>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Find skill boundaries; writes cuts.json and magnitudes.csv.
    Segment {
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        expected_skills: Option<usize>,
    },
    /// Score candidate frames per skill; writes relevance.json.
    Select {
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train a task model; writes task_model.json.
    Fit {
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Reproduce a demonstration's scene from its frames; writes a trace CSV.
    Predict {
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        demo: usize,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        rollout: RolloutArgs,
    },
    /// Run one episode in freshly sampled frames; writes traces.csv and summary.json.
    Rollout {
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[command(flatten)]
        rollout: RolloutArgs,
    },
    /// Evaluate over many episodes; writes traces.csv and summary.json.
    Eval {
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[command(flatten)]
        rollout: RolloutArgs,
    },
    /// Write plot-ready CSVs of a dataset and, optionally, a model.
    ExportPlots {
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        model: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum)]
    driver: Option<DriverArg>,
    /// Components per skill.
    #[arg(long)]
    k: Option<usize>,
    /// Relevance threshold (default 2 / number of candidates).
    #[arg(long)]
    tau: Option<f64>,
    /// Candidate frames (default: all frames shared by the demos).
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long, value_enum)]
    post: Option<PostArg>,
    /// Thresholding distance (m).
    #[arg(long)]
    delta: Option<f64>,
    /// Per-step translation limit (m).
    #[arg(long)]
    v_max: Option<f64>,
    /// Per-step rotation limit (rad).
    #[arg(long)]
    w_max: Option<f64>,
    /// Freeze the end effector from this step on.
    #[arg(long, requires = "freeze_steps")]
    freeze_start: Option<usize>,
    #[arg(long, requires = "freeze_start")]
    freeze_steps: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    PickAndPlace,
    PickAndPlaceVaried,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DriverArg {
    Time,
    State,
    StateNaive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Full,
    NoSegmentation,
    NoSelection,
    GlobalSelection,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PostArg {
    None,
    Clamp,
    Threshold,
}

const DEFAULT_DELTA: f64 = 0.01;
const DEFAULT_V_MAX: f64 = 0.02;
const DEFAULT_W_MAX: f64 = 0.1;

impl ModelArgs {
    fn apply(&self, cfg: &mut AppConfig) {
        if let Some(d) = self.driver {
            cfg.pipeline.driver = match d {
                DriverArg::Time => Driver::Time,
                DriverArg::State => Driver::State,
                DriverArg::StateNaive => Driver::StateNaive,
            };
        }
        if let Some(k) = self.k {
            cfg.pipeline.k = k;
        }
        if self.tau.is_some() {
            cfg.pipeline.tau = self.tau;
        }
        if self.candidates.is_some() {
            cfg.pipeline.candidates = self.candidates.clone();
        }
    }
}

impl RolloutArgs {
    fn apply(&self, cfg: &mut AppConfig) -> Result<()> {
        let (cur_delta, cur_v, cur_w) = match cfg.rollout.post {
            PostProcessing::None => (DEFAULT_DELTA, DEFAULT_V_MAX, DEFAULT_W_MAX),
            PostProcessing::Clamp { v_max, w_max } => (DEFAULT_DELTA, v_max, w_max),
            PostProcessing::Threshold { delta, v_max, w_max } => (delta, v_max, w_max),
        };
        let delta = self.delta.unwrap_or(cur_delta);
        let v_max = self.v_max.unwrap_or(cur_v);
        let w_max = self.w_max.unwrap_or(cur_w);
        if delta <= 0.0 || v_max <= 0.0 || w_max <= 0.0 {
            bail!("delta, v_max and w_max must be positive");
        }
        let mode = self.post.or(match cfg.rollout.post {
            PostProcessing::None => None,
            PostProcessing::Clamp { .. } => Some(PostArg::Clamp),
            PostProcessing::Threshold { .. } => Some(PostArg::Threshold),
        });
        cfg.rollout.post = match mode {
            None | Some(PostArg::None) => PostProcessing::None,
            Some(PostArg::Clamp) => PostProcessing::Clamp { v_max, w_max },
            Some(PostArg::Threshold) => PostProcessing::Threshold { delta, v_max, w_max },
        };
        if let (Some(start), Some(duration)) = (self.freeze_start, self.freeze_steps) {
            cfg.rollout.freeze = Some(Freeze { start, duration });
        }
        if self.max_steps.is_some() {
            cfg.rollout.max_steps = self.max_steps;
        }
        Ok(())
    }
}

fn apply_preset(cfg: &mut AppConfig, preset: Option<Preset>) {
    match preset {
        Some(Preset::PickAndPlace) => cfg.scenario = pick_and_place(),
        Some(Preset::PickAndPlaceVaried) => cfg.scenario = pick_and_place_varied(),
        None => {}
    }
}

fn exec(cfg: &AppConfig) -> Execution {
    if cfg.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn config_value(cfg: &AppConfig, command: &str) -> Result<Value> {
    let mut v = serde_json::to_value(cfg)?;
    v["command"] = json!(command);
    Ok(v)
}

fn load_data(path: &Path) -> Result<DemonstrationSet> {
    io::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<TaskModel> {
    io::load_task(path).with_context(|| format!("loading model {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

const TRACE_HEADER: [&str; 15] = [
    "episode", "step", "skill", "x", "y", "z", "qw", "qx", "qy", "qz", "gripper", "top_component", "top_weight", "reset", "frozen",
];

fn trace_rows(episode: usize, trace: &[TraceStep], freeze: Option<Freeze>, rows: &mut Vec<Vec<String>>) {
    for s in trace {
        let mut r = vec![episode.to_string(), s.step.to_string(), s.skill.to_string()];
        r.extend(s.pose.to_array().iter().map(|&x| fmt(x)));
        r.push(fmt(s.gripper));
        r.push(s.top_component.to_string());
        r.push(fmt(s.top_weight));
        r.push(s.reset.to_string());
        r.push(freeze.is_some_and(|f| f.active(s.step)).to_string());
        rows.push(r);
    }
}

fn episode_json(r: &EpisodeResult) -> Value {
    json!({
        "episode": r.episode,
        "success": r.success,
        "status": r.status,
        "steps": r.steps,
        "final_error": if r.final_error.is_finite() { json!(r.final_error) } else { Value::Null },
        "grasped": r.grasped,
    })
}

fn policy(task: TaskModel, cfg: &AppConfig) -> TaskPolicy {
    let mut p = TaskPolicy::new(task);
    p.reg = cfg.regularization;
    p.cascade = tapas_core::cascade::CascadeConfig {
        exec: Execution::Sequential,
        ..cfg.cascade
    };
    p
}

fn evaluate_episodes(model: &Path, cfg: &AppConfig, episodes: &[usize], out_dir: &Path, command: &str) -> Result<Value> {
    let task = load_model(model)?;
    let policy = policy(task, cfg);
    let eval = EvalConfig {
        episodes: episodes.len(),
        seed: cfg.seed.unwrap_or(0),
        rollout: cfg.rollout,
        keep_traces: true,
        exec: exec(cfg),
    };
    cfg.scenario.validate()?;
    let results = tapas_core::exec::map_indices(eval.exec, episodes.len(), |i| {
        run_episode(&policy, &cfg.scenario, &eval, episodes[i])
    });
    let mut rows = Vec::new();
    for r in &results {
        trace_rows(r.episode, r.trace.as_deref().unwrap_or(&[]), cfg.rollout.freeze, &mut rows);
    }
    let summary = summarize(results);
    create_dir(out_dir)?;
    io::write_csv(&out_dir.join("traces.csv"), &TRACE_HEADER, &rows)?;
    let doc = json!({
        "config": config_value(cfg, command)?,
        "episodes": summary.episodes,
        "successes": summary.successes,
        "success_rate": summary.success_rate,
        "mean_length": summary.mean_length,
        "std_length": summary.std_length,
        "timeouts": summary.timeouts,
        "numerical_failures": summary.numerical_failures,
        "results": summary.results.iter().map(episode_json).collect::<Vec<_>>(),
    });
    io::write_json(&out_dir.join("summary.json"), &doc)?;
    Ok(doc)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = AppConfig::load(cli.common.config.as_deref())?;
    let seed = cfg.resolve_seed(cli.common.seed)?;
    cfg.sequential |= cli.common.sequential;
    cfg.pipeline.exec = exec(&cfg);
    cfg.cascade.seed = seed;

    match cli.command {
        Command::Synth { out, demos, preset } => {
            apply_preset(&mut cfg, preset);
            if let Some(n) = demos {
                cfg.scenario.demos = n;
            }
            cfg.scenario.seed = seed;
            cfg.validate()?;
            let (set, _) = cfg.scenario.generate()?;
            let mut doc = io::dataset_to_json(&set);
            doc["config"] = config_value(&cfg, "synth")?;
            io::write_json(&out, &doc)?;
            info!("wrote {} demos to {}", set.demos.len(), out.display());
        }
        Command::Segment { data, out_dir, expected_skills } => {
            if expected_skills.is_some() {
                cfg.pipeline.segmentation.expected_skills = expected_skills;
            }
            let set = load_data(&data)?;
            let seg = &cfg.pipeline.segmentation;
            let (result, _) = segment_and_align(&set, seg, exec(&cfg))?;
            let mut rows = Vec::new();
            for (d, demo) in set.demos.iter().enumerate() {
                let cuts = find_cuts(demo, seg);
                for (t, (l, a)) in magnitudes(demo).into_iter().enumerate() {
                    rows.push(vec![
                        d.to_string(),
                        t.to_string(),
                        fmt(l),
                        fmt(a),
                        fmt(l + seg.ang_weight * a),
                        cuts.contains(&t).to_string(),
                    ]);
                }
            }
            create_dir(&out_dir)?;
            io::write_csv(
                &out_dir.join("magnitudes.csv"),
                &["demo", "step", "lin_mag", "ang_mag", "combined", "cut"],
                &rows,
            )?;
            let doc = json!({
                "config": config_value(&cfg, "segment")?,
                "cuts": result.cuts,
                "skill_count": result.skill_count,
                "durations": result.durations,
            });
            io::write_json(&out_dir.join("cuts.json"), &doc)?;
        }
        Command::Select { data, out, model } => {
            model.apply(&mut cfg);
            cfg.validate()?;
            let set = load_data(&data)?;
            let candidates = cfg.pipeline.candidates.clone().unwrap_or_else(|| set.common_frames());
            let (_, skills) = segment_and_align(&set, &cfg.pipeline.segmentation, exec(&cfg))?;
            let sel = SelectionConfig {
                k: cfg.pipeline.k,
                tau: cfg.pipeline.tau,
                eps: cfg.pipeline.eps,
                exec: exec(&cfg),
            };
            let reports = skills
                .iter()
                .enumerate()
                .map(|(s, skill)| score_candidates(s, skill, &candidates, &sel))
                .collect::<tapas_core::Result<Vec<_>>>()?;
            let doc = json!({"config": config_value(&cfg, "select")?, "skills": reports});
            io::write_json(&out, &doc)?;
        }
        Command::Fit { data, out, model, variant } => {
            model.apply(&mut cfg);
            if let Some(v) = variant {
                cfg.pipeline.variant = match v {
                    VariantArg::Full => Variant::Full,
                    VariantArg::NoSegmentation => Variant::NoSegmentation,
                    VariantArg::NoSelection => Variant::NoSelection,
                    VariantArg::GlobalSelection => Variant::GlobalSelection,
                };
            }
            cfg.validate()?;
            let set = load_data(&data)?;
            let trained = train(&set, &cfg.pipeline)?;
            let mut doc = io::task_to_json(&trained.task, &config_value(&cfg, "fit")?);
            doc["relevance"] = serde_json::to_value(&trained.relevance)?;
            doc["segmentation"] = serde_json::to_value(&trained.segmentation)?;
            doc["em"] = json!(trained
                .em
                .iter()
                .map(|r| json!({"iterations": r.iterations, "converged": r.converged, "log_likelihood": r.log_likelihoods.last(), "pruned": r.pruned}))
                .collect::<Vec<_>>());
            io::write_json(&out, &doc)?;
            for (s, skill) in trained.task.skills.iter().enumerate() {
                info!("skill {s}: frames {:?}", skill.selected_frames);
            }
        }
        Command::Predict { model, data, demo, out, rollout } => {
            rollout.apply(&mut cfg)?;
            let task = load_model(&model)?;
            let set = load_data(&data)?;
            let Some(d) = set.demos.get(demo) else {
                bail!("dataset has {} demos, no demo {demo}", set.demos.len());
            };
            let adapted = task.adapt(&d.frames, cfg.regularization, &cfg.cascade)?;
            let object = cfg
                .scenario
                .carry
                .as_ref()
                .and_then(|c| d.frames.get(&c.object_frame))
                .map_or(nalgebra::Vector3::repeat(f64::NAN), |f| f.origin);
            let mut world = World::new(d.poses[0], object);
            let r = run_sequence(&task, &adapted, &cfg.rollout, &mut world);
            let mut rows = Vec::new();
            trace_rows(demo, &r.trace, cfg.rollout.freeze, &mut rows);
            io::write_csv(&out, &TRACE_HEADER, &rows)?;
            info!("{:?} after {} steps", r.status, r.trace.len());
        }
        Command::Rollout { model, episode, out_dir, preset, rollout } => {
            apply_preset(&mut cfg, preset);
            rollout.apply(&mut cfg)?;
            let doc = evaluate_episodes(&model, &cfg, &[episode], &out_dir, "rollout")?;
            println!("success_rate {}", doc["success_rate"]);
        }
        Command::Eval { model, episodes, out_dir, preset, rollout } => {
            apply_preset(&mut cfg, preset);
            rollout.apply(&mut cfg)?;
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            cfg.validate()?;
            let ids: Vec<usize> = (0..cfg.episodes).collect();
            let doc = evaluate_episodes(&model, &cfg, &ids, &out_dir, "eval")?;
            println!("success_rate {}", doc["success_rate"]);
        }
        Command::ExportPlots { data, model, out_dir } => {
            let set = load_data(&data)?;
            create_dir(&out_dir)?;
            let mut rows = Vec::new();
            for (d, demo) in set.demos.iter().enumerate() {
                for (t, ((pose, g), (l, a))) in demo.poses.iter().zip(&demo.gripper).zip(magnitudes(demo)).enumerate() {
                    let mut r = vec![d.to_string(), t.to_string(), fmt(demo.time[t])];
                    r.extend(pose.to_array().iter().map(|&x| fmt(x)));
                    r.extend([fmt(*g), fmt(l), fmt(a)]);
                    rows.push(r);
                }
            }
            io::write_csv(
                &out_dir.join("demos.csv"),
                &["demo", "step", "time", "x", "y", "z", "qw", "qx", "qy", "qz", "gripper", "lin_mag", "ang_mag"],
                &rows,
            )?;
            if let Some(model) = model {
                let task = load_model(&model)?;
                let mut rows = Vec::new();
                for (s, skill) in task.skills.iter().enumerate() {
                    let layout = skill.layout();
                    for (k, c) in skill.hmm.components.iter().enumerate() {
                        for (f, frame) in skill.selected_frames.iter().enumerate() {
                            let Some(i) = layout.index_of(tapas_core::actions::Role::Position(f)) else {
                                continue;
                            };
                            let p = &c.mean.as_slice()[layout.manifold.ambient_range(i)];
                            rows.push(vec![
                                s.to_string(),
                                k.to_string(),
                                frame.clone(),
                                fmt(skill.hmm.priors[k]),
                                fmt(p[0]),
                                fmt(p[1]),
                                fmt(p[2]),
                            ]);
                        }
                    }
                }
                io::write_csv(
                    &out_dir.join("components.csv"),
                    &["skill", "component", "frame", "prior", "x", "y", "z"],
                    &rows,
                )?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
