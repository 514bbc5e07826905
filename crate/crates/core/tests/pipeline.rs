use tapas_core::actions::Driver;
use tapas_core::io::{load_task, task_to_json, write_json};
use tapas_core::pipeline::{train, PipelineConfig, Variant};
use tapas_core::synth::{evaluate, pick_and_place, EvalConfig, TaskPolicy};
use tapas_core::Execution;

#[test]
fn trained_task_places_the_object() {
    let spec = pick_and_place();
    let (set, truth) = spec.generate().unwrap();
    let trained = train(&set, &PipelineConfig::default()).unwrap();
    let seg = trained.segmentation.as_ref().unwrap();
    assert_eq!(seg.skill_count, truth[0].durations.len());
    assert_eq!(trained.task.skills.len(), 4);
    for (skill, want) in trained.task.skills.iter().zip(["object", "object", "goal", "goal"]) {
        assert!(skill.selected_frames.iter().any(|f| f == want));
        assert!(skill.selected_frames.iter().all(|f| !f.starts_with("clutter")));
    }
    let summary = evaluate(&TaskPolicy::new(trained.task), &spec, &EvalConfig { episodes: 10, ..Default::default() });
    assert!(summary.success_rate >= 0.9, "{}", summary.success_rate);
}

#[test]
fn parallel_and_sequential_agree() {
    let spec = pick_and_place();
    let (set, _) = spec.generate().unwrap();
    let run = |exec| {
        let task = train(&set, &PipelineConfig { exec, ..Default::default() }).unwrap().task;
        let summary = evaluate(&TaskPolicy::new(task.clone()), &spec, &EvalConfig { episodes: 4, exec, ..Default::default() });
        (task, summary)
    };
    let (a, sa) = run(Execution::Parallel);
    let (b, sb) = run(Execution::Sequential);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn saved_model_rolls_out_identically() {
    let spec = pick_and_place();
    let (set, _) = spec.generate().unwrap();
    let task = train(&set, &PipelineConfig::default()).unwrap().task;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    write_json(&path, &task_to_json(&task, &serde_json::json!({}))).unwrap();
    let loaded = load_task(&path).unwrap();
    assert_eq!(loaded, task);
    let cfg = EvalConfig { episodes: 3, ..Default::default() };
    assert_eq!(evaluate(&TaskPolicy::new(task), &spec, &cfg), evaluate(&TaskPolicy::new(loaded), &spec, &cfg));
}

#[test]
fn ablation_variants_train() {
    let (set, _) = pick_and_place().generate().unwrap();
    for variant in [Variant::NoSegmentation, Variant::NoSelection, Variant::GlobalSelection] {
        let trained = train(&set, &PipelineConfig { variant, ..Default::default() }).unwrap();
        match variant {
            Variant::NoSegmentation => assert_eq!(trained.task.skills.len(), 1),
            Variant::NoSelection => assert!(trained.task.skills.iter().all(|s| s.selected_frames.len() == 5)),
            _ => assert_eq!(trained.task.skills.len(), 4),
        }
    }
}

#[test]
fn state_drivers_train() {
    let (set, _) = pick_and_place().generate().unwrap();
    for driver in [Driver::State, Driver::StateNaive] {
        let trained = train(&set, &PipelineConfig { driver, ..Default::default() }).unwrap();
        assert!(trained.task.skills.iter().all(|s| s.driver == driver));
    }
}
