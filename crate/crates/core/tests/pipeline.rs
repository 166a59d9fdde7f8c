use std::sync::Arc;
use std::time::Duration;

use intenttune_core::dataset::{ProcessedDataset, BASE_FOLDER};
use intenttune_core::fixtures::{self, build_portrait_dataset, portrait_fixture};
use intenttune_core::imaging;
use intenttune_core::metrics::{MetricLog, MetricRecord};
use intenttune_core::mock::HashScorer;
use intenttune_core::orchestrator::{
    ConfigOverrides, MockTrainer, Orchestrator, OrchestratorError, RunStatus, StreamEvent, TrainingConfig,
};
use intenttune_core::transformer::{recommend_prompts, RuleBackend};

fn build(root: &std::path::Path) -> ProcessedDataset {
    let fixture = portrait_fixture();
    let report = build_portrait_dataset(&fixture, root).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    report.dataset
}

#[test]
fn portrait_folders_match_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(dir.path());
    assert_eq!(ds.folders(), &portrait_fixture().expected_folders);
    for item in &ds.items {
        assert!(item.caption.text.starts_with("Vincent, "), "{}", item.caption.text);
    }
    let reopened = ProcessedDataset::open(dir.path()).unwrap();
    assert_eq!(reopened, ds);
}

#[test]
fn necklace_pixels_removed_from_base_images() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(dir.path());
    let necklace = fixtures::bbox(fixtures::NECKLACE).to_pixels(fixtures::SIDE, fixtures::SIDE);
    for item in ds.in_folder(BASE_FOLDER) {
        let img = ds.load_image(item).unwrap();
        let gold = img.pixels().filter(|p| p.0 == [224, 192, 32]).count();
        assert_eq!(gold, 0, "{}", item.record.relative_path);
        let original = fixtures::render(
            fixtures_index(&item.record.source_image_id),
        );
        for (x, y, p) in img.enumerate_pixels() {
            let outside = x + 8 < necklace.x
                || x > necklace.x + necklace.width + 8
                || y + 8 < necklace.y
                || y > necklace.y + necklace.height + 8;
            if outside {
                assert_eq!(p, original.get_pixel(x, y));
            }
        }
    }
}

fn fixtures_index(image_id: &str) -> usize {
    image_id.trim_start_matches("img-").parse::<usize>().unwrap() - 1
}

fn orchestrator(runs: &std::path::Path, delay: Duration) -> Orchestrator {
    Orchestrator::new(
        runs,
        Arc::new(MockTrainer::default().with_epoch_delay(delay)),
        Arc::new(HashScorer::default()),
    )
}

fn config(ds: &ProcessedDataset, epochs: u32) -> TrainingConfig {
    TrainingConfig::resolve(ds.spec(), &ConfigOverrides { epochs: Some(epochs), ..Default::default() }).unwrap()
}

#[test]
fn run_records_metrics_per_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(&dir.path().join("data"));
    let plan = recommend_prompts(ds.spec(), &RuleBackend).unwrap();
    let orch = orchestrator(&dir.path().join("runs"), Duration::ZERO);
    let cfg = config(&ds, 3);
    orch.start_run("run-1", ds, cfg, plan).unwrap();
    let state = orch.wait("run-1", Duration::from_secs(30)).unwrap();
    assert_eq!(state.status, RunStatus::Finished);
    assert_eq!(state.checkpoints.len(), 3);
    // face stability, three controllability metrics, overall stability
    assert_eq!(state.series.len(), 5);
    for series in state.series.values() {
        assert_eq!(series.points.len(), 3);
        assert!(series.points.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
    }
    let run_dir = orch.run_dir("run-1").unwrap();
    let log = MetricLog::new(run_dir.join("metrics/stability_face.jsonl"));
    let records: Vec<MetricRecord<f64>> = log.read().unwrap();
    assert_eq!(records.len(), 3);
    for c in &state.checkpoints {
        assert!(run_dir.join(c.cover_image.as_ref().unwrap()).exists());
        assert_eq!(c.intent_scores.len(), 5);
    }
    // samples drift toward the training data
    let overall = &state.series["stability:Vincent"].points;
    assert!(overall.last().unwrap().1 >= overall[0].1);

    let (events, done) = orch.events_since("run-1", 0, Duration::ZERO).unwrap();
    assert!(done);
    assert_eq!(events.iter().filter(|e| matches!(e.event, StreamEvent::Checkpoint { .. })).count(), 3);
    assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));

    let first = state.checkpoints[0].checkpoint_id.clone();
    let eval = orch.evaluate_checkpoint(&first, Some("Vincent, face"), None, Some(2)).unwrap();
    assert_eq!(eval.batches.len(), 1);
    assert_eq!(eval.batches[0].images.len(), 2);
    assert_eq!(eval.scores.len() + eval.failures.len(), 5);
    assert!(eval.scores.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(matches!(
        orch.evaluate_checkpoint("nope", None, None, None),
        Err(OrchestratorError::UnknownCheckpoint(_))
    ));
    assert!(matches!(orch.stop_run("run-1"), Err(OrchestratorError::InvalidState { .. })));

    let reopened = Orchestrator::open(
        dir.path().join("runs"),
        Arc::new(MockTrainer::default()),
        Arc::new(HashScorer::default()),
    )
    .unwrap();
    assert_eq!(reopened.run_status("run-1").unwrap().checkpoints, state.checkpoints);
    assert!(reopened.evaluate_checkpoint(&first, None, None, None).unwrap().failures.is_empty());
}

#[test]
fn stop_keeps_recorded_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(&dir.path().join("data"));
    let plan = recommend_prompts(ds.spec(), &RuleBackend).unwrap();
    let orch = orchestrator(&dir.path().join("runs"), Duration::from_millis(150));
    let cfg = config(&ds, 50);
    orch.start_run("run-s", ds.clone(), cfg.clone(), plan.clone()).unwrap();
    assert!(matches!(orch.start_run("run-s", ds, cfg, plan), Err(OrchestratorError::AlreadyStarted(_))));
    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    while orch.run_status("run-s").unwrap().checkpoints.len() < 2 {
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(20));
    }
    let stopped = orch.stop_run("run-s").unwrap();
    assert_eq!(stopped.status, RunStatus::Stopped);
    let kept = stopped.checkpoints.len();
    let after = orch.wait("run-s", Duration::from_secs(10)).unwrap();
    assert_eq!(after.status, RunStatus::Stopped);
    assert!(after.checkpoints.len() >= kept && after.checkpoints.len() < 50);
    std::thread::sleep(Duration::from_millis(400));
    assert_eq!(orch.run_status("run-s").unwrap().checkpoints.len(), after.checkpoints.len());
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let ds = build(&dir.path().join(format!("data{k}")));
        let plan = recommend_prompts(ds.spec(), &RuleBackend).unwrap();
        let orch = orchestrator(&dir.path().join(format!("runs{k}")), Duration::ZERO);
        let cfg = config(&ds, 2);
        orch.start_run("r", ds, cfg, plan).unwrap();
        let state = orch.wait("r", Duration::from_secs(30)).unwrap();
        let run_dir = orch.run_dir("r").unwrap();
        let cover = std::fs::read(run_dir.join(state.checkpoints[1].cover_image.as_ref().unwrap())).unwrap();
        outputs.push((state.series, imaging::sha256_hex(&cover)));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = build(&dir.path().join("data"));
    ds.items.clear();
    let plan = recommend_prompts(ds.spec(), &RuleBackend).unwrap();
    let orch = orchestrator(&dir.path().join("runs"), Duration::ZERO);
    let cfg = config(&ds, 1);
    assert!(matches!(orch.start_run("r", ds, cfg, plan), Err(OrchestratorError::DatasetEmpty)));
}
