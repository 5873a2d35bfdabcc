use std::path::Path;

use ravar::harness::eval::{evaluate, report_from_records};
use ravar::harness::fixtures::{generate_fixtures, generate_samples, FixtureConfig};
use ravar::harness::train::train;
use ravar::harness::{Dataset, TrainConfig};
use ravar::metrics::EvalRecord;
use ravar::{Error, Model, ModelConfig};

fn fixture(dir: &Path, num_samples: usize, seed: u64) -> Dataset {
    generate_fixtures(
        &FixtureConfig {
            num_samples,
            seed,
            ..FixtureConfig::default()
        },
        dir,
    )
    .unwrap();
    Dataset::open(dir).unwrap()
}

#[test]
fn zero_steps_return_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 3, 1);
    let cfg = TrainConfig {
        steps: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let model = Model::new(cfg.model.clone()).unwrap();
    let run = train(&model, &cfg, &data.prepare(&model).unwrap(), |_| {}).unwrap();
    assert!(run.history.is_empty());
    let init = model.init_params(4).unwrap();
    let trained = run.checkpoint.param_store().unwrap();
    assert!(init.iter().eq(trained.iter()));
}

#[test]
fn learnability_run_cuts_the_loss_by_ninety_percent() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 32, 7);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/learnability.toml");
    let cfg = TrainConfig::load(&path).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let run = train(&model, &cfg, &data.prepare(&model).unwrap(), |_| {}).unwrap();
    let mean = |s: &[ravar::harness::StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let early = mean(&run.history[..10]);
    let late = mean(&run.history[run.history.len() - 10..]);
    assert!(late <= 0.1 * early, "loss {early} -> {late}");
}

#[test]
fn untrained_model_ranks_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 64, 11);
    let mut total = 0.0;
    for seed in [1, 2, 3] {
        let model = Model::new(ModelConfig::default()).unwrap();
        let params = model.init_params(seed).unwrap();
        total += evaluate(&model, &params, &data.prepare(&model).unwrap(), 1).unwrap().metrics.auroc;
    }
    let mean = total / 3.0;
    assert!((mean - 0.5).abs() <= 0.1, "AUROC {mean}");
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let samples = generate_samples(&FixtureConfig {
        num_samples: 12,
        ..FixtureConfig::default()
    })
    .unwrap();
    let records = samples
        .iter()
        .map(|s| {
            let labels: Vec<bool> = (0..10).map(|c| s.record.action_labels.contains(&c)).collect();
            EvalRecord {
                sample_id: s.record.video_id.clone(),
                gt_bbox: s.record.gt_bbox,
                pred_bbox: s.record.gt_bbox,
                pred_scores: labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
                gt_labels: labels,
            }
        })
        .collect();
    let m = report_from_records(records).unwrap().metrics;
    assert_eq!((m.miou, m.map), (1.0, 1.0));
}

#[test]
fn empty_evaluation_is_a_metric_error() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let params = model.init_params(0).unwrap();
    assert!(matches!(evaluate(&model, &params, &[], 1), Err(Error::Metric(_))));
}

#[test]
fn empty_fixture_set_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 0, 1);
    assert!(data.is_empty());
    assert_eq!(std::fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap(), "");
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 2, 1);
    let model = Model::new(ModelConfig {
        dim: 16,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(matches!(data.prepare(&model), Err(Error::Config(_))));
}
