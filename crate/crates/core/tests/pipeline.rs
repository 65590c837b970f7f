//! End-to-end: synthetic corpus, one short training run, artifacts on disk.

use csds::data::SynthConfig;
use csds::harness::{load_fold_data, read_metrics, RunConfig};
use csds::segnet::{forward_eval, load_checkpoint, SegNetConfig};
use csds::trainer::{fit, RunManifest};
use csds::Tensor;

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run_id = "pipeline".into();
    cfg.model = SegNetConfig { base_width: 4, depth: 2, ..Default::default() };
    cfg.data.count = 20;
    cfg.data.synth = SynthConfig { size: 16, ..Default::default() };
    cfg.augment.elastic_alpha = 2.0;
    cfg.augment.elastic_sigma = 4.0;
    cfg.train.schedule.epochs = 2;
    cfg.train.schedule.batch_size = 2;
    cfg
}

#[test]
fn config_survives_a_toml_roundtrip() {
    let cfg = small_run();
    let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn training_writes_consistent_artifacts() {
    let cfg = small_run();
    let dir = tempfile::tempdir().unwrap();
    let (fold, _) = load_fold_data(&cfg).unwrap();
    let res = fit(&cfg, &fold, Some(dir.path())).unwrap();

    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows, res.rows);
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.dice) && r.jaccard <= r.dice + 1e-9));
    let tests: Vec<_> = rows.iter().filter(|r| r.split == "test").collect();
    assert_eq!(tests.len(), 2);

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.optimizer_steps, 2 * manifest.ema_updates);

    let best = load_checkpoint(&dir.path().join("best_student.ckpt")).unwrap();
    assert_eq!(best, res.best_state);
    let teacher = load_checkpoint(&dir.path().join("teacher.ckpt")).unwrap();
    assert_eq!(teacher, res.networks.teacher);
    let x = Tensor::stack(&fold.test.iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap();
    assert_eq!(forward_eval(&best, &x).unwrap(), forward_eval(&res.best_state, &x).unwrap());
}
