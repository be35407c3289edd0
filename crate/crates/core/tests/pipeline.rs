mod common;

use std::path::Path;

use common::{quadrant_scene, write_scene, FAST_SECTIONS};
use earthmapper::pipeline::{
    load_dataset, run_experiment, run_experiment_with_seeds, run_trial, trial_seed, Dataset, ExtractorKind, PipelineConfig, UgmKind,
};
use earthmapper::{Error, Stage};

fn setup(dir: &Path, sections: &str) -> (PipelineConfig, Dataset) {
    let (cube, truth) = quadrant_scene(24, 8, 0.9, 3);
    let path = write_scene(dir, &cube, &truth, sections);
    let cfg = PipelineConfig::load(&path).unwrap();
    let data = load_dataset(&cfg.dataset).unwrap();
    (cfg, data)
}

#[test]
fn trial_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), FAST_SECTIONS);
    let seed = trial_seed(cfg.experiment.seed, 0);
    let a = run_trial(&cfg, &data, 0, seed).unwrap();
    let b = run_trial(&cfg, &data, 0, seed).unwrap();
    assert_eq!(a.report.variants, b.report.variants);
    assert_eq!(a.split, b.split);
    assert_eq!(a.probabilities, b.probabilities);
    assert_eq!(a.crf, b.crf);
    assert_eq!(
        a.report.variants.keys().collect::<Vec<_>>(),
        vec!["SS-MLP", "SS-MLP+CRF"]
    );
}

#[test]
fn crf_stage_does_not_touch_classifier_output() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = setup(dir.path(), FAST_SECTIONS);
    let seed = trial_seed(cfg.experiment.seed, 1);
    let with = run_trial(&cfg, &data, 1, seed).unwrap();
    cfg.ugm.kind = UgmKind::None;
    let without = run_trial(&cfg, &data, 1, seed).unwrap();
    assert_eq!(with.probabilities, without.probabilities);
    assert_eq!(with.base_labels, without.base_labels);
    assert_eq!(with.report.variants["SS-MLP"], without.report.variants["SS-MLP"]);
    assert!(without.crf.is_none());
    assert_eq!(without.report.variants.len(), 1);
}

#[test]
fn zero_pairwise_weight_reproduces_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = setup(dir.path(), FAST_SECTIONS);
    cfg.ugm.w1 = vec![0.0];
    let out = run_trial(&cfg, &data, 0, 5).unwrap();
    assert_eq!(out.crf.as_ref().unwrap().labels, out.base_labels);
    assert_eq!(out.report.variants["SS-MLP"], out.report.variants["SS-MLP+CRF"]);
}

#[test]
fn crf_improves_noisy_piecewise_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), FAST_SECTIONS);
    let mut gains = Vec::new();
    for t in 0..3 {
        let out = run_trial(&cfg, &data, t, trial_seed(cfg.experiment.seed, t)).unwrap();
        let v = &out.report.variants;
        gains.push(v["SS-MLP+CRF"].oa - v["SS-MLP"].oa);
    }
    assert!(gains.iter().all(|&g| g > 0.0), "OA gains {gains:?}");
}

#[test]
fn grid_models_run_in_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = setup(dir.path(), FAST_SECTIONS);
    for kind in [UgmKind::GridIcm, UgmKind::GridAlphaExpansion] {
        cfg.ugm.kind = kind;
        let out = run_trial(&cfg, &data, 0, 9).unwrap();
        let v = &out.report.variants;
        assert!(v["SS-MLP+CRF"].oa >= v["SS-MLP"].oa - 0.05, "{kind:?}: {v:?}");
    }
}

#[test]
fn cached_run_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = setup(dir.path(), FAST_SECTIONS);
    cfg.experiment.cache = true;
    let first = run_trial(&cfg, &data, 0, 21).unwrap();
    let cache = cfg.experiment.out.join("cache");
    let entries: Vec<_> = std::fs::read_dir(&cache).unwrap().collect();
    assert_eq!(entries.len(), 1);
    let trial_dir = entries[0].as_ref().unwrap().path();
    for f in ["features.emc", "mlp.emc", "proba.emc"] {
        assert!(trial_dir.join(f).is_file(), "{f} missing");
    }
    let resumed = run_trial(&cfg, &data, 0, 21).unwrap();
    assert_eq!(first.report.variants, resumed.report.variants);
    assert_eq!(first.probabilities, resumed.probabilities);

    // Losing the probability field alone still resumes from the cached model.
    std::fs::remove_file(trial_dir.join("proba.emc")).unwrap();
    let partial = run_trial(&cfg, &data, 0, 21).unwrap();
    assert_eq!(first.report.variants, partial.report.variants);
}

#[test]
fn experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), FAST_SECTIONS);
    let out = run_experiment(&cfg, &data, 3).unwrap();
    assert_eq!(out.trials.len(), 3);
    assert!(out.failures.is_empty());
    let root = &cfg.experiment.out;
    let trials = std::fs::read_to_string(root.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 3 * 2);
    assert!(trials.starts_with("trial,variant,seed,oa,aa,kappa,seconds"));
    let agg = std::fs::read_to_string(root.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
    let tt = std::fs::read_to_string(root.join("ttests.csv")).unwrap();
    assert_eq!(tt.lines().count(), 4);
    assert!(std::fs::read_to_string(root.join("summary.txt")).unwrap().contains("3 of 3 completed"));
}

#[test]
fn repeated_seed_gives_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path(), FAST_SECTIONS);
    let out = run_experiment_with_seeds(&cfg, &data, &[4, 4]).unwrap();
    for row in &out.summary {
        assert_eq!((row.oa.std, row.aa.std, row.kappa.std), (0.0, 0.0, 0.0));
    }
    assert!(run_experiment_with_seeds(&cfg, &data, &[4]).is_err());
}

#[test]
fn failing_trials_are_stage_tagged_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = setup(dir.path(), FAST_SECTIONS);
    // Each quadrant holds 121 labeled pixels.
    cfg.experiment.n_train = 200;
    match run_trial(&cfg, &data, 0, 1) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, Stage::Split),
        other => panic!("expected a split-stage error, got {other:?}"),
    }
    let err = run_experiment(&cfg, &data, 2).unwrap_err();
    assert!(err.to_string().starts_with("[score]"), "{err}");
}

#[test]
fn learned_extractors_run_in_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = setup(dir.path(), FAST_SECTIONS);
    cfg.ugm.kind = UgmKind::None;
    cfg.extractor.kind = ExtractorKind::Mica;
    cfg.extractor.num_filters = 6;
    cfg.extractor.receptive_field = 3;
    cfg.extractor.spectral_components = 4;
    cfg.extractor.n_patches = 400;
    let mica = run_trial(&cfg, &data, 0, 2).unwrap();
    assert!(mica.report.variants.contains_key("MICA+SS-MLP"));
    assert_eq!(mica.model.spec.input_dim, 6);

    cfg.extractor.kind = ExtractorKind::Smcae;
    cfg.extractor.channels = vec![4, 6];
    cfg.extractor.loss_weights = vec![1.0, 1.0];
    cfg.extractor.smcae_patches = 32;
    cfg.extractor.epochs = 2;
    let smcae = run_trial(&cfg, &data, 0, 2).unwrap();
    assert!(smcae.report.variants.contains_key("SMCAE+SS-MLP"));
    assert_eq!(smcae.model.spec.input_dim, 10);
    assert_eq!(smcae.split, mica.split);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = PipelineConfig::from_toml(&text, &dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!((cfg.experiment.n_train, cfg.experiment.n_val, cfg.experiment.n_trials), (15, 35, 30));
        n += 1;
    }
    assert_eq!(n, 3);
}
