//! Config-driven orchestration: one low-shot trial, the multi-trial experiment
//! and classification-map rendering.

mod config;
mod experiment;
mod render;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    ClassifierConfig, DatasetConfig, ExperimentConfig, ExtractorConfig, ExtractorKind, PipelineConfig, UgmConfig,
    UgmKind,
};
pub use experiment::{run_experiment, run_experiment_with_seeds, ExperimentOutcome, PairedComparison};
pub use render::{render_map, Palette};

use crate::container::{Persist, Precision};
use crate::datacube::{read_envi, read_labels, sample_split, LabelMap, PixelCoord, ProbabilityField, SpectralCube, Split};
use crate::error::{Error, Result, Stage, StageExt};
use crate::features::{encode_smcae, extract_mica, learn_ica_filters, train_smcae, FeatureCube, Standardizer};
use crate::metrics::{confusion, oa_aa_kappa, MetricsReport, TrialReport};
use crate::ssmlp::{cross_validate, TrainedMlp};
use crate::ugm::{
    alpha_expansion, icm, map_from_marginals, meanfield_dense, tune_crf, unary_from_proba, EnergyModel,
    PairwiseParams, Structure, UnaryField, PROBABILITY_CLAMP,
};

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(a ^ splitmix64(b))`; used for trial seeds `hash64(master, t)`
/// and for per-stage seeds within a trial.
pub fn hash64(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    hash64(master, trial as u64)
}

/// Independent seeds for the randomized stages of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub split: u64,
    pub extract: u64,
    pub train: u64,
    pub unlabeled: u64,
}

impl StageSeeds {
    pub fn new(trial_seed: u64) -> Self {
        Self {
            split: hash64(trial_seed, 1),
            extract: hash64(trial_seed, 2),
            train: hash64(trial_seed, 3),
            unlabeled: hash64(trial_seed, 4),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub cube: SpectralCube,
    pub truth: LabelMap,
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let run = || -> Result<Dataset> {
        let data = match &cfg.data {
            Some(p) => p.clone(),
            None => crate::datacube::find_data_file(&cfg.cube)?,
        };
        let cube = read_envi(&cfg.cube, &data)?;
        let truth = read_labels(&cfg.truth, cfg.truth_data.as_deref())?;
        truth.validate_as_truth()?;
        if (truth.height(), truth.width()) != (cube.height(), cube.width()) {
            return Err(Error::Dimension(format!(
                "ground truth is {}x{} but the cube is {}x{}",
                truth.height(),
                truth.width(),
                cube.height(),
                cube.width()
            )));
        }
        let name = cfg.name.clone().unwrap_or_else(|| {
            cfg.cube.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        Ok(Dataset { name, cube, truth })
    };
    run().stage(Stage::Load)
}

/// Variant label without post-processing, e.g. `MICA+SS-MLP`.
pub fn base_variant(kind: ExtractorKind) -> &'static str {
    match kind {
        ExtractorKind::Raw => "SS-MLP",
        ExtractorKind::Mica => "MICA+SS-MLP",
        ExtractorKind::Smcae => "SMCAE+SS-MLP",
    }
}

pub fn crf_variant(kind: ExtractorKind) -> String {
    format!("{}+CRF", base_variant(kind))
}

/// Unsupervised feature extraction fit on the full image.
pub fn extract_features(cube: &SpectralCube, cfg: &ExtractorConfig, seed: u64) -> Result<FeatureCube> {
    match cfg.kind {
        ExtractorKind::Raw => Ok(FeatureCube::from_cube(cube)),
        ExtractorKind::Mica => extract_mica(cube, &learn_ica_filters(cube, &cfg.mica_params(), seed)?),
        ExtractorKind::Smcae => encode_smcae(cube, &train_smcae(cube, &cfg.smcae_spec(), seed)?),
    }
}

/// Standardizes with statistics of the whole feature image.
pub fn standardize(features: &FeatureCube) -> Result<FeatureCube> {
    Standardizer::fit_features(features)?.apply(features)
}

fn rows(features: &FeatureCube, pixels: &[PixelCoord]) -> Array2<f64> {
    let v = features.values();
    Array2::from_shape_fn((pixels.len(), features.dim()), |(i, k)| v[[pixels[i].row, pixels[i].col, k]])
}

fn labels_at(truth: &LabelMap, pixels: &[PixelCoord]) -> Vec<u16> {
    pixels.iter().map(|&p| truth.get(p)).collect()
}

/// Cross-validates the classifier grid on the split's train/validation pixels.
pub fn fit_classifier(
    features: &FeatureCube,
    truth: &LabelMap,
    split: &Split,
    cfg: &ClassifierConfig,
    seeds: StageSeeds,
) -> Result<TrainedMlp> {
    let mut train_px = split.train.clone();
    let mut train_y = labels_at(truth, &split.train);
    if cfg.aux_weight > 0.0 && cfg.n_unlabeled > 0 {
        let n = features.height() * features.width();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.unlabeled);
        for i in sample(&mut rng, n, cfg.n_unlabeled.min(n)).iter() {
            train_px.push(PixelCoord::new(i / features.width(), i % features.width()));
            train_y.push(0);
        }
    }
    let grid = cfg.grid(features.dim(), truth.num_classes());
    cross_validate(
        &grid,
        &rows(features, &train_px),
        &train_y,
        &rows(features, &split.val),
        &labels_at(truth, &split.val),
        &cfg.train_options(),
        seeds.train,
    )
}

fn grid_labels(kind: UgmKind, unary: &UnaryField, params: PairwiseParams, max_sweeps: usize) -> Result<LabelMap> {
    let model = EnergyModel::new(unary.clone(), params, Structure::Grid4);
    let init = unary.argmin_labels();
    match kind {
        UgmKind::GridIcm => icm(&model, &init, max_sweeps),
        UgmKind::GridAlphaExpansion => alpha_expansion(&model, &init, max_sweeps),
        _ => Err(Error::Internal(format!("{kind:?} is not a grid model"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfResult {
    pub labels: LabelMap,
    pub params: PairwiseParams,
    pub val_accuracy: f64,
}

/// Tunes pairwise parameters on the validation pixels, then infers labels
/// with the chosen parameters. Returns `None` for `UgmKind::None`.
pub fn postprocess(
    proba: &ProbabilityField,
    truth: &LabelMap,
    val: &[PixelCoord],
    cfg: &UgmConfig,
) -> Result<Option<CrfResult>> {
    let unary = unary_from_proba(proba, PROBABILITY_CLAMP);
    let lattice = cfg.lattice();
    match cfg.kind {
        UgmKind::None => Ok(None),
        UgmKind::DenseMeanfield => {
            let tuned = tune_crf(&unary, truth, val, &lattice, cfg.iterations)?;
            let model = EnergyModel::new(unary, tuned.best, Structure::Dense);
            let q = meanfield_dense(&model, cfg.iterations)?;
            Ok(Some(CrfResult {
                labels: map_from_marginals(&q),
                params: tuned.best,
                val_accuracy: tuned.best_accuracy,
            }))
        }
        kind => {
            if val.is_empty() {
                return Err(Error::EmptyInput("no validation pixels for CRF tuning".into()));
            }
            let mut order = lattice.clone();
            order.sort_by(|a, b| a.w1.total_cmp(&b.w1).then(a.theta.total_cmp(&b.theta)));
            let mut best: Option<CrfResult> = None;
            for p in order {
                let labels = grid_labels(kind, &unary, p, cfg.max_sweeps)?;
                let acc = val.iter().filter(|&&v| labels.get(v) == truth.get(v)).count() as f64 / val.len() as f64;
                if best.as_ref().map_or(true, |b| acc > b.val_accuracy) {
                    best = Some(CrfResult {
                        labels,
                        params: p,
                        val_accuracy: acc,
                    });
                }
            }
            Ok(best)
        }
    }
}

pub fn score(pred: &LabelMap, truth: &LabelMap, test: &[PixelCoord]) -> Result<MetricsReport> {
    oa_aa_kappa(&confusion(pred, truth, test)?)
}

/// Everything a trial produces; `report` is what the experiment aggregates.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub report: TrialReport,
    pub split: Split,
    pub model: TrainedMlp,
    pub probabilities: ProbabilityField,
    pub base_labels: LabelMap,
    pub crf: Option<CrfResult>,
}

/// FNV-1a over the settings that determine the classifier probabilities.
fn cache_key(cfg: &PipelineConfig) -> u64 {
    let text = format!(
        "{:?}|{:?}|{:?}|{}|{}",
        cfg.dataset, cfg.extractor, cfg.classifier, cfg.experiment.n_train, cfg.experiment.n_val
    );
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn cache_dir(cfg: &PipelineConfig, seed: u64) -> Option<PathBuf> {
    cfg.experiment
        .cache
        .then(|| cfg.experiment.out.join("cache").join(format!("{:016x}-{seed:016x}", cache_key(cfg))))
}

fn cached<T: Persist>(dir: Option<&Path>, name: &str, stage: Stage, make: impl FnOnce() -> Result<T>) -> Result<T> {
    let Some(dir) = dir else {
        return make().stage(stage);
    };
    let path = dir.join(name);
    if path.is_file() {
        log::debug!("loading cached {}", path.display());
        return T::load(&path).stage(stage);
    }
    let value = make().stage(stage)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage(Stage::Write)?;
    value.save(&path, Precision::F64).stage(Stage::Write)?;
    Ok(value)
}

/// One low-shot trial: split, extract, standardize, cross-validate the
/// classifier, predict, optionally post-process, and score on test pixels.
pub fn run_trial(cfg: &PipelineConfig, data: &Dataset, trial: usize, seed: u64) -> Result<TrialOutput> {
    let exp = &cfg.experiment;
    let seeds = StageSeeds::new(seed);
    let t0 = Instant::now();
    let split = sample_split(&data.truth, exp.n_train, exp.n_val, seeds.split).stage(Stage::Split)?;
    let cache = cache_dir(cfg, seed);
    let cache = cache.as_deref();

    let mut features: Option<FeatureCube> = None;
    let mut get_features = || -> Result<FeatureCube> {
        if let Some(f) = &features {
            return Ok(f.clone());
        }
        let raw = cached(cache, "features.emc", Stage::Extract, || {
            extract_features(&data.cube, &cfg.extractor, seeds.extract)
        })?;
        let f = standardize(&raw).stage(Stage::Standardize)?;
        features = Some(f.clone());
        Ok(f)
    };
    let model = cached(cache, "mlp.emc", Stage::Train, || {
        let f = get_features()?;
        fit_classifier(&f, &data.truth, &split, &cfg.classifier, seeds)
    })?;
    let probabilities = cached(cache, "proba.emc", Stage::Predict, || model.predict_proba(&get_features()?))?;
    let base_labels = map_from_marginals(&probabilities);
    let base_secs = t0.elapsed().as_secs_f64();

    let mut report = TrialReport {
        trial,
        seed,
        variants: Default::default(),
        seconds: Default::default(),
    };
    let base = base_variant(cfg.extractor.kind).to_string();
    report
        .variants
        .insert(base.clone(), score(&base_labels, &data.truth, &split.test).stage(Stage::Score)?);
    report.seconds.insert(base, base_secs);

    let t1 = Instant::now();
    let crf = postprocess(&probabilities, &data.truth, &split.val, &cfg.ugm).stage(Stage::Crf)?;
    if let Some(c) = &crf {
        let name = crf_variant(cfg.extractor.kind);
        report
            .variants
            .insert(name.clone(), score(&c.labels, &data.truth, &split.test).stage(Stage::Score)?);
        report.seconds.insert(name, base_secs + t1.elapsed().as_secs_f64());
        log::info!(
            "trial {trial}: CRF w1={} theta={} (val acc {:.4})",
            c.params.w1,
            c.params.theta,
            c.val_accuracy
        );
    }
    Ok(TrialOutput {
        report,
        split,
        model,
        probabilities,
        base_labels,
        crf,
    })
}
