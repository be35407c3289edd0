use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::features::{Activation, EncodeMode, MicaParams, SmcaeSpec};
use crate::ssmlp::{MlpSpec, TrainOptions};
use crate::ugm::PairwiseParams;

/// Pipeline configuration, read from a TOML file with one flat table per section:
///
/// ```toml
/// [dataset]
/// cube = "paviau/cube.hdr"      # ENVI header; the raw file sits next to it
/// truth = "paviau/gt.hdr"       # ENVI label raster or .pgm
///
/// [extractor]
/// kind = "raw"                  # raw | mica | smcae
///
/// [classifier]
/// hidden_layers = [2, 3]
/// units = [64, 256, 1024]
/// weight_decay = [0.0, 1e-4, 1e-3]
///
/// [ugm]
/// kind = "dense_meanfield"      # none | grid_icm | grid_alpha_expansion | dense_meanfield
///
/// [experiment]
/// n_train = 15
/// n_val = 35
/// n_trials = 30
/// seed = 0
/// out = "runs/paviau"
/// ```
///
/// Relative paths resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub ugm: UgmConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub cube: PathBuf,
    /// Raw data file; found next to the header when omitted.
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub truth: PathBuf,
    #[serde(default)]
    pub truth_data: Option<PathBuf>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Raw,
    Mica,
    Smcae,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    // MICA
    pub num_filters: usize,
    pub receptive_field: usize,
    pub spectral_components: usize,
    pub n_patches: usize,
    // SMCAE
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub loss_weights: Vec<f64>,
    pub linear: bool,
    pub final_layer_only: bool,
    pub patch_size: usize,
    pub smcae_patches: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let m = MicaParams::default();
        let s = SmcaeSpec::default();
        Self {
            kind: ExtractorKind::Raw,
            num_filters: m.num_filters,
            receptive_field: m.receptive_field,
            spectral_components: m.spectral_components,
            n_patches: m.n_patches,
            channels: s.channels,
            kernel: s.kernel,
            loss_weights: s.loss_weights,
            linear: false,
            final_layer_only: false,
            patch_size: s.patch_size,
            smcae_patches: s.n_patches,
            batch_size: s.batch_size,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            lr_decay: s.lr_decay,
        }
    }
}

impl ExtractorConfig {
    pub fn mica_params(&self) -> MicaParams {
        MicaParams {
            num_filters: self.num_filters,
            receptive_field: self.receptive_field,
            spectral_components: self.spectral_components,
            n_patches: self.n_patches,
            ..MicaParams::default()
        }
    }

    pub fn smcae_spec(&self) -> SmcaeSpec {
        SmcaeSpec {
            channels: self.channels.clone(),
            kernel: self.kernel,
            loss_weights: self.loss_weights.clone(),
            activation: if self.linear { Activation::Linear } else { Activation::Relu },
            encode_mode: if self.final_layer_only { EncodeMode::Final } else { EncodeMode::Concat },
            patch_size: self.patch_size,
            n_patches: self.smcae_patches,
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden_layers: Vec<usize>,
    pub units: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub aux_weight: f64,
    /// Unlabeled pixels drawn per trial for the reconstruction term; used only
    /// when `aux_weight > 0`.
    pub n_unlabeled: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            hidden_layers: vec![2, 3],
            units: vec![64, 256, 1024],
            weight_decay: vec![0.0, 1e-4, 1e-3],
            aux_weight: 0.0,
            n_unlabeled: 0,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            plateau_patience: t.plateau_patience,
            stop_patience: t.stop_patience,
            max_epochs: t.max_epochs,
        }
    }
}

impl ClassifierConfig {
    /// Cartesian product in (layers, units, weight decay) order.
    pub fn grid(&self, input_dim: usize, num_classes: usize) -> Vec<MlpSpec> {
        let mut out = Vec::new();
        for &hidden_layers in &self.hidden_layers {
            for &units_per_layer in &self.units {
                for &weight_decay in &self.weight_decay {
                    out.push(MlpSpec {
                        input_dim,
                        num_classes,
                        hidden_layers,
                        units_per_layer,
                        weight_decay,
                        aux_weight: self.aux_weight,
                    });
                }
            }
        }
        out
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            plateau_patience: self.plateau_patience,
            stop_patience: self.stop_patience,
            max_epochs: self.max_epochs,
            ..TrainOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UgmKind {
    None,
    GridIcm,
    GridAlphaExpansion,
    DenseMeanfield,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UgmConfig {
    pub kind: UgmKind,
    pub iterations: usize,
    /// Candidate `w1` values; the default is 7 log-spaced values over [1e-3, 1e3].
    pub w1: Vec<f64>,
    pub theta: Vec<f64>,
    pub max_sweeps: usize,
}

impl Default for UgmConfig {
    fn default() -> Self {
        let lattice: Vec<f64> = (-3..=3).map(|e| 10f64.powi(e)).collect();
        Self {
            kind: UgmKind::DenseMeanfield,
            iterations: crate::ugm::MEANFIELD_ITERATIONS,
            w1: lattice.clone(),
            theta: lattice,
            max_sweeps: 20,
        }
    }
}

impl UgmConfig {
    pub fn lattice(&self) -> Vec<PairwiseParams> {
        let mut out = Vec::with_capacity(self.w1.len() * self.theta.len());
        for &w1 in &self.w1 {
            for &theta in &self.theta {
                out.push(PairwiseParams { w1, theta });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Cache features, models and probability fields under `out/cache`.
    pub cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_train: 15,
            n_val: 35,
            n_trials: 30,
            seed: 0,
            out: PathBuf::from("out"),
            cache: false,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.dataset.cube = resolve(base_dir, &cfg.dataset.cube);
        cfg.dataset.truth = resolve(base_dir, &cfg.dataset.truth);
        cfg.dataset.data = cfg.dataset.data.map(|p| resolve(base_dir, &p));
        cfg.dataset.truth_data = cfg.dataset.truth_data.map(|p| resolve(base_dir, &p));
        cfg.experiment.out = resolve(base_dir, &cfg.experiment.out);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; referenced dataset files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml(&text, base)?;
        for p in [Some(&cfg.dataset.cube), Some(&cfg.dataset.truth), cfg.dataset.data.as_ref(), cfg.dataset.truth_data.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.classifier;
        if c.hidden_layers.is_empty() || c.units.is_empty() || c.weight_decay.is_empty() {
            return Err(Error::Config("classifier grid has an empty axis".into()));
        }
        for spec in c.grid(1, 2) {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let u = &self.ugm;
        if u.kind != UgmKind::None {
            if u.w1.is_empty() || u.theta.is_empty() {
                return Err(Error::Config("CRF lattice has an empty axis".into()));
            }
            for p in u.lattice() {
                PairwiseParams::new(p.w1, p.theta).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        match self.extractor.kind {
            ExtractorKind::Raw => {}
            ExtractorKind::Mica => {
                let m = self.extractor.mica_params();
                if m.receptive_field % 2 == 0 || m.num_filters == 0 {
                    return Err(Error::Config("MICA needs an odd receptive field and at least one filter".into()));
                }
            }
            ExtractorKind::Smcae => self.extractor.smcae_spec().validate().map_err(|e| Error::Config(e.to_string()))?,
        }
        let e = &self.experiment;
        if e.n_train == 0 || e.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        Ok(())
    }
}
