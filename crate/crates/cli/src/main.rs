use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use earthmapper::container::{Persist, Precision};
use earthmapper::datacube::{
    read_labels, sample_split, write_envi, write_envi_labels, write_pgm_labels, DataType, Interleave, LabelMap,
    ProbabilityField, SpectralCube, Split,
};
use earthmapper::features::FeatureCube;
use earthmapper::metrics::{write_trials_csv, MetricsReport};
use earthmapper::pipeline::{
    base_variant, crf_variant, extract_features, fit_classifier, load_dataset, postprocess, render_map, run_experiment,
    run_trial, score, standardize, trial_seed, Dataset, Palette, PipelineConfig, StageSeeds,
};
use earthmapper::ssmlp::TrainedMlp;
use earthmapper::ugm::map_from_marginals;
use earthmapper::{Error, Result, Stage, StageExt};
use ndarray::{Array2, Array3};

/// Hyperspectral semantic segmentation pipeline.
#[derive(Parser)]
#[command(name = "earthmapper", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Trial seed; defaults to the first trial seed derived from the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `experiment.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a MATLAB v5 `.mat` array into an ENVI header/raw pair.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// Variable name; defaults to the only array of the right rank.
        #[arg(long)]
        variable: Option<String>,
        /// Output ENVI header path; the payload is written next to it as `.raw`.
        #[arg(long)]
        output: PathBuf,
        /// Treat the array as a 2-D ground-truth label raster.
        #[arg(long)]
        labels: bool,
    },
    /// Fit the configured extractor and write `features.emc`.
    Extract(Common),
    /// Sample the split and cross-validate the classifier: `split.csv`, `mlp.emc`, `history.csv`.
    Train(Common),
    /// Predict class probabilities: `proba.emc` and `base.pgm`.
    Infer(Common),
    /// Tune and run the configured UGM on `proba.emc`: `crf.pgm`.
    Crf(Common),
    /// Score a label map on the split's test pixels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Variant whose map to score (`<name>+CRF` selects `crf.pgm`).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run one trial end to end and render its maps.
    Trial {
        #[command(flatten)]
        common: Common,
        /// Only render this variant's map.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run the multi-trial experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Render a label raster (`.pgm` or ENVI) as a PNG.
    Render {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    cfg: PipelineConfig,
    data: Dataset,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = PipelineConfig::load(&c.config).stage(Stage::Load)?;
        if let Some(out) = &c.out {
            cfg.experiment.out = out.clone();
        }
        let data = load_dataset(&cfg.dataset)?;
        let seed = c.seed.unwrap_or_else(|| trial_seed(cfg.experiment.seed, 0));
        let out = cfg.experiment.out.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).stage(Stage::Write)?;
        Ok(Self { cfg, data, seed, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seeds(&self) -> StageSeeds {
        StageSeeds::new(self.seed)
    }

    /// Raw extractor output, reused from `features.emc` when present.
    fn features(&self) -> Result<FeatureCube> {
        let path = self.path("features.emc");
        let raw = if path.is_file() {
            FeatureCube::load(&path).stage(Stage::Extract)?
        } else {
            let f = extract_features(&self.data.cube, &self.cfg.extractor, self.seeds().extract).stage(Stage::Extract)?;
            f.save(&path, Precision::F64).stage(Stage::Write)?;
            f
        };
        standardize(&raw).stage(Stage::Standardize)
    }

    fn split(&self) -> Result<Split> {
        let path = self.path("split.csv");
        if path.is_file() {
            return Split::read_csv(&path).stage(Stage::Split);
        }
        let e = &self.cfg.experiment;
        let split = sample_split(&self.data.truth, e.n_train, e.n_val, self.seeds().split).stage(Stage::Split)?;
        split.write_csv(&path).stage(Stage::Write)?;
        Ok(split)
    }
}

fn print_metrics(name: &str, m: &MetricsReport) {
    println!("{name:<24} OA {:6.2}%  AA {:6.2}%  kappa {:.4}", 100.0 * m.oa, 100.0 * m.aa, m.kappa);
}

macro_rules! to_f64 {
    ($data:expr, $($variant:ident),*) => {
        match $data {
            $(matfile::NumericData::$variant { real, .. } => real.iter().map(|&v| v as f64).collect::<Vec<f64>>(),)*
        }
    };
}

/// Reads a numeric array of rank `rank` in MATLAB column-major order.
fn read_mat(path: &Path, variable: Option<&str>, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mat = matfile::MatFile::parse(file).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let array = match variable {
        Some(name) => mat
            .find_by_name(name)
            .ok_or_else(|| Error::Parse(format!("no variable '{name}' in {}", path.display())))?,
        None => {
            let candidates: Vec<_> = mat.arrays().iter().filter(|a| a.ndims() == rank).collect();
            match candidates.as_slice() {
                [one] => *one,
                _ => {
                    return Err(Error::Parse(format!(
                        "{} holds {} arrays of rank {rank}; pass --variable",
                        path.display(),
                        candidates.len()
                    )))
                }
            }
        }
    };
    if array.ndims() != rank {
        return Err(Error::Dimension(format!(
            "variable '{}' has shape {:?}, expected rank {rank}",
            array.name(),
            array.size()
        )));
    }
    let values = to_f64!(array.data(), Int8, UInt8, Int16, UInt16, Int32, UInt32, Int64, UInt64, Single, Double);
    Ok((array.size().clone(), values))
}

fn convert(input: &Path, variable: Option<&str>, output: &Path, labels: bool) -> Result<()> {
    let raw = output.with_extension("raw");
    if labels {
        let (size, v) = read_mat(input, variable, 2)?;
        let (h, w) = (size[0], size[1]);
        if v.iter().any(|&x| x < 0.0 || x.fract() != 0.0 || x > u16::MAX as f64) {
            return Err(Error::MalformedFile("label array has negative or non-integer values".into()));
        }
        let map = LabelMap::from_labels(Array2::from_shape_fn((h, w), |(r, c)| v[r + c * h] as u16))?;
        write_envi_labels(&map, output, &raw)?;
        println!("wrote {h}x{w} labels with {} classes to {}", map.num_classes(), output.display());
    } else {
        let (size, v) = read_mat(input, variable, 3)?;
        let (h, w, b) = (size[0], size[1], size[2]);
        let cube = SpectralCube::with_index_wavelengths(Array3::from_shape_fn((h, w, b), |(r, c, k)| {
            v[r + c * h + k * h * w]
        }))?;
        write_envi(&cube, output, &raw, Interleave::Bsq, DataType::Float32)?;
        println!("wrote {h}x{w}x{b} cube to {}", output.display());
    }
    Ok(())
}

fn is_crf(variant: &str) -> bool {
    variant.ends_with("+CRF")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert {
            input,
            variable,
            output,
            labels,
        } => convert(&input, variable.as_deref(), &output, labels).stage(Stage::Load),
        Command::Extract(c) => {
            let ctx = Ctx::new(&c)?;
            let f = ctx.features()?;
            println!("{}x{} pixels, {} features -> {}", f.height(), f.width(), f.dim(), ctx.path("features.emc").display());
            Ok(())
        }
        Command::Train(c) => {
            let ctx = Ctx::new(&c)?;
            let split = ctx.split()?;
            let f = ctx.features()?;
            let model = fit_classifier(&f, &ctx.data.truth, &split, &ctx.cfg.classifier, ctx.seeds()).stage(Stage::Train)?;
            model.save(&ctx.path("mlp.emc"), Precision::F32).stage(Stage::Write)?;
            model.write_history_csv(&ctx.path("history.csv")).stage(Stage::Write)?;
            let s = &model.spec;
            println!(
                "selected {} hidden layers x {} units, weight decay {}, best epoch {} (val loss {:.4})",
                s.hidden_layers, s.units_per_layer, s.weight_decay, model.best_epoch, model.history[model.best_epoch].val_loss
            );
            Ok(())
        }
        Command::Infer(c) => {
            let ctx = Ctx::new(&c)?;
            let model = TrainedMlp::load(&ctx.path("mlp.emc")).stage(Stage::Load)?;
            let proba = model.predict_proba(&ctx.features()?).stage(Stage::Predict)?;
            proba.save(&ctx.path("proba.emc"), Precision::F32).stage(Stage::Write)?;
            write_pgm_labels(&map_from_marginals(&proba), &ctx.path("base.pgm")).stage(Stage::Write)?;
            println!("wrote {}", ctx.path("proba.emc").display());
            Ok(())
        }
        Command::Crf(c) => {
            let ctx = Ctx::new(&c)?;
            let proba = ProbabilityField::load(&ctx.path("proba.emc")).stage(Stage::Load)?;
            let split = ctx.split()?;
            match postprocess(&proba, &ctx.data.truth, &split.val, &ctx.cfg.ugm).stage(Stage::Crf)? {
                Some(r) => {
                    write_pgm_labels(&r.labels, &ctx.path("crf.pgm")).stage(Stage::Write)?;
                    println!(
                        "w1 = {}, theta = {}, validation accuracy {:.4}",
                        r.params.w1, r.params.theta, r.val_accuracy
                    );
                }
                None => println!("ugm kind is none; nothing to do"),
            }
            Ok(())
        }
        Command::Evaluate { common, variant } => {
            let ctx = Ctx::new(&common)?;
            let split = ctx.split()?;
            let kind = ctx.cfg.extractor.kind;
            let variants = match variant {
                Some(v) => vec![v],
                None => vec![base_variant(kind).to_string(), crf_variant(kind)],
            };
            for v in variants {
                let file = ctx.path(if is_crf(&v) { "crf.pgm" } else { "base.pgm" });
                if !file.is_file() {
                    log::warn!("{} not found; skipping {v}", file.display());
                    continue;
                }
                let pred = read_labels(&file, None).stage(Stage::Load)?;
                print_metrics(&v, &score(&pred, &ctx.data.truth, &split.test).stage(Stage::Score)?);
            }
            Ok(())
        }
        Command::Trial { common, variant } => {
            let ctx = Ctx::new(&common)?;
            let out = run_trial(&ctx.cfg, &ctx.data, 0, ctx.seed)?;
            for (name, m) in &out.report.variants {
                print_metrics(name, m);
            }
            write_trials_csv(&ctx.path("trial.csv"), std::slice::from_ref(&out.report)).stage(Stage::Write)?;
            out.split.write_csv(&ctx.path("split.csv")).stage(Stage::Write)?;
            let palette = Palette::default();
            let kind = ctx.cfg.extractor.kind;
            let mut maps = vec![(base_variant(kind).to_string(), &out.base_labels)];
            if let Some(c) = &out.crf {
                maps.push((crf_variant(kind), &c.labels));
            }
            render_map(&ctx.data.truth, &palette, &ctx.path("truth.png")).stage(Stage::Write)?;
            for (name, labels) in maps {
                if variant.as_ref().is_some_and(|v| v != &name) {
                    continue;
                }
                let file = ctx.path(&format!("{}.png", name.to_lowercase().replace('+', "_")));
                render_map(labels, &palette, &file).stage(Stage::Write)?;
            }
            Ok(())
        }
        Command::Experiment { common, trials } => {
            let ctx = Ctx::new(&common)?;
            let mut cfg = ctx.cfg.clone();
            if let Some(seed) = common.seed {
                cfg.experiment.seed = seed;
            }
            let n = trials.unwrap_or(cfg.experiment.n_trials);
            let outcome = run_experiment(&cfg, &ctx.data, n)?;
            print!("{}", outcome.summary_table(&ctx.data.name));
            Ok(())
        }
        Command::Render { labels, out } => {
            let map = read_labels(&labels, None).stage(Stage::Load)?;
            render_map(&map, &Palette::default(), &out).stage(Stage::Write)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
