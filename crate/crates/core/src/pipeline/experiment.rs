use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{base_variant, crf_variant, run_trial, trial_seed, Dataset, PipelineConfig};
use crate::error::{Error, Result, Stage, StageExt};
use crate::metrics::{aggregate, paired_t_test, write_aggregate_csv, write_trials_csv, MetricsReport, TTest, TrialReport, VariantSummary};

/// Paired t-test of `variant − baseline` on one metric across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub baseline: String,
    pub variant: String,
    pub metric: &'static str,
    pub n: usize,
    pub mean_diff: f64,
    /// Trials in which the variant scored strictly higher.
    pub wins: usize,
    pub test: TTest,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub requested: usize,
    pub trials: Vec<TrialReport>,
    /// `(trial index, error message)` for trials that did not complete.
    pub failures: Vec<(usize, String)>,
    pub summary: Vec<VariantSummary>,
    pub comparisons: Vec<PairedComparison>,
}

/// Runs `n_trials` trials with seeds `hash64(master, t)`.
pub fn run_experiment(cfg: &PipelineConfig, data: &Dataset, n_trials: usize) -> Result<ExperimentOutcome> {
    let seeds: Vec<u64> = (0..n_trials).map(|t| trial_seed(cfg.experiment.seed, t)).collect();
    run_experiment_with_seeds(cfg, data, &seeds)
}

const METRICS: [(&str, fn(&MetricsReport) -> f64); 3] = [("oa", |m| m.oa), ("aa", |m| m.aa), ("kappa", |m| m.kappa)];

fn compare(trials: &[TrialReport], baseline: &str, variant: &str) -> Result<Vec<PairedComparison>> {
    METRICS
        .iter()
        .map(|&(metric, f)| {
            let a: Vec<f64> = trials.iter().map(|t| f(&t.variants[variant])).collect();
            let b: Vec<f64> = trials.iter().map(|t| f(&t.variants[baseline])).collect();
            let test = paired_t_test(&a, &b)?;
            Ok(PairedComparison {
                baseline: baseline.to_string(),
                variant: variant.to_string(),
                metric,
                n: a.len(),
                mean_diff: a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64,
                wins: a.iter().zip(&b).filter(|(x, y)| x > y).count(),
                test,
            })
        })
        .collect()
}

/// Runs one trial per seed, continuing past failed trials, and writes
/// `trials.csv`, `aggregate.csv`, `ttests.csv` and `summary.txt` to the
/// configured output directory.
pub fn run_experiment_with_seeds(cfg: &PipelineConfig, data: &Dataset, seeds: &[u64]) -> Result<ExperimentOutcome> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!("an experiment needs at least 2 trials, got {}", seeds.len())));
    }
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    for (t, &seed) in seeds.iter().enumerate() {
        log::info!("trial {}/{} (seed {seed:#018x})", t + 1, seeds.len());
        match run_trial(cfg, data, t, seed) {
            Ok(out) => trials.push(out.report),
            Err(e) => {
                log::error!("trial {t} failed: {e}");
                failures.push((t, e.to_string()));
            }
        }
    }
    let summary = aggregate(&trials).stage(Stage::Score)?;
    let base = base_variant(cfg.extractor.kind);
    let crf = crf_variant(cfg.extractor.kind);
    let comparisons = if trials[0].variants.contains_key(&crf) {
        compare(&trials, base, &crf).stage(Stage::Score)?
    } else {
        Vec::new()
    };
    let outcome = ExperimentOutcome {
        requested: seeds.len(),
        trials,
        failures,
        summary,
        comparisons,
    };
    write_outputs(&cfg.experiment.out, data, &outcome).stage(Stage::Write)?;
    Ok(outcome)
}

/// Columns: `baseline,variant,metric,n,mean_diff,wins,t,df,p`.
fn write_ttests_csv(path: &Path, rows: &[PairedComparison]) -> Result<()> {
    let mut text = String::from("baseline,variant,metric,n,mean_diff,wins,t,df,p\n");
    for c in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{:.6},{},{:.6},{},{:.6e}",
            c.baseline, c.variant, c.metric, c.n, c.mean_diff, c.wins, c.test.t, c.test.df, c.test.p
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl ExperimentOutcome {
    /// Human-readable table of mean ± std per variant plus significance lines.
    pub fn summary_table(&self, dataset: &str) -> String {
        let mut s = format!("dataset: {dataset}\n");
        let _ = writeln!(s, "trials: {} of {} completed", self.trials.len(), self.requested);
        for (t, e) in &self.failures {
            let _ = writeln!(s, "  trial {t} failed: {e}");
        }
        let _ = writeln!(s, "{:<24} {:>11} {:>11} {:>11}", "variant", "OA (%)", "AA (%)", "kappa");
        for row in &self.summary {
            let _ = writeln!(s, "{}", row.table_row());
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} vs {} on {}: mean diff {:+.4}, wins {}/{}, t = {:.3}, p = {:.3e}",
                c.variant, c.baseline, c.metric, c.mean_diff, c.wins, c.n, c.test.t, c.test.p
            );
        }
        s
    }
}

fn write_outputs(out: &Path, data: &Dataset, o: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_trials_csv(&out.join("trials.csv"), &o.trials)?;
    write_aggregate_csv(&out.join("aggregate.csv"), &o.summary)?;
    write_ttests_csv(&out.join("ttests.csv"), &o.comparisons)?;
    let path = out.join("summary.txt");
    fs::write(&path, o.summary_table(&data.name)).map_err(|e| Error::io(&path, e))
}
