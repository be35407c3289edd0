//! Confusion matrices, OA/AA/κ, paired t-tests and multi-trial aggregation.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use ndarray::Array2;

use crate::datacube::{LabelMap, PixelCoord};
use crate::error::{Error, Result};

/// Counts indexed `[true class − 1, predicted class − 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() || counts.is_empty() {
            return Err(Error::Dimension(format!("confusion matrix must be square and non-empty, got {:?}", counts.dim())));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }
}

/// Tallies (truth, prediction) pairs over `scope`.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, scope: &[PixelCoord]) -> Result<ConfusionMatrix> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} does not match truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    if scope.is_empty() {
        return Err(Error::InvalidScope("empty scoring scope".into()));
    }
    let c = truth.num_classes();
    let mut counts = Array2::<u64>::zeros((c, c));
    for &p in scope {
        if p.row >= truth.height() || p.col >= truth.width() {
            return Err(Error::InvalidScope(format!("pixel {p:?} is outside the image")));
        }
        let t = truth.get(p);
        if t == 0 {
            return Err(Error::InvalidScope(format!("pixel {p:?} has no ground-truth label")));
        }
        let y = pred.get(p);
        if y == 0 || y as usize > c {
            return Err(Error::InvalidLabeling(format!("prediction {y} at {p:?} outside [1, {c}]")));
        }
        counts[[t as usize - 1, y as usize - 1]] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the scored pixels.
    pub per_class_recall: Vec<Option<f64>>,
}

/// Overall accuracy, average per-class recall (over classes present in the
/// scope) and Cohen's κ, which is 0 when chance agreement is 1.
pub fn oa_aa_kappa(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::EmptyInput("confusion matrix has no counts".into()));
    }
    let counts = &cm.counts;
    let nf = n as f64;
    let trace: u64 = counts.diag().sum();
    let oa = trace as f64 / nf;
    let rows = counts.sum_axis(ndarray::Axis(1));
    let cols = counts.sum_axis(ndarray::Axis(0));
    let per_class_recall: Vec<Option<f64>> = (0..cm.num_classes())
        .map(|k| (rows[k] > 0).then(|| counts[[k, k]] as f64 / rows[k] as f64))
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe: f64 = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| (r as f64) * (c as f64))
        .sum::<f64>()
        / (nf * nf);
    let kappa = if pe >= 1.0 { 0.0 } else { (oa - pe) / (1.0 - pe) };
    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        per_class_recall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a − b`. All-zero differences give `t = 0, p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, df });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / df as f64;
    if var == 0.0 {
        // Constant non-zero difference: infinitely significant.
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            df,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `nu` degrees of freedom.
pub fn student_t_two_sided(t: f64, nu: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = nu / (nu + t * t);
    regularized_incomplete_beta(x, nu / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `I_x(a, b)` via its continued fraction, evaluated with the modified Lentz method.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fastest for x < (a + 1)/(a + b + 2).
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// One pipeline trial: metrics per variant, keyed by variant name.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub variants: BTreeMap<String, MetricsReport>,
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n − 1) standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub trials: usize,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
}

impl VariantSummary {
    /// `OA ± std / AA ± std / κ ± std` with accuracies in percent.
    pub fn table_row(&self) -> String {
        format!(
            "{:<24} {:>5.1}±{:<4.1} {:>5.1}±{:<4.1} {:.3}±{:.3}",
            self.variant,
            100.0 * self.oa.mean,
            100.0 * self.oa.std,
            100.0 * self.aa.mean,
            100.0 * self.aa.std,
            self.kappa.mean,
            self.kappa.std
        )
    }
}

/// Mean ± sample std per variant over at least two trials.
pub fn aggregate(trials: &[TrialReport]) -> Result<Vec<VariantSummary>> {
    if trials.len() < 2 {
        return Err(Error::InvalidArgument(format!("aggregation needs at least 2 trials, got {}", trials.len())));
    }
    let keys: Vec<&String> = trials[0].variants.keys().collect();
    for t in trials {
        if t.variants.keys().collect::<Vec<_>>() != keys {
            return Err(Error::InvalidArgument(format!(
                "trial {} has variants {:?}, expected {keys:?}",
                t.trial,
                t.variants.keys().collect::<Vec<_>>()
            )));
        }
    }
    Ok(keys
        .into_iter()
        .map(|k| {
            let pick = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { trials.iter().map(|t| f(&t.variants[k])).collect() };
            VariantSummary {
                variant: k.clone(),
                trials: trials.len(),
                oa: MeanStd::of(&pick(|m| m.oa)),
                aa: MeanStd::of(&pick(|m| m.aa)),
                kappa: MeanStd::of(&pick(|m| m.kappa)),
            }
        })
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(e: csv::Error) -> Error {
    Error::MalformedFile(e.to_string())
}

/// Columns: `trial,variant,seed,oa,aa,kappa,seconds`.
pub fn write_trials_csv(path: &Path, trials: &[TrialReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["trial", "variant", "seed", "oa", "aa", "kappa", "seconds"]).map_err(csv_err)?;
    for t in trials {
        for (name, m) in &t.variants {
            let secs = t.seconds.get(name).copied().unwrap_or(f64::NAN);
            w.write_record([
                t.trial.to_string(),
                name.clone(),
                t.seed.to_string(),
                format!("{:.6}", m.oa),
                format!("{:.6}", m.aa),
                format!("{:.6}", m.kappa),
                format!("{secs:.3}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns: `variant,trials,oa_mean,oa_std,aa_mean,aa_std,kappa_mean,kappa_std`.
pub fn write_aggregate_csv(path: &Path, rows: &[VariantSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["variant", "trials", "oa_mean", "oa_std", "aa_mean", "aa_std", "kappa_mean", "kappa_std"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.trials.to_string(),
            format!("{:.6}", r.oa.mean),
            format!("{:.6}", r.oa.std),
            format!("{:.6}", r.aa.mean),
            format!("{:.6}", r.aa.std),
            format!("{:.6}", r.kappa.mean),
            format!("{:.6}", r.kappa.std),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
