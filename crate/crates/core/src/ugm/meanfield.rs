//! Parallel mean-field inference for the fully connected model, where the
//! spatial Gaussian messages reduce to a separable per-class blur.

use std::thread;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, Axis};

use super::{EnergyModel, PairwiseParams, Structure, UnaryField};
use crate::datacube::{LabelMap, PixelCoord, ProbabilityField};
use crate::error::{Error, Result};

pub const MEANFIELD_ITERATIONS: usize = 30;

/// Kernel values below this are dropped by [`truncation_radius`].
const KERNEL_FLOOR: f64 = 1e-9;

/// Above this many taps per axis the blur switches to a Toeplitz matrix product.
const GEMM_TAPS: usize = 48;

/// Smallest radius beyond which every kernel value is below `1e-9`.
pub fn truncation_radius(theta: f64) -> usize {
    (theta * (2.0 * (1.0 / KERNEL_FLOOR).ln()).sqrt()).ceil() as usize
}

fn taps(theta: f64, radius: usize) -> Vec<f64> {
    (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * theta * theta)).exp())
        .collect()
}

fn toeplitz(n: usize, g: &[f64]) -> Array2<f64> {
    let r = g.len() - 1;
    Array2::from_shape_fn((n, n), |(a, b)| {
        let d = a.abs_diff(b);
        if d <= r {
            g[d]
        } else {
            0.0
        }
    })
}

/// Separable Gaussian blur of every channel of an H×W×C raster:
/// `out_i = Σ_j k(r_i − r_j)·k(c_i − c_j)·x_j` over `|Δr|, |Δc| ≤ radius`,
/// including `j = i`. Pixels outside the image contribute nothing.
pub fn gaussian_blur(x: &Array3<f64>, theta: f64, radius: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let g_rows = taps(theta, radius.min(h.saturating_sub(1)));
    let g_cols = taps(theta, radius.min(w.saturating_sub(1)));
    let x = x.as_standard_layout();

    // Along rows (the H axis).
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    if g_rows.len() * 2 - 1 > GEMM_TAPS {
        let xm = x.view().into_shape_with_order((h, w * c)).expect("standard layout");
        let mut tm = tmp.view_mut().into_shape_with_order((h, w * c)).expect("standard layout");
        general_mat_mul(1.0, &toeplitz(h, &g_rows), &xm, 0.0, &mut tm);
    } else {
        let r = g_rows.len() - 1;
        let src = x.as_slice().expect("standard layout");
        let dst = tmp.as_slice_mut().expect("standard layout");
        let stride = w * c;
        for row in 0..h {
            let lo = row.saturating_sub(r);
            let hi = (row + r).min(h - 1);
            let out = &mut dst[row * stride..(row + 1) * stride];
            for other in lo..=hi {
                let k = g_rows[row.abs_diff(other)];
                let inp = &src[other * stride..(other + 1) * stride];
                for (o, v) in out.iter_mut().zip(inp) {
                    *o += k * v;
                }
            }
        }
    }

    // Along columns (the W axis).
    let mut out = Array3::<f64>::zeros((h, w, c));
    if g_cols.len() * 2 - 1 > GEMM_TAPS {
        let kw = toeplitz(w, &g_cols);
        for row in 0..h {
            let src = tmp.index_axis(Axis(0), row);
            let mut dst = out.index_axis_mut(Axis(0), row);
            general_mat_mul(1.0, &kw, &src, 0.0, &mut dst);
        }
    } else {
        let r = g_cols.len() - 1;
        let src = tmp.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        for row in 0..h {
            for col in 0..w {
                let lo = col.saturating_sub(r);
                let hi = (col + r).min(w - 1);
                let o = (row * w + col) * c;
                for other in lo..=hi {
                    let k = g_cols[col.abs_diff(other)];
                    let i = (row * w + other) * c;
                    for ch in 0..c {
                        dst[o + ch] += k * src[i + ch];
                    }
                }
            }
        }
    }
    out
}

fn softmax_neg(energies: &Array3<f64>) -> Array3<f64> {
    let mut q = energies.mapv(|e| -e);
    normalize(&mut q);
    q
}

fn normalize(logits: &mut Array3<f64>) {
    for mut lane in logits.lanes_mut(Axis(2)) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane /= s;
    }
}

/// Applies one parallel update given messages `M_i(ℓ) = Σ_{j≠i} k_ij Q_j(ℓ)`.
fn update(unary: &Array3<f64>, messages: &Array3<f64>, w1: f64) -> Array3<f64> {
    let mut logits = Array3::<f64>::zeros(unary.raw_dim());
    for ((mut out, u), m) in logits
        .lanes_mut(Axis(2))
        .into_iter()
        .zip(unary.lanes(Axis(2)))
        .zip(messages.lanes(Axis(2)))
    {
        let total = m.sum();
        for k in 0..out.len() {
            out[k] = -u[k] - w1 * (total - m[k]);
        }
    }
    normalize(&mut logits);
    logits
}

/// Mean-field free energy `Σ Q(U + ln Q) + ½·w1·Σ Q·(M_tot − M)`.
fn free_energy(unary: &Array3<f64>, q: &Array3<f64>, messages: &Array3<f64>, w1: f64) -> f64 {
    let mut f = 0.0;
    for ((qi, u), m) in q.lanes(Axis(2)).into_iter().zip(unary.lanes(Axis(2))).zip(messages.lanes(Axis(2))) {
        let total = m.sum();
        for k in 0..qi.len() {
            let p = qi[k];
            if p > 0.0 {
                f += p * (u[k] + p.ln());
            }
            f += 0.5 * w1 * p * (total - m[k]);
        }
    }
    f
}

fn blurred_messages(q: &Array3<f64>, theta: f64, radius: usize) -> Array3<f64> {
    // k(0) = 1, so removing the pixel's own contribution is a plain subtraction.
    gaussian_blur(q, theta, radius) - q
}

fn run(
    model: &EnergyModel,
    iterations: usize,
    messages: impl Fn(&Array3<f64>) -> Array3<f64>,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<ProbabilityField> {
    model.require(Structure::Dense)?;
    let unary = model.unary.energies();
    let w1 = model.pairwise.w1;
    let mut q = softmax_neg(unary);
    for _ in 0..iterations {
        let m = messages(&q);
        if let Some(t) = trace.as_deref_mut() {
            t.push(free_energy(unary, &q, &m, w1));
        }
        q = update(unary, &m, w1);
    }
    if let Some(t) = trace {
        let m = messages(&q);
        t.push(free_energy(unary, &q, &m, w1));
    }
    ProbabilityField::new(q)
}

/// Mean-field marginals after `iterations` parallel updates, with messages
/// from a Gaussian blur truncated at [`truncation_radius`].
pub fn meanfield_dense(model: &EnergyModel, iterations: usize) -> Result<ProbabilityField> {
    meanfield_dense_with_radius(model, iterations, truncation_radius(model.pairwise.theta))
}

pub fn meanfield_dense_with_radius(
    model: &EnergyModel,
    iterations: usize,
    radius: usize,
) -> Result<ProbabilityField> {
    let theta = model.pairwise.theta;
    run(model, iterations, |q| blurred_messages(q, theta, radius), None)
}

/// As [`meanfield_dense`], also returning the free energy before each update
/// and after the last one.
pub fn meanfield_dense_traced(model: &EnergyModel, iterations: usize) -> Result<(ProbabilityField, Vec<f64>)> {
    let theta = model.pairwise.theta;
    let radius = truncation_radius(theta);
    let mut trace = Vec::with_capacity(iterations + 1);
    let q = run(model, iterations, |q| blurred_messages(q, theta, radius), Some(&mut trace))?;
    Ok((q, trace))
}

/// Reference path summing messages over all pixel pairs; O(N²) per iteration.
pub fn meanfield_dense_direct(model: &EnergyModel, iterations: usize) -> Result<ProbabilityField> {
    let params = model.pairwise;
    run(
        model,
        iterations,
        |q| {
            let (h, w, c) = q.dim();
            let flat: ArrayView2<f64> = q.view().into_shape_with_order((h * w, c)).expect("standard layout");
            let mut m = Array2::<f64>::zeros((h * w, c));
            for i in 0..h * w {
                let pi = PixelCoord::new(i / w, i % w);
                for j in 0..h * w {
                    if i == j {
                        continue;
                    }
                    let k = params.kernel(pi.dist2(&PixelCoord::new(j / w, j % w)));
                    for l in 0..c {
                        m[[i, l]] += k * flat[[j, l]];
                    }
                }
            }
            m.into_shape_with_order((h, w, c)).expect("pixel count")
        },
        None,
    )
}

/// Seven log-spaced values per parameter over [1e-3, 1e3].
pub fn default_lattice() -> Vec<PairwiseParams> {
    let values: Vec<f64> = (-3..=3).map(|e| 10f64.powi(e)).collect();
    let mut out = Vec::with_capacity(49);
    for &w1 in &values {
        for &theta in &values {
            out.push(PairwiseParams { w1, theta });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfTuning {
    pub best: PairwiseParams,
    pub best_accuracy: f64,
    /// Validation accuracy for every lattice point, in lattice order.
    pub scores: Vec<(PairwiseParams, f64)>,
}

fn val_accuracy(labels: &LabelMap, truth: &LabelMap, val: &[PixelCoord]) -> f64 {
    let hits = val.iter().filter(|&&p| labels.get(p) == truth.get(p)).count();
    hits as f64 / val.len() as f64
}

/// Grid search over `lattice` scoring mean-field MAP labels on validation
/// pixels; ties go to the smaller `w1`, then the smaller `theta`.
pub fn tune_crf(
    unary: &UnaryField,
    truth: &LabelMap,
    val: &[PixelCoord],
    lattice: &[PairwiseParams],
    iterations: usize,
) -> Result<CrfTuning> {
    if val.is_empty() {
        return Err(Error::EmptyInput("no validation pixels for CRF tuning".into()));
    }
    if lattice.is_empty() {
        return Err(Error::EmptyInput("empty CRF parameter lattice".into()));
    }
    if truth.height() != unary.height() || truth.width() != unary.width() {
        return Err(Error::Dimension("ground truth does not match unary field".into()));
    }
    if let Some(p) = val.iter().find(|p| p.row >= truth.height() || p.col >= truth.width() || truth.get(**p) == 0) {
        return Err(Error::InvalidArgument(format!("validation pixel {p:?} is unlabeled or out of bounds")));
    }

    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(lattice.len());
    let scored: Vec<Result<f64>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|wk| {
                scope.spawn(move || {
                    (wk..lattice.len())
                        .step_by(workers)
                        .map(|i| {
                            let model = EnergyModel::new(unary.clone(), lattice[i], Structure::Dense);
                            let q = meanfield_dense(&model, iterations)?;
                            Ok((i, val_accuracy(&super::map_from_marginals(&q), truth, val)))
                        })
                        .collect::<Vec<Result<(usize, f64)>>>()
                })
            })
            .collect();
        let mut all: Vec<Result<f64>> = (0..lattice.len()).map(|_| Ok(0.0)).collect();
        for h in handles {
            for r in h.join().expect("tuning thread panicked") {
                match r {
                    Ok((i, acc)) => all[i] = Ok(acc),
                    Err(e) => return vec![Err(e)],
                }
            }
        }
        all
    });
    let scores: Vec<(PairwiseParams, f64)> = lattice
        .iter()
        .copied()
        .zip(scored)
        .map(|(p, r)| r.map(|a| (p, a)))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (scores[a].0, scores[b].0);
        pa.w1.total_cmp(&pb.w1).then(pa.theta.total_cmp(&pb.theta))
    });
    let mut best = order[0];
    for &i in &order[1..] {
        if scores[i].1 > scores[best].1 {
            best = i;
        }
    }
    log::debug!(
        "crf tuning picked w1={} theta={} (val OA {:.4})",
        scores[best].0.w1,
        scores[best].0.theta,
        scores[best].1
    );
    Ok(CrfTuning {
        best: scores[best].0,
        best_accuracy: scores[best].1,
        scores,
    })
}
