//! PCA whitening and symmetric FastICA with the log-cosh contrast.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{mean_and_covariance, sym_eigen, symmetric_decorrelation};

/// Affine map `x ↦ matrix · (x − mean)` onto `k` decorrelated unit-variance axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub mean: Array1<f64>,
    /// k × d
    pub matrix: Array2<f64>,
    /// Eigenvalues of the retained components.
    pub variances: Vec<f64>,
}

/// Components whose variance falls below this fraction of the largest are zeroed.
const RANK_TOLERANCE: f64 = 1e-12;

impl Whitening {
    /// Fits PCA whitening on the rows of `x`, keeping the top `k` components.
    pub fn fit(x: &ArrayView2<f64>, k: usize) -> Result<Self> {
        let d = x.ncols();
        if x.nrows() < 2 {
            return Err(Error::EmptyInput("whitening needs at least 2 samples".into()));
        }
        if k == 0 || k > d {
            return Err(Error::Dimension(format!(
                "cannot keep {k} whitened components of {d}-dimensional data"
            )));
        }
        let (mean, cov) = mean_and_covariance(x);
        let (vals, vecs) = sym_eigen(&cov.view());
        let top = vals[0].max(0.0);
        let mut matrix = Array2::zeros((k, d));
        for i in 0..k {
            if vals[i] > RANK_TOLERANCE * top && vals[i] > 0.0 {
                let s = 1.0 / vals[i].sqrt();
                for j in 0..d {
                    matrix[[i, j]] = vecs[[j, i]] * s;
                }
            }
        }
        Ok(Self {
            mean,
            matrix,
            variances: vals[..k].to_vec(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of non-degenerate output components.
    pub fn rank(&self) -> usize {
        self.matrix
            .rows()
            .into_iter()
            .filter(|r| r.iter().any(|&v| v != 0.0))
            .count()
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        (x - &self.mean).dot(&self.matrix.t())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcaResult {
    /// Orthogonal K×K unmixing matrix; sources are `z · unmixingᵀ`.
    pub unmixing: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Symmetric FastICA on already-whitened rows `z` (n × K).
///
/// Non-convergence is reported through `converged` rather than as an error.
pub fn fast_ica(z: &ArrayView2<f64>, opts: &IcaOptions) -> Result<IcaResult> {
    let (n, k) = z.dim();
    if n < 2 || k == 0 {
        return Err(Error::EmptyInput("FastICA needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = Array2::from_shape_simple_fn((k, k), || StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);
    let inv_n = 1.0 / n as f64;

    for it in 1..=opts.max_iter {
        let y = z.dot(&w.t());
        let g = y.mapv(f64::tanh);
        let g_prime_mean: Array1<f64> = g.mapv(|t| 1.0 - t * t).mean_axis(Axis(0)).expect("n > 0");
        let mut w_new = g.t().dot(z) * inv_n;
        for i in 0..k {
            let gp = g_prime_mean[i];
            for j in 0..k {
                w_new[[i, j]] -= gp * w[[i, j]];
            }
        }
        let w_new = symmetric_decorrelation(&w_new);
        let lim = (0..k)
            .map(|i| {
                let d: f64 = w_new.row(i).dot(&w.row(i));
                (d.abs() - 1.0).abs()
            })
            .fold(0.0, f64::max);
        w = w_new;
        if lim < opts.tol {
            return Ok(IcaResult {
                unmixing: w,
                iterations: it,
                converged: true,
            });
        }
    }
    log::warn!("FastICA did not converge within {} iterations", opts.max_iter);
    Ok(IcaResult {
        unmixing: w,
        iterations: opts.max_iter,
        converged: false,
    })
}
