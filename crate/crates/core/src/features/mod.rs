//! Per-pixel feature representations: standardization, ICA filter banks
//! (MICA) and a stacked multi-loss convolutional autoencoder (SMCAE).

mod conv;
mod ica;
mod mica;
mod smcae;

pub use ica::{fast_ica, IcaOptions, IcaResult, Whitening};
pub use mica::{extract_mica, extract_mica_responses, learn_ica_filters, FilterBank, MicaParams};
pub use smcae::{
    encode_smcae, reconstruction_errors, train_smcae, Activation, EncodeMode, SmcaeLoss, SmcaeModel,
    SmcaeSpec,
};

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::datacube::SpectralCube;
use crate::error::{Error, Result};

/// H×W×D per-pixel feature raster.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    values: Array3<f64>,
}

impl FeatureCube {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, d) = values.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Dimension(format!("feature cube {h}x{w}x{d} is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature cube contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Raw spectra as features.
    pub fn from_cube(cube: &SpectralCube) -> Self {
        Self {
            values: cube.values().clone(),
        }
    }

    /// Rebuilds an H×W×D cube from an (H·W)×D pixel matrix in raster order.
    pub fn from_pixel_matrix(m: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let d = m.ncols();
        let values = m
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((height, width, d))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(values)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn pixel_matrix(&self) -> Array2<f64> {
        let (h, w, d) = self.values.dim();
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, d))
            .expect("standard layout reshape")
    }
}

/// Per-feature zero-mean/unit-variance scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Array1<f64>,
    pub stds: Array1<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_STD_EPSILON: f64 = 1e-8;

impl Standardizer {
    /// Fits means and population standard deviations over the rows of `x`.
    pub fn fit(x: &ArrayView2<f64>) -> Result<Self> {
        Self::fit_with_epsilon(x, DEFAULT_STD_EPSILON)
    }

    pub fn fit_with_epsilon(x: &ArrayView2<f64>, epsilon: f64) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::EmptyInput("cannot fit a standardizer on no data".into()));
        }
        if x.nrows() < 2 {
            return Err(Error::InvalidArgument(
                "standardizer needs at least 2 samples".into(),
            ));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        let means = x.mean_axis(Axis(0)).expect("rows checked");
        let stds = x.std_axis(Axis(0), 0.0);
        Ok(Self {
            means,
            stds,
            epsilon,
        })
    }

    pub fn fit_features(f: &FeatureCube) -> Result<Self> {
        Self::fit(&f.pixel_matrix().view())
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Scales rows of `x` in place; channels with std below epsilon become 0.
    pub fn apply_rows(&self, x: &mut Array2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} features, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        for mut row in x.rows_mut() {
            for ((v, &m), &s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
                *v = if s < self.epsilon { 0.0 } else { (*v - m) / s };
            }
        }
        Ok(())
    }

    pub fn apply(&self, f: &FeatureCube) -> Result<FeatureCube> {
        let mut m = f.pixel_matrix();
        self.apply_rows(&mut m)?;
        FeatureCube::from_pixel_matrix(m, f.height(), f.width())
    }
}

/// Symmetric (edge-including) mirror index for borders of any width.
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}
