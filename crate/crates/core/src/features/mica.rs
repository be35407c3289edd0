//! ICA filter banks learned from image patches (MICA features).
//!
//! The cube is first PCA-whitened along the spectral axis. Patches of
//! `f × f × B'` whitened values are then whitened again to `K` dimensions and
//! unmixed with FastICA; the resulting `K` filters are expressed in patch
//! space and correlated with the whitened cube. Features are the absolute
//! filter responses, without pooling.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::shifted;
use super::ica::{fast_ica, IcaOptions, Whitening};
use super::{mirror, FeatureCube};
use crate::datacube::SpectralCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MicaParams {
    pub num_filters: usize,
    /// Odd receptive-field size `f`.
    pub receptive_field: usize,
    /// Spectral PCA components kept before patch sampling (clamped to the band count).
    pub spectral_components: usize,
    pub n_patches: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MicaParams {
    fn default() -> Self {
        Self {
            num_filters: 32,
            receptive_field: 5,
            spectral_components: 10,
            n_patches: 10_000,
            tol: 1e-4,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    /// Per-pixel spectral whitening applied before filtering (B' × B).
    pub spectral: Whitening,
    /// K × (f·f·B'), columns ordered (row offset, col offset, whitened band).
    pub filters: Array2<f64>,
    pub receptive_field: usize,
    pub ica_converged: bool,
    pub ica_iterations: usize,
}

impl FilterBank {
    pub fn num_filters(&self) -> usize {
        self.filters.nrows()
    }

    pub fn bands(&self) -> usize {
        self.spectral.in_dim()
    }

    pub fn whitened_bands(&self) -> usize {
        self.spectral.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.receptive_field;
        if f % 2 == 0 {
            return Err(Error::InvalidArgument(format!("receptive field {f} is not odd")));
        }
        if self.filters.nrows() == 0 {
            return Err(Error::InvalidArgument("filter bank is empty".into()));
        }
        if self.filters.ncols() != f * f * self.whitened_bands() {
            return Err(Error::Dimension(format!(
                "filters have {} taps, expected {}",
                self.filters.ncols(),
                f * f * self.whitened_bands()
            )));
        }
        if self.filters.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite filter weights".into()));
        }
        Ok(())
    }

    /// Spectrally whitened cube (H × W × B').
    pub fn whiten(&self, cube: &SpectralCube) -> Result<Array3<f64>> {
        if cube.bands() != self.bands() {
            return Err(Error::Dimension(format!(
                "filter bank expects {} bands, cube has {}",
                self.bands(),
                cube.bands()
            )));
        }
        let z = self.spectral.apply(&cube.pixel_matrix().view());
        Ok(z
            .into_shape_with_order((cube.height(), cube.width(), self.whitened_bands()))
            .expect("pixel count preserved"))
    }
}

pub fn learn_ica_filters(cube: &SpectralCube, params: &MicaParams, seed: u64) -> Result<FilterBank> {
    let f = params.receptive_field;
    if f == 0 || f % 2 == 0 {
        return Err(Error::InvalidArgument(format!("receptive field {f} must be odd")));
    }
    if params.num_filters == 0 {
        return Err(Error::InvalidArgument("need at least one filter".into()));
    }
    let bw = params.spectral_components.min(cube.bands()).max(1);
    let taps = f * f * bw;
    if params.num_filters > taps {
        return Err(Error::Dimension(format!(
            "{} filters exceed the {taps}-dimensional whitened patch space",
            params.num_filters
        )));
    }
    if params.n_patches <= params.num_filters {
        return Err(Error::InvalidArgument(format!(
            "{} patches are too few for {} filters",
            params.n_patches, params.num_filters
        )));
    }

    let spectral = Whitening::fit(&cube.pixel_matrix().view(), bw)?;
    let (h, w) = (cube.height(), cube.width());
    let white = spectral
        .apply(&cube.pixel_matrix().view())
        .into_shape_with_order((h, w, bw))
        .expect("pixel count preserved");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (f / 2) as isize;
    let mut patches = Array2::<f64>::zeros((params.n_patches, taps));
    for mut row in patches.rows_mut() {
        let r = rng.gen_range(0..h) as isize;
        let c = rng.gen_range(0..w) as isize;
        let mut i = 0;
        for dr in -half..=half {
            for dc in -half..=half {
                let px = white.slice(s![mirror(r + dr, h), mirror(c + dc, w), ..]);
                for &v in px.iter() {
                    row[i] = v;
                    i += 1;
                }
            }
        }
    }

    let patch_white = Whitening::fit(&patches.view(), params.num_filters)?;
    let z = patch_white.apply(&patches.view());
    let ica = fast_ica(
        &z.view(),
        &IcaOptions {
            tol: params.tol,
            max_iter: params.max_iter,
            seed: seed ^ 0x9E37_79B9_7F4A_7C15,
        },
    )?;
    let filters = ica.unmixing.dot(&patch_white.matrix);
    let bank = FilterBank {
        spectral,
        filters,
        receptive_field: f,
        ica_converged: ica.converged,
        ica_iterations: ica.iterations,
    };
    bank.validate()?;
    Ok(bank)
}

/// Linear filter responses of the spectrally whitened cube (mirror-padded borders).
pub fn extract_mica_responses(cube: &SpectralCube, bank: &FilterBank) -> Result<FeatureCube> {
    bank.validate()?;
    let white = bank.whiten(cube)?;
    let (h, w, bw) = white.dim();
    let k = bank.num_filters();
    let f = bank.receptive_field;
    let half = (f / 2) as isize;
    let x = white.insert_axis(Axis(0));
    let x: Array4<f64> = x.as_standard_layout().into_owned();
    let mut out = Array2::<f64>::zeros((h * w, k));
    for o in 0..f * f {
        let dr = (o / f) as isize - half;
        let dc = (o % f) as isize - half;
        let sx = shifted(&x, dr, dc);
        let block = bank.filters.slice(s![.., o * bw..(o + 1) * bw]);
        ndarray::linalg::general_mat_mul(1.0, &sx, &block.t(), 1.0, &mut out);
    }
    FeatureCube::from_pixel_matrix(out, h, w)
}

/// Absolute filter responses.
pub fn extract_mica(cube: &SpectralCube, bank: &FilterBank) -> Result<FeatureCube> {
    let lin = extract_mica_responses(cube, bank)?;
    FeatureCube::new(lin.values().mapv(f64::abs))
}
