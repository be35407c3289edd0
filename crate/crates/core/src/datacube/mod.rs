//! Hyperspectral rasters, ground-truth label maps and low-shot splits.
//!
//! Cubes are stored in (row, col, band) order in working precision (`f64`)
//! regardless of the on-disk interleave.

mod envi;
mod split;
mod truth;

pub use envi::{read_envi, read_envi_header, write_envi, DataType, EnviHeader, Interleave};
pub use split::{sample_split, Split};
pub use truth::{find_data_file, read_labels, read_pgm_labels, write_envi_labels, write_pgm_labels};

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Row/column pixel position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Squared Euclidean distance between pixel positions.
    pub fn dist2(&self, other: &PixelCoord) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }
}

/// H×W×B raster with one wavelength center (nm) per band.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    values: Array3<f64>,
    wavelengths: Vec<f64>,
}

impl SpectralCube {
    pub fn new(values: Array3<f64>, wavelengths: Vec<f64>) -> Result<Self> {
        let (h, w, b) = values.dim();
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::Dimension(format!(
                "cube dimensions must be positive, got {h}x{w}x{b}"
            )));
        }
        if wavelengths.len() != b {
            return Err(Error::Dimension(format!(
                "{} wavelengths for {b} bands",
                wavelengths.len()
            )));
        }
        if !is_strictly_increasing(&wavelengths) {
            return Err(Error::InvalidArgument(
                "wavelengths must be finite and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cube contains non-finite values".into()));
        }
        Ok(Self {
            values,
            wavelengths,
        })
    }

    /// Cube whose wavelengths are the band indices 0, 1, 2, ...
    pub fn with_index_wavelengths(values: Array3<f64>) -> Result<Self> {
        let b = values.dim().2;
        Self::new(values, (0..b).map(|i| i as f64).collect())
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn bands(&self) -> usize {
        self.values.dim().2
    }

    pub fn value(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[[row, col, band]]
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn spectrum(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![row, col, ..])
    }

    /// Pixels as rows of an (H·W)×B matrix in raster order.
    pub fn pixel_matrix(&self) -> Array2<f64> {
        let (h, w, b) = self.values.dim();
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, b))
            .expect("standard layout reshape")
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

fn is_strictly_increasing(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite()) && xs.windows(2).all(|w| w[0] < w[1])
}

/// Integer class raster: 0 is unlabeled, 1..=C are classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array2<u16>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(labels: Array2<u16>, num_classes: usize) -> Result<Self> {
        let (h, w) = labels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Dimension("label map must be non-empty".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::OutOfRange(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    /// Uses the largest label present as the class count.
    pub fn from_labels(labels: Array2<u16>) -> Result<Self> {
        let c = labels.iter().copied().max().unwrap_or(0) as usize;
        Self::new(labels, c)
    }

    /// Ground truth must contain at least one labeled pixel.
    pub fn validate_as_truth(&self) -> Result<()> {
        if self.labels.iter().all(|&l| l == 0) {
            return Err(Error::EmptyInput("ground truth has no labeled pixels".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, p: PixelCoord) -> u16 {
        self.labels[[p.row, p.col]]
    }

    pub fn labels(&self) -> &Array2<u16> {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut Array2<u16> {
        &mut self.labels
    }

    /// Labeled pixel coordinates for each class, in raster order. Index 0 is class 1.
    pub fn pixels_by_class(&self) -> Vec<Vec<PixelCoord>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for ((r, c), &l) in self.labels.indexed_iter() {
            if l > 0 {
                out[l as usize - 1].push(PixelCoord::new(r, c));
            }
        }
        out
    }
}

/// Per-pixel class probabilities (H×W×C); entry `[r, c, k]` is class `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    values: Array3<f64>,
}

/// Tolerance on per-pixel probability sums.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

impl ProbabilityField {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Dimension(format!("probability field {h}x{w}x{c} is empty")));
        }
        for lane in values.lanes(Axis(2)) {
            if lane.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Numeric("probabilities must be finite and non-negative".into()));
            }
            let s: f64 = lane.sum();
            if (s - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::Numeric(format!("pixel probabilities sum to {s}")));
            }
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn pixel(&self, p: PixelCoord) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![p.row, p.col, ..])
    }
}

/// Piecewise-linear resampling of every pixel spectrum onto `target` wavelengths.
///
/// No extrapolation: every target must lie within the source wavelength range.
pub fn resample_spectra(cube: &SpectralCube, target: &[f64]) -> Result<SpectralCube> {
    if target.is_empty() {
        return Err(Error::EmptyInput("no target wavelengths".into()));
    }
    if !is_strictly_increasing(target) {
        return Err(Error::InvalidArgument(
            "target wavelengths must be strictly increasing".into(),
        ));
    }
    let src = cube.wavelengths();
    let (lo, hi) = (src[0], src[src.len() - 1]);
    if let Some(&t) = target.iter().find(|&&t| t < lo || t > hi) {
        return Err(Error::OutOfRange(format!(
            "target wavelength {t} nm outside source range [{lo}, {hi}] nm"
        )));
    }

    // (left band, right band, weight on right) per target.
    let stencil: Vec<(usize, usize, f64)> = target
        .iter()
        .map(|&t| {
            let k = src.partition_point(|&s| s < t);
            if k < src.len() && src[k] == t {
                (k, k, 0.0)
            } else {
                let (a, b) = (k - 1, k);
                (a, b, (t - src[a]) / (src[b] - src[a]))
            }
        })
        .collect();

    let (h, w, _) = cube.values().dim();
    let mut out = Array3::<f64>::zeros((h, w, target.len()));
    for (mut dst, spec) in out
        .lanes_mut(Axis(2))
        .into_iter()
        .zip(cube.values().lanes(Axis(2)))
    {
        for (o, &(a, b, t)) in dst.iter_mut().zip(&stencil) {
            *o = if a == b {
                spec[a]
            } else {
                (1.0 - t) * spec[a] + t * spec[b]
            };
        }
    }
    SpectralCube::new(out, target.to_vec())
}
