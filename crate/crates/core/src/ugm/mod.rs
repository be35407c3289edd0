//! Pairwise energy models over pixel labels and their inference.
//!
//! The energy of a labeling is `Σ_i E_i(y_i) + Σ_(i,j) E_ij(y_i, y_j)` where the
//! unary term is the negative log of the classifier probability and the
//! pairwise term is a spatial Gaussian Potts penalty
//! `w1·exp(−‖p_i − p_j‖² / (2θ²))` charged when the labels differ. Edges are
//! either 4-neighbor pairs (`Grid4`) or all pixel pairs (`Dense`).

mod grid;
mod maxflow;
mod meanfield;

pub use grid::{alpha_expansion, alpha_expansion_traced, icm};
pub use maxflow::FlowGraph;
pub use meanfield::{
    default_lattice, gaussian_blur, meanfield_dense, meanfield_dense_direct, meanfield_dense_traced,
    meanfield_dense_with_radius, truncation_radius, tune_crf, CrfTuning, MEANFIELD_ITERATIONS,
};

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::datacube::{LabelMap, PixelCoord, ProbabilityField};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROBABILITY_CLAMP: f64 = 1e-12;

/// Per-pixel, per-class unary energies (H×W×C); `[r, c, k]` is class `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    energies: Array3<f64>,
}

impl UnaryField {
    pub fn new(energies: Array3<f64>) -> Result<Self> {
        let (h, w, c) = energies.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Dimension(format!("unary field {h}x{w}x{c} is empty")));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric("unary energies must be finite".into()));
        }
        Ok(Self { energies })
    }

    pub fn height(&self) -> usize {
        self.energies.dim().0
    }

    pub fn width(&self) -> usize {
        self.energies.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.energies.dim().2
    }

    pub fn energies(&self) -> &Array3<f64> {
        &self.energies
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Lowest-energy class per pixel (ties to the lowest class index).
    pub fn argmin_labels(&self) -> LabelMap {
        let labels = self.energies.map_axis(Axis(2), |e| {
            let mut best = 0;
            for k in 1..e.len() {
                if e[k] < e[best] {
                    best = k;
                }
            }
            best as u16 + 1
        });
        LabelMap::new(labels, self.num_classes()).expect("labels within class range")
    }
}

/// `E_i(c) = −ln(max(P_i(c), clamp))`.
pub fn unary_from_proba(field: &ProbabilityField, clamp: f64) -> UnaryField {
    let energies = field.values().mapv(|p| -p.max(clamp).ln());
    UnaryField { energies }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseParams {
    pub w1: f64,
    pub theta: f64,
}

impl PairwiseParams {
    pub fn new(w1: f64, theta: f64) -> Result<Self> {
        if !(w1 >= 0.0) || !w1.is_finite() {
            return Err(Error::InvalidArgument(format!("w1 must be non-negative, got {w1}")));
        }
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::InvalidArgument(format!("theta must be positive, got {theta}")));
        }
        Ok(Self { w1, theta })
    }

    /// Unnormalized Gaussian kernel at squared distance `d2`.
    pub fn kernel(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.theta * self.theta)).exp()
    }

    /// Potts weight between 4-neighbors (unit distance).
    pub fn grid_weight(&self) -> f64 {
        self.w1 * self.kernel(1.0)
    }
}

pub fn pairwise_energy(pi: PixelCoord, pj: PixelCoord, yi: u16, yj: u16, params: &PairwiseParams) -> f64 {
    if yi == yj {
        0.0
    } else {
        params.w1 * params.kernel(pi.dist2(&pj))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Grid4,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub unary: UnaryField,
    pub pairwise: PairwiseParams,
    pub structure: Structure,
}

impl EnergyModel {
    pub fn new(unary: UnaryField, pairwise: PairwiseParams, structure: Structure) -> Self {
        Self {
            unary,
            pairwise,
            structure,
        }
    }

    pub(crate) fn require(&self, structure: Structure) -> Result<()> {
        if self.structure != structure {
            return Err(Error::InvalidArgument(format!(
                "operation needs a {structure:?} model, got {:?}",
                self.structure
            )));
        }
        Ok(())
    }

    pub(crate) fn check_labeling(&self, labeling: &LabelMap) -> Result<()> {
        let u = &self.unary;
        if labeling.height() != u.height() || labeling.width() != u.width() {
            return Err(Error::Dimension(format!(
                "labeling {}x{} does not match model {}x{}",
                labeling.height(),
                labeling.width(),
                u.height(),
                u.width()
            )));
        }
        let c = u.num_classes();
        if let Some(bad) = labeling.labels().iter().find(|&&l| l == 0 || l as usize > c) {
            return Err(Error::InvalidLabeling(format!("label {bad} outside [1, {c}]")));
        }
        Ok(())
    }

    /// Energy of `labeling`, counting each undirected edge once.
    pub fn total_energy(&self, labeling: &LabelMap) -> Result<f64> {
        total_energy(labeling, self)
    }
}

fn unary_sum(labels: &Array2<u16>, unary: &UnaryField) -> f64 {
    labels
        .indexed_iter()
        .map(|((r, c), &l)| unary.energies[[r, c, l as usize - 1]])
        .sum()
}

pub fn total_energy(labeling: &LabelMap, model: &EnergyModel) -> Result<f64> {
    model.check_labeling(labeling)?;
    let labels = labeling.labels();
    let mut e = unary_sum(labels, &model.unary);
    let (h, w) = labels.dim();
    match model.structure {
        Structure::Grid4 => {
            let wgt = model.pairwise.grid_weight();
            let mut cuts = 0usize;
            for r in 0..h {
                for c in 0..w {
                    if c + 1 < w && labels[[r, c]] != labels[[r, c + 1]] {
                        cuts += 1;
                    }
                    if r + 1 < h && labels[[r, c]] != labels[[r + 1, c]] {
                        cuts += 1;
                    }
                }
            }
            e += wgt * cuts as f64;
        }
        Structure::Dense => {
            // Σ_{i<j} k_ij [y_i ≠ y_j] = ½ Σ_i (Σ_{j≠i} k_ij − Σ_{j≠i, y_j = y_i} k_ij),
            // with both inner sums from an untruncated separable blur.
            let c = model.unary.num_classes();
            let mut onehot = Array3::<f64>::zeros((h, w, c + 1));
            for ((r, col), &l) in labels.indexed_iter() {
                onehot[[r, col, l as usize - 1]] = 1.0;
                onehot[[r, col, c]] = 1.0;
            }
            let radius = (h.max(w)).saturating_sub(1);
            let blurred = gaussian_blur(&onehot, model.pairwise.theta, radius);
            let mut s = 0.0;
            for ((r, col), &l) in labels.indexed_iter() {
                let all = blurred[[r, col, c]] - 1.0;
                let same = blurred[[r, col, l as usize - 1]] - 1.0;
                s += all - same;
            }
            e += 0.5 * model.pairwise.w1 * s;
        }
    }
    Ok(e)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn map_from_marginals(q: &ProbabilityField) -> LabelMap {
    let labels = q.values().map_axis(Axis(2), |p| {
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best as u16 + 1
    });
    LabelMap::new(labels, q.num_classes()).expect("labels within class range")
}

/// Writes a one-column numeric trace (`step,value`) for debugging inference.
pub fn write_trace_csv(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |e: csv::Error| Error::MalformedFile(e.to_string());
    w.write_record(["step", header]).map_err(err)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.12}")]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
