//! Per-pixel MLP classifier: ReLU hidden layers, softmax output, mean
//! cross-entropy with L2 weight decay, trained with Nadam.
//!
//! An optional auxiliary reconstruction head (a linear decoder from the
//! first hidden layer back to the input) can add an unsupervised term,
//! weighted by [`MlpSpec::aux_weight`]; it is off by default.

mod train;

pub use crate::optim::NadamState;
pub use train::{cross_validate, default_grid, train, EpochRecord, TrainOptions};

use std::fs::File;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datacube::ProbabilityField;
use crate::error::{Error, Result};
use crate::features::FeatureCube;

pub const HIDDEN_LAYER_RANGE: (usize, usize) = (2, 10);
pub const UNIT_RANGE: (usize, usize) = (64, 3000);

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_layers: usize,
    pub units_per_layer: usize,
    pub weight_decay: f64,
    /// Weight of the auxiliary input-reconstruction loss; 0 disables the head.
    pub aux_weight: f64,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        hidden_layers: usize,
        units_per_layer: usize,
        weight_decay: f64,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            num_classes,
            hidden_layers,
            units_per_layer,
            weight_decay,
            aux_weight: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = HIDDEN_LAYER_RANGE;
        if !(lo..=hi).contains(&self.hidden_layers) {
            return Err(Error::OutOfRange(format!(
                "hidden layers {} outside [{lo}, {hi}]",
                self.hidden_layers
            )));
        }
        let (lo, hi) = UNIT_RANGE;
        if !(lo..=hi).contains(&self.units_per_layer) {
            return Err(Error::OutOfRange(format!(
                "units per layer {} outside [{lo}, {hi}]",
                self.units_per_layer
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.aux_weight >= 0.0) {
            return Err(Error::InvalidArgument("weight decay and aux weight must be non-negative".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of each dense layer, output layer last.
    fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(self.units_per_layer).take(self.hidden_layers));
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn has_aux(&self) -> bool {
        self.aux_weight > 0.0
    }

    pub fn num_params(&self) -> usize {
        let dense: usize = self.dense_shapes().iter().map(|(i, o)| i * o + o).sum();
        let aux = if self.has_aux() {
            self.units_per_layer * self.input_dim + self.input_dim
        } else {
            0
        };
        dense + aux
    }
}

/// Offsets of (weight, bias) blocks in the flat parameter vector.
#[derive(Debug, Clone)]
struct Block {
    w: usize,
    rows: usize,
    cols: usize,
    b: usize,
}

fn blocks(spec: &MlpSpec) -> (Vec<Block>, Option<Block>) {
    let mut off = 0;
    let mut take = |rows: usize, cols: usize| {
        let blk = Block {
            w: off,
            rows,
            cols,
            b: off + rows * cols,
        };
        off += rows * cols + cols;
        blk
    };
    let dense: Vec<Block> = spec.dense_shapes().into_iter().map(|(i, o)| take(i, o)).collect();
    let aux = spec
        .has_aux()
        .then(|| take(spec.units_per_layer, spec.input_dim));
    (dense, aux)
}

impl Block {
    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.w..self.w + self.rows * self.cols])
            .expect("block layout")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.b..self.b + self.cols])
    }

    fn add_grad(&self, g: &mut [f64], dw: &Array2<f64>, db: &ndarray::Array1<f64>) {
        for (d, v) in g[self.w..self.w + self.rows * self.cols].iter_mut().zip(dw.iter()) {
            *d += v;
        }
        for (d, v) in g[self.b..self.b + self.cols].iter_mut().zip(db.iter()) {
            *d += v;
        }
    }
}

/// A parameterized network; the result of [`train`] when `history` is filled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Loss value and flat gradient for one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

impl TrainedMlp {
    /// Fan-in scaled uniform initialization, deterministic per seed.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; spec.num_params()];
        let (dense, aux) = blocks(&spec);
        let n_dense = dense.len();
        for (i, blk) in dense.iter().chain(aux.iter()).enumerate() {
            let gain = if i + 1 < n_dense { 6.0 } else { 3.0 };
            let limit = (gain / blk.rows as f64).sqrt();
            for v in &mut params[blk.w..blk.w + blk.rows * blk.cols] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self {
            spec,
            params,
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            params: vec![0.0; spec.num_params()],
            spec,
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    /// Output-layer bias, for constructing test fixtures.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let (dense, _) = blocks(&self.spec);
        let last = dense.last().expect("at least one layer").clone();
        &mut self.params[last.b..last.b + last.cols]
    }

    fn check_dim(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Class probabilities for each row of `x`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        Ok(forward_with(&self.spec, &self.params, x))
    }

    /// Mean cross-entropy (over rows with label ≥ 1), plus `(weight_decay/2)·‖W‖²`,
    /// plus the auxiliary reconstruction term, and its gradient.
    ///
    /// Labels are 1-based; rows labeled 0 only feed the auxiliary term.
    pub fn gradients(&self, x: &ArrayView2<f64>, labels: &[u16]) -> Result<Gradients> {
        self.check_dim(x)?;
        gradients_with(&self.spec, &self.params, x, labels)
    }

    /// Mean cross-entropy of labeled rows, without regularization.
    pub fn cross_entropy(&self, x: &ArrayView2<f64>, labels: &[u16]) -> Result<f64> {
        let p = self.forward(x)?;
        mean_cross_entropy(&p, labels)
    }

    /// Per-pixel class probabilities for a whole feature cube.
    pub fn predict_proba(&self, features: &FeatureCube) -> Result<ProbabilityField> {
        predict_proba(self, features)
    }

    /// Training history as CSV: `epoch,train_loss,val_loss,lr`.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let err = |e: csv::Error| Error::MalformedFile(e.to_string());
        w.write_record(["epoch", "train_loss", "val_loss", "lr"]).map_err(err)?;
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.10}", r.train_loss),
                format!("{:.10}", r.val_loss),
                format!("{:e}", r.lr),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean_cross_entropy(p: &Array2<f64>, labels: &[u16]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, &l) in p.rows().into_iter().zip(labels) {
        if l == 0 {
            continue;
        }
        sum -= row[l as usize - 1].max(1e-300).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("no labeled rows".into()));
    }
    Ok(sum / n as f64)
}

pub(crate) fn forward_with(spec: &MlpSpec, params: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
    let (dense, _) = blocks(spec);
    let last = dense.len() - 1;
    let mut h = x.to_owned();
    for (i, blk) in dense.iter().enumerate() {
        let mut z = h.dot(&blk.weight(params)) + blk.bias(params);
        if i < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        h = z;
    }
    softmax_rows(&mut h);
    h
}

pub(crate) fn gradients_with(
    spec: &MlpSpec,
    params: &[f64],
    x: &ArrayView2<f64>,
    labels: &[u16],
) -> Result<Gradients> {
    if labels.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > spec.num_classes) {
        return Err(Error::OutOfRange(format!("label {bad} outside [1, {}]", spec.num_classes)));
    }
    let (dense, aux) = blocks(spec);
    let last = dense.len() - 1;
    let n_rows = x.nrows();
    let n_labeled = labels.iter().filter(|&&l| l > 0).count();

    // Forward, keeping layer inputs.
    let mut inputs = Vec::with_capacity(dense.len());
    let mut h = x.to_owned();
    for (i, blk) in dense.iter().enumerate() {
        let mut z = h.dot(&blk.weight(params)) + blk.bias(params);
        if i < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        inputs.push(h);
        h = z;
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite activation in forward pass".into()));
    }
    let mut probs = h;
    softmax_rows(&mut probs);

    let mut loss = 0.0;
    let mut dz = Array2::<f64>::zeros(probs.raw_dim());
    if n_labeled > 0 {
        let inv = 1.0 / n_labeled as f64;
        for ((mut drow, prow), &l) in dz.rows_mut().into_iter().zip(probs.rows()).zip(labels) {
            if l == 0 {
                continue;
            }
            let k = l as usize - 1;
            loss -= prow[k].max(1e-300).ln() * inv;
            drow.assign(&(&prow * inv));
            drow[k] -= inv;
        }
    }

    let mut grad = vec![0.0; params.len()];
    let wd = spec.weight_decay;
    let mut reg = 0.0;
    for blk in dense.iter().chain(aux.iter()) {
        let w = blk.weight(params);
        reg += w.iter().map(|v| v * v).sum::<f64>();
    }
    loss += 0.5 * wd * reg;

    // Auxiliary reconstruction from the first hidden layer.
    let mut aux_dh1 = None;
    if let Some(ablk) = &aux {
        let h1 = &inputs[1];
        let recon = h1.dot(&ablk.weight(params)) + ablk.bias(params);
        let diff = recon - x;
        let n = (n_rows * spec.input_dim) as f64;
        loss += spec.aux_weight * diff.iter().map(|d| d * d).sum::<f64>() / n;
        let dr = diff * (2.0 * spec.aux_weight / n);
        let dw = h1.t().dot(&dr) + &ablk.weight(params) * wd;
        ablk.add_grad(&mut grad, &dw, &dr.sum_axis(Axis(0)));
        aux_dh1 = Some(dr.dot(&ablk.weight(params).t()));
    }

    for i in (0..dense.len()).rev() {
        let blk = &dense[i];
        let a = &inputs[i];
        let dw = a.t().dot(&dz) + &blk.weight(params) * wd;
        blk.add_grad(&mut grad, &dw, &dz.sum_axis(Axis(0)));
        if i == 0 {
            break;
        }
        let mut da = dz.dot(&blk.weight(params).t());
        if i == 1 {
            if let Some(extra) = aux_dh1.take() {
                da += &extra;
            }
        }
        // inputs[i] is the ReLU output of layer i-1.
        da.zip_mut_with(a, |g, &act| {
            if act <= 0.0 {
                *g = 0.0
            }
        });
        dz = da;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(Gradients { loss, grad })
}

const PREDICT_CHUNK: usize = 4096;

/// Probabilities for every pixel (labeled or not), evaluated in row chunks.
pub fn predict_proba(model: &TrainedMlp, features: &FeatureCube) -> Result<ProbabilityField> {
    let x = features.pixel_matrix();
    model.check_dim(&x.view())?;
    let (h, w) = (features.height(), features.width());
    let c = model.spec.num_classes;
    let mut out = Array2::<f64>::zeros((h * w, c));
    let mut start = 0;
    while start < h * w {
        let end = (start + PREDICT_CHUNK).min(h * w);
        let p = forward_with(&model.spec, &model.params, &x.slice(s![start..end, ..]));
        out.slice_mut(s![start..end, ..]).assign(&p);
        start = end;
    }
    let values: Array3<f64> = out.into_shape_with_order((h, w, c)).expect("pixel count");
    ProbabilityField::new(values)
}
