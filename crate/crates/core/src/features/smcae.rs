//! Stacked multi-loss convolutional autoencoder.
//!
//! Encoder layer ℓ convolves its input `p_ℓ` and applies the activation; a
//! 2× average pool feeds the next layer. The decoder mirrors the encoder:
//! decoder ℓ maps back to the channel count of `p_ℓ`, and its input is the
//! nearest-unpooled reconstruction produced one level deeper (the deepest
//! decoder reads the deepest encoder activation directly). Training
//! minimizes `Σ_ℓ λ_ℓ · MSE(r_ℓ, p_ℓ)`; with λ = (1, 0, …, 0) this is the
//! ordinary single-reconstruction stacked autoencoder.

use ndarray::{s, Array1, Array3, Array4, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{avgpool2, avgpool2_backward, conv_backward, conv_forward, unpool2, unpool2_backward};
use super::{mirror, FeatureCube, Standardizer};
use crate::datacube::SpectralCube;
use crate::error::{Error, Result};
use crate::optim::NadamState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(&self, a: &Array4<f64>) -> Array4<f64> {
        match self {
            Activation::Relu => a.mapv(|v| v.max(0.0)),
            Activation::Linear => a.clone(),
        }
    }

    fn backward(&self, a: &Array4<f64>, dz: Array4<f64>) -> Array4<f64> {
        match self {
            Activation::Relu => {
                let mut d = dz;
                d.zip_mut_with(a, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
                d
            }
            Activation::Linear => dz,
        }
    }
}

/// Which encoder activations form the per-pixel feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// All encoder layers, upsampled to full resolution and concatenated.
    Concat,
    /// Deepest encoder layer only.
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcaeSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub loss_weights: Vec<f64>,
    pub activation: Activation,
    pub encode_mode: EncodeMode,
    pub patch_size: usize,
    pub n_patches: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
}

impl Default for SmcaeSpec {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            kernel: 3,
            loss_weights: vec![1.0; 3],
            activation: Activation::Relu,
            encode_mode: EncodeMode::Concat,
            patch_size: 8,
            n_patches: 2048,
            batch_size: 16,
            epochs: 10,
            learning_rate: 1e-3,
            lr_decay: 1.0,
        }
    }
}

impl SmcaeSpec {
    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("encoder channel counts must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {} is not odd", self.kernel)));
        }
        if self.loss_weights.len() != self.depth() {
            return Err(Error::InvalidArgument(format!(
                "{} loss weights for depth {}",
                self.loss_weights.len(),
                self.depth()
            )));
        }
        if self.loss_weights.iter().any(|&l| !(l >= 0.0) || !l.is_finite())
            || !self.loss_weights.iter().any(|&l| l > 0.0)
        {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        if self.patch_size == 0 || self.n_patches == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("patch size, patch count and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and lr decay in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Input channel count of encoder layer ℓ (= output channels of decoder ℓ).
    fn in_channels(&self, bands: usize, l: usize) -> usize {
        if l == 0 {
            bands
        } else {
            self.channels[l - 1]
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.encode_mode {
            EncodeMode::Concat => self.channels.iter().sum(),
            EncodeMode::Final => *self.channels.last().expect("validated"),
        }
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// (weight offset, rows, cols, bias offset) for encoder then decoder, per layer.
    enc: Vec<(usize, usize, usize, usize)>,
    dec: Vec<(usize, usize, usize, usize)>,
    len: usize,
}

impl Layout {
    fn new(spec: &SmcaeSpec, bands: usize) -> Self {
        let k2 = spec.kernel * spec.kernel;
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| {
            let w = off;
            off += rows * cols;
            let b = off;
            off += cols;
            (w, rows, cols, b)
        };
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in 0..spec.depth() {
            let cin = spec.in_channels(bands, l);
            let c = spec.channels[l];
            enc.push(take(k2 * cin, c));
            dec.push(take(k2 * c, cin));
        }
        Self { enc, dec, len: off }
    }
}

fn weight_view(params: &[f64], e: (usize, usize, usize, usize)) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((e.1, e.2), &params[e.0..e.0 + e.1 * e.2]).expect("layout")
}

fn bias_view(params: &[f64], e: (usize, usize, usize, usize)) -> ArrayView1<'_, f64> {
    ArrayView1::from(&params[e.3..e.3 + e.2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcaeModel {
    pub spec: SmcaeSpec,
    pub bands: usize,
    /// Per-band input scaling fitted on the training image.
    pub input_scaler: Standardizer,
    pub params: Vec<f64>,
    /// Mean total loss per epoch.
    pub loss_history: Vec<f64>,
    /// Per-pair MSE on the last epoch's final batch.
    pub pair_losses: Vec<f64>,
}

struct Forward {
    p: Vec<Array4<f64>>,
    a: Vec<Array4<f64>>,
    z: Vec<Array4<f64>>,
    u: Vec<Array4<f64>>,
    r: Vec<Array4<f64>>,
}

/// Loss, per-pair MSE and flat gradient for one batch.
pub struct SmcaeLoss {
    pub total: f64,
    pub pairs: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl SmcaeModel {
    /// Randomly initialized (untrained) model.
    pub fn init(spec: SmcaeSpec, bands: usize, input_scaler: Standardizer, seed: u64) -> Result<Self> {
        spec.validate()?;
        if input_scaler.dim() != bands {
            return Err(Error::Dimension("input scaler does not match band count".into()));
        }
        let layout = Layout::new(&spec, bands);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.len];
        let relu = spec.activation == Activation::Relu;
        for (entries, gain) in [(&layout.enc, if relu { 6.0 } else { 3.0 }), (&layout.dec, 3.0)] {
            for &(w, rows, cols, _) in entries {
                let limit = (gain / rows as f64).sqrt();
                for v in &mut params[w..w + rows * cols] {
                    *v = rng.gen_range(-limit..limit);
                }
            }
        }
        Ok(Self {
            spec,
            bands,
            input_scaler,
            params,
            loss_history: Vec::new(),
            pair_losses: Vec::new(),
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.spec, self.bands)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn encode_forward(&self, params: &[f64], x: &Array4<f64>) -> (Vec<Array4<f64>>, Vec<Array4<f64>>, Vec<Array4<f64>>) {
        let layout = self.layout();
        let k = self.spec.kernel;
        let depth = self.spec.depth();
        let mut p = vec![x.clone()];
        let mut a = Vec::with_capacity(depth);
        let mut z = Vec::with_capacity(depth);
        for l in 0..depth {
            let e = layout.enc[l];
            let al = conv_forward(&p[l], weight_view(params, e), bias_view(params, e), k);
            let zl = self.spec.activation.apply(&al);
            if l + 1 < depth {
                p.push(avgpool2(&zl));
            }
            a.push(al);
            z.push(zl);
        }
        (p, a, z)
    }

    fn forward(&self, params: &[f64], x: &Array4<f64>) -> Forward {
        let layout = self.layout();
        let k = self.spec.kernel;
        let depth = self.spec.depth();
        let (p, a, z) = self.encode_forward(params, x);
        let mut u: Vec<Option<Array4<f64>>> = vec![None; depth];
        let mut r: Vec<Option<Array4<f64>>> = vec![None; depth];
        for l in (0..depth).rev() {
            let ul = if l + 1 == depth {
                z[l].clone()
            } else {
                let (_, h, w, _) = z[l].dim();
                unpool2(r[l + 1].as_ref().expect("deeper level done"), h, w)
            };
            let e = layout.dec[l];
            r[l] = Some(conv_forward(&ul, weight_view(params, e), bias_view(params, e), k));
            u[l] = Some(ul);
        }
        Forward {
            p,
            a,
            z,
            u: u.into_iter().map(|v| v.expect("filled")).collect(),
            r: r.into_iter().map(|v| v.expect("filled")).collect(),
        }
    }

    /// Weighted multi-pair reconstruction loss and its gradient with respect to
    /// every parameter, for a batch of already input-scaled patches (N×P×P×B).
    pub fn loss_and_gradient(&self, params: &[f64], x: &Array4<f64>) -> SmcaeLoss {
        let layout = self.layout();
        let k = self.spec.kernel;
        let depth = self.spec.depth();
        let f = self.forward(params, x);
        let mut grad = vec![0.0; layout.len];

        let mut pairs = Vec::with_capacity(depth);
        let mut dr = Vec::with_capacity(depth);
        let mut total = 0.0;
        for l in 0..depth {
            let diff = &f.r[l] - &f.p[l];
            let n = diff.len() as f64;
            let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
            let lam = self.spec.loss_weights[l];
            pairs.push(mse);
            total += lam * mse;
            dr.push(diff * (2.0 * lam / n));
        }

        let put = |grad: &mut Vec<f64>, e: (usize, usize, usize, usize), w: &ndarray::Array2<f64>, b: &Array1<f64>| {
            for (dst, src) in grad[e.0..e.0 + e.1 * e.2].iter_mut().zip(w.iter()) {
                *dst += src;
            }
            for (dst, src) in grad[e.3..e.3 + e.2].iter_mut().zip(b.iter()) {
                *dst += src;
            }
        };

        // Decoder chain, shallowest first.
        let mut g_r = dr[0].clone();
        let mut dz_deep = None;
        for l in 0..depth {
            let e = layout.dec[l];
            let g = conv_backward(&f.u[l], weight_view(params, e), &g_r, k);
            put(&mut grad, e, &g.weight, &g.bias);
            if l + 1 < depth {
                let (_, h, w, _) = f.r[l + 1].dim();
                g_r = &dr[l + 1] + &unpool2_backward(&g.input, h, w);
            } else {
                dz_deep = Some(g.input);
            }
        }

        // Encoder chain, deepest first.
        let mut g_z = dz_deep.expect("depth >= 1");
        for l in (0..depth).rev() {
            let da = self.spec.activation.backward(&f.a[l], g_z);
            let e = layout.enc[l];
            let g = conv_backward(&f.p[l], weight_view(params, e), &da, k);
            put(&mut grad, e, &g.weight, &g.bias);
            if l > 0 {
                let gp = g.input - &dr[l];
                let (_, h, w, _) = f.z[l - 1].dim();
                g_z = avgpool2_backward(&gp, h, w);
            } else {
                g_z = Array4::zeros((0, 0, 0, 0));
            }
        }
        drop(g_z);

        SmcaeLoss {
            total,
            pairs,
            gradient: grad,
        }
    }

    fn scaled_input(&self, cube: &SpectralCube) -> Result<Array4<f64>> {
        if cube.bands() != self.bands {
            return Err(Error::Dimension(format!(
                "model expects {} bands, cube has {}",
                self.bands,
                cube.bands()
            )));
        }
        let mut m = cube.pixel_matrix();
        self.input_scaler.apply_rows(&mut m)?;
        Ok(m.into_shape_with_order((1, cube.height(), cube.width(), self.bands))
            .expect("pixel count preserved"))
    }

    /// Encoder activations of a whole image (mirror-padded, spatial dims preserved).
    pub fn encode(&self, cube: &SpectralCube) -> Result<FeatureCube> {
        let x = self.scaled_input(cube)?;
        let (h, w) = (cube.height(), cube.width());
        let (p, _, z) = self.encode_forward(&self.params, &x);
        let sizes: Vec<(usize, usize)> = p.iter().map(|t| (t.dim().1, t.dim().2)).collect();
        let upsample = |mut t: Array4<f64>, level: usize| {
            for j in (1..=level).rev() {
                let (hh, ww) = sizes[j - 1];
                t = unpool2(&t, hh, ww);
            }
            t
        };
        let depth = self.spec.depth();
        let levels: Vec<usize> = match self.spec.encode_mode {
            EncodeMode::Concat => (0..depth).collect(),
            EncodeMode::Final => vec![depth - 1],
        };
        let parts: Vec<Array4<f64>> = levels
            .into_iter()
            .map(|l| upsample(z[l].clone(), l))
            .collect();
        let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
        let cat = ndarray::concatenate(Axis(3), &views).map_err(|e| Error::Dimension(e.to_string()))?;
        let out: Array3<f64> = cat.index_axis_move(Axis(0), 0);
        debug_assert_eq!(out.dim().0, h);
        debug_assert_eq!(out.dim().1, w);
        FeatureCube::new(out)
    }
}

fn sample_patches(x: &Array4<f64>, size: usize, count: usize, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let (_, h, w, b) = x.dim();
    let mut out = Array4::zeros((count, size, size, b));
    for i in 0..count {
        let r0 = rng.gen_range(0..=h - size) as isize;
        let c0 = rng.gen_range(0..=w - size) as isize;
        for dr in 0..size {
            for dc in 0..size {
                let src = x.slice(s![0, mirror(r0 + dr as isize, h), mirror(c0 + dc as isize, w), ..]);
                out.slice_mut(s![i, dr, dc, ..]).assign(&src);
            }
        }
    }
    out
}

/// Trains on patches sampled from `cube` with mini-batch Nadam.
pub fn train_smcae(cube: &SpectralCube, spec: &SmcaeSpec, seed: u64) -> Result<SmcaeModel> {
    spec.validate()?;
    if spec.patch_size > cube.height() || spec.patch_size > cube.width() {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {}-pixel training patch",
            cube.height(),
            cube.width(),
            spec.patch_size
        )));
    }
    let scaler = Standardizer::fit(&cube.pixel_matrix().view())?;
    let mut model = SmcaeModel::init(spec.clone(), cube.bands(), scaler, seed)?;
    let x = model.scaled_input(cube)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let patches = sample_patches(&x, spec.patch_size, spec.n_patches, &mut rng);
    let mut opt = NadamState::new(model.num_params(), spec.learning_rate);
    let mut order: Vec<usize> = (0..spec.n_patches).collect();

    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(spec.batch_size) {
            let batch = patches.select(Axis(0), chunk);
            let out = model.loss_and_gradient(&model.params, &batch);
            if !out.total.is_finite() || out.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            opt.step(&mut model.params, &out.gradient)?;
            sum += out.total;
            batches += 1;
            model.pair_losses = out.pairs;
        }
        let mean = sum / batches as f64;
        log::debug!("smcae epoch {epoch}: loss {mean:.6}");
        model.loss_history.push(mean);
        opt.learning_rate *= spec.lr_decay;
    }
    Ok(model)
}

pub fn encode_smcae(cube: &SpectralCube, model: &SmcaeModel) -> Result<FeatureCube> {
    model.encode(cube)
}

/// Per-pair reconstruction MSE of a model on an image (one full-image batch).
pub fn reconstruction_errors(model: &SmcaeModel, cube: &SpectralCube) -> Result<Vec<f64>> {
    let x = model.scaled_input(cube)?;
    Ok(model.loss_and_gradient(&model.params, &x).pairs)
}
