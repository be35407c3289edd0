use std::thread;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradients_with, MlpSpec, TrainedMlp};
use crate::error::{Error, Result};
use crate::optim::NadamState;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_drop: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    pub stop_patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.002,
            lr_drop: 0.1,
            plateau_patience: 10,
            min_learning_rate: 2e-6,
            stop_patience: 50,
            max_epochs: 1000,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.stop_patience == 0 {
            return Err(Error::InvalidArgument(
                "batch size, epoch budget and stop patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

fn check_set(x: &Array2<f64>, labels: &[u16], dim: usize, what: &str) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput(format!("{what} set is empty")));
    }
    if x.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{what} set has {} rows and {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.ncols() != dim {
        return Err(Error::Dimension(format!(
            "{what} set has {} features, model expects {dim}",
            x.ncols()
        )));
    }
    Ok(())
}

/// Trains with Nadam on shuffled mini-batches, dropping the learning rate on
/// validation plateaus and stopping early; returns the best-validation weights.
///
/// Training rows labeled 0 take part only in the auxiliary reconstruction term.
pub fn train(
    spec: &MlpSpec,
    train_x: &Array2<f64>,
    train_labels: &[u16],
    val_x: &Array2<f64>,
    val_labels: &[u16],
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainedMlp> {
    spec.validate()?;
    opts.validate()?;
    check_set(train_x, train_labels, spec.input_dim, "training")?;
    check_set(val_x, val_labels, spec.input_dim, "validation")?;
    if !train_labels.iter().any(|&l| l > 0) || val_labels.iter().any(|&l| l == 0) {
        return Err(Error::InvalidArgument(
            "training needs labeled rows and validation rows must all be labeled".into(),
        ));
    }

    let mut model = TrainedMlp::init(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut opt = NadamState::new(model.params.len(), opts.learning_rate);
    let mut order: Vec<usize> = (0..train_x.nrows()).collect();

    let mut best_params = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_drop = 0;
    let mut history = Vec::new();

    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let xb = train_x.select(Axis(0), chunk);
            let lb: Vec<u16> = chunk.iter().map(|&i| train_labels[i]).collect();
            let g = gradients_with(spec, &model.params, &xb.view(), &lb)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            opt.step(&mut model.params, &g.grad)?;
            loss_sum += g.loss;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let val_loss = model.cross_entropy(&val_x.view(), val_labels)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: opt.learning_rate,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(&model.params);
            since_drop = 0;
        } else {
            since_drop += 1;
            if since_drop >= opts.plateau_patience {
                opt.learning_rate = (opt.learning_rate * opts.lr_drop).max(opts.min_learning_rate);
                since_drop = 0;
            }
        }
        if epoch - best_epoch >= opts.stop_patience {
            break;
        }
    }

    log::debug!(
        "mlp {}x{} wd={} best epoch {best_epoch} val loss {best_val:.5}",
        spec.hidden_layers,
        spec.units_per_layer,
        spec.weight_decay
    );
    model.params = best_params;
    model.history = history;
    model.best_epoch = best_epoch;
    Ok(model)
}

/// Grid of hidden layers {2,3} × units {64,256,1024} × weight decay {0, 1e-4, 1e-3}.
pub fn default_grid(input_dim: usize, num_classes: usize) -> Vec<MlpSpec> {
    let mut grid = Vec::new();
    for layers in [2, 3] {
        for units in [64, 256, 1024] {
            for wd in [0.0, 1e-4, 1e-3] {
                grid.push(MlpSpec {
                    input_dim,
                    num_classes,
                    hidden_layers: layers,
                    units_per_layer: units,
                    weight_decay: wd,
                    aux_weight: 0.0,
                });
            }
        }
    }
    grid
}

/// Trains every candidate and keeps the lowest best-epoch validation loss;
/// ties go to fewer parameters, then to earlier grid position.
pub fn cross_validate(
    grid: &[MlpSpec],
    train_x: &Array2<f64>,
    train_labels: &[u16],
    val_x: &Array2<f64>,
    val_labels: &[u16],
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainedMlp> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("cross-validation grid is empty".into()));
    }
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(grid.len());
    let results: Vec<Result<TrainedMlp>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..grid.len())
                        .step_by(workers)
                        .map(|i| (i, train(&grid[i], train_x, train_labels, val_x, val_labels, opts, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<TrainedMlp>)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("training thread panicked"))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    });

    let mut best: Option<(f64, usize, TrainedMlp)> = None;
    for (spec, res) in grid.iter().zip(results) {
        let model = match res {
            Ok(m) => m,
            Err(Error::TrainingDiverged { epoch }) => {
                log::warn!("candidate {spec:?} diverged at epoch {epoch}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let val = model.history[model.best_epoch].val_loss;
        let n = spec.num_params();
        let better = match &best {
            None => true,
            Some((bv, bn, _)) => val < *bv || (val == *bv && n < *bn),
        };
        if better {
            best = Some((val, n, model));
        }
    }
    best.map(|(_, _, m)| m).ok_or(Error::NoViableModel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i % 2) as u16;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            x[[i, 0]] = centre + rng.gen_range(-1.0..1.0);
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
            y.push(c + 1);
        }
        (x, y)
    }

    /// Features carry no label information, so validation loss bottoms out early.
    fn noise(n: usize, seed: u64) -> (Array2<f64>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-1.0..1.0));
        let y = (0..n).map(|_| rng.gen_range(1..=2u16)).collect();
        (x, y)
    }

    fn xor(n: usize, seed: u64) -> (Array2<f64>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            x[[i, 0]] = a;
            x[[i, 1]] = b;
            y.push(if (a > 0.0) == (b > 0.0) { 1 } else { 2 });
        }
        (x, y)
    }

    fn accuracy(m: &TrainedMlp, x: &Array2<f64>, y: &[u16]) -> f64 {
        let p = m.forward(&x.view()).unwrap();
        let hits = p
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(row, &l)| {
                let k = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                k + 1 == l as usize
            })
            .count();
        hits as f64 / y.len() as f64
    }

    fn quick() -> TrainOptions {
        TrainOptions {
            max_epochs: 200,
            stop_patience: 20,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (tx, ty) = blobs(40, 1);
        let (vx, vy) = blobs(40, 2);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let m = train(&spec, &tx, &ty, &vx, &vy, &quick(), 7).unwrap();
        assert_eq!(accuracy(&m, &vx, &vy), 1.0);
        assert_eq!(accuracy(&m, &tx, &ty), 1.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let (tx, ty) = blobs(24, 3);
        let (vx, vy) = blobs(24, 4);
        let spec = MlpSpec::new(2, 2, 2, 64, 1e-4).unwrap();
        let opts = TrainOptions {
            max_epochs: 30,
            ..quick()
        };
        let a = train(&spec, &tx, &ty, &vx, &vy, &opts, 11).unwrap();
        let b = train(&spec, &tx, &ty, &vx, &vy, &opts, 11).unwrap();
        assert_eq!(a, b);
        let c = train(&spec, &tx, &ty, &vx, &vy, &opts, 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn early_stopping_contract() {
        let (tx, ty) = noise(32, 5);
        let (vx, vy) = noise(32, 6);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let opts = TrainOptions::default();
        let m = train(&spec, &tx, &ty, &vx, &vy, &opts, 1).unwrap();
        assert!(m.history.len() < opts.max_epochs, "expected early stop");
        assert!(m.history.len() >= opts.stop_patience);
        assert_eq!(m.history.len() - 1 - m.best_epoch, opts.stop_patience);
        let returned = m.cross_entropy(&vx.view(), &vy).unwrap();
        for r in &m.history {
            assert!(returned <= r.val_loss + 1e-12);
        }
        assert_eq!(returned, m.history[m.best_epoch].val_loss);
        // The learning rate only ever decreases, and never below the floor.
        for w in m.history.windows(2) {
            assert!(w[1].lr <= w[0].lr);
            assert!(w[1].lr >= opts.min_learning_rate);
        }
    }

    #[test]
    fn plateau_drops_learning_rate() {
        let (tx, ty) = noise(32, 5);
        let (vx, vy) = noise(32, 6);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let m = train(&spec, &tx, &ty, &vx, &vy, &TrainOptions::default(), 1).unwrap();
        let first = m.history[0].lr;
        assert_eq!(first, 0.002);
        let drops: Vec<f64> = m.history.iter().map(|r| r.lr).filter(|&lr| lr < first).collect();
        assert!(!drops.is_empty());
        assert!((drops[0] - 0.0002).abs() < 1e-18);
    }

    #[test]
    fn bad_inputs() {
        let (tx, ty) = blobs(8, 1);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            train(&spec, &tx, &ty, &empty, &[], &quick(), 0),
            Err(Error::EmptyInput(_))
        ));
        let wide = Array2::<f64>::zeros((8, 3));
        assert!(matches!(
            train(&spec, &wide, &ty, &tx, &ty, &quick(), 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (tx, ty) = blobs(8, 1);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let opts = TrainOptions {
            learning_rate: 1e300,
            min_learning_rate: 1e300,
            ..quick()
        };
        let tx = tx * 1e200;
        assert!(matches!(
            train(&spec, &tx, &ty, &tx, &ty, &opts, 0),
            Err(Error::TrainingDiverged { .. })
        ));
        assert!(matches!(
            cross_validate(&[spec], &tx, &ty, &tx, &ty, &opts, 0),
            Err(Error::NoViableModel)
        ));
    }

    #[test]
    fn singleton_grid() {
        let (tx, ty) = blobs(16, 1);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let opts = TrainOptions {
            max_epochs: 10,
            ..quick()
        };
        let m = cross_validate(std::slice::from_ref(&spec), &tx, &ty, &tx, &ty, &opts, 3).unwrap();
        assert_eq!(m.spec, spec);
    }

    #[test]
    fn xor_prefers_adequate_capacity() {
        // Heavy weight decay pins the weights near zero, so the first candidate
        // cannot bend its boundary around the XOR quadrants.
        let (tx, ty) = xor(120, 8);
        let (vx, vy) = xor(120, 9);
        let weak = MlpSpec::new(2, 2, 2, 64, 5.0).unwrap();
        let good = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let grid = [weak, good.clone()];
        let a = cross_validate(&grid, &tx, &ty, &vx, &vy, &quick(), 5).unwrap();
        let b = cross_validate(&grid, &tx, &ty, &vx, &vy, &quick(), 5).unwrap();
        assert_eq!(a.spec, good);
        assert_eq!(a, b);
        assert!(accuracy(&a, &vx, &vy) > 0.9);
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grid(10, 4);
        assert_eq!(g.len(), 18);
        assert!(g.iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn history_csv() {
        let (tx, ty) = blobs(8, 1);
        let spec = MlpSpec::new(2, 2, 2, 64, 0.0).unwrap();
        let opts = TrainOptions {
            max_epochs: 3,
            ..quick()
        };
        let m = train(&spec, &tx, &ty, &tx, &ty, &opts, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        m.write_history_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
        assert_eq!(lines.len(), 4);
    }
}
