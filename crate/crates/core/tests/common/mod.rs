#![allow(dead_code)]

use std::path::Path;

use earthmapper::datacube::{write_envi, write_pgm_labels, DataType, Interleave, LabelMap, SpectralCube};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Piecewise-constant scene of four quadrant classes with a one-pixel
/// unlabeled border; each class has a distinct mean spectrum plus Gaussian noise.
pub fn quadrant_scene(size: usize, bands: usize, noise: f64, seed: u64) -> (SpectralCube, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).unwrap();
    let half = size / 2;
    let labels = Array2::from_shape_fn((size, size), |(r, c)| {
        if r == 0 || c == 0 || r == size - 1 || c == size - 1 {
            0
        } else {
            1 + (r >= half) as u16 * 2 + (c >= half) as u16
        }
    });
    let mut values = Array3::zeros((size, size, bands));
    for r in 0..size {
        for c in 0..size {
            let k = (r >= half) as usize * 2 + (c >= half) as usize;
            for b in 0..bands {
                let mean = if b % 4 == k { 1.0 } else { 0.0 };
                values[[r, c, b]] = mean + normal.sample(&mut rng);
            }
        }
    }
    (
        SpectralCube::with_index_wavelengths(values).unwrap(),
        LabelMap::new(labels, 4).unwrap(),
    )
}

/// Writes the scene as `cube.hdr`/`cube.raw` plus `gt.pgm` and a config
/// `config.toml` whose body follows the `[dataset]` section.
pub fn write_scene(dir: &Path, cube: &SpectralCube, truth: &LabelMap, sections: &str) -> std::path::PathBuf {
    write_envi(cube, &dir.join("cube.hdr"), &dir.join("cube.raw"), Interleave::Bip, DataType::Float64).unwrap();
    write_pgm_labels(truth, &dir.join("gt.pgm")).unwrap();
    let cfg = dir.join("config.toml");
    std::fs::write(
        &cfg,
        format!("[dataset]\ncube = \"cube.hdr\"\ntruth = \"gt.pgm\"\nname = \"quadrants\"\n\n{sections}"),
    )
    .unwrap();
    cfg
}

/// Small classifier and CRF settings that keep a trial under a few seconds.
pub const FAST_SECTIONS: &str = r#"
[classifier]
hidden_layers = [2]
units = [64]
weight_decay = [1e-3]
max_epochs = 150
stop_patience = 25

[ugm]
kind = "dense_meanfield"
iterations = 10
w1 = [0.3, 1.0, 3.0]
theta = [1.0, 3.0]

[experiment]
n_train = 5
n_val = 10
n_trials = 3
seed = 11
out = "out"
"#;
