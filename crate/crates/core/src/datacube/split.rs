//! Per-class low-shot train/validation/test sampling.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, PixelCoord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<PixelCoord>,
    pub val: Vec<PixelCoord>,
    pub test: Vec<PixelCoord>,
    pub seed: u64,
}

/// Draws `n_train` then `n_val` pixels per class uniformly without replacement;
/// every other labeled pixel goes to test.
///
/// A class with at least `n_train + 1` but fewer than `n_train + n_val` pixels
/// fills train first and puts the rest in val, leaving its test set empty.
/// Classes with no labeled pixels at all are skipped.
pub fn sample_split(truth: &LabelMap, n_train: usize, n_val: usize, seed: u64) -> Result<Split> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be at least 1".into()));
    }
    truth.validate_as_truth()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (idx, mut pixels) in truth.pixels_by_class().into_iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        if pixels.len() < n_train + 1 {
            return Err(Error::InsufficientSamples {
                class: idx as u16 + 1,
                available: pixels.len(),
                required: n_train + 1,
            });
        }
        pixels.shuffle(&mut rng);
        let n_v = n_val.min(pixels.len() - n_train);
        split.train.extend_from_slice(&pixels[..n_train]);
        split.val.extend_from_slice(&pixels[n_train..n_train + n_v]);
        split.test.extend_from_slice(&pixels[n_train + n_v..]);
    }
    split.test.sort();
    Ok(split)
}

impl Split {
    /// CSV with columns `set,row,col`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::MalformedFile(e.to_string());
        w.write_record(["set", "row", "col"]).map_err(csv_err)?;
        w.write_record(["seed", &self.seed.to_string(), "0"]).map_err(csv_err)?;
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for p in set {
                w.write_record([name, &p.row.to_string(), &p.col.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::MalformedFile(e.to_string()))?;
        let mut split = Split {
            train: vec![],
            val: vec![],
            test: vec![],
            seed: 0,
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::MalformedFile(e.to_string()))?;
            let num = |i: usize| -> Result<u64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad split row {rec:?}")))
            };
            let p = || -> Result<PixelCoord> { Ok(PixelCoord::new(num(1)? as usize, num(2)? as usize)) };
            match rec.get(0) {
                Some("seed") => split.seed = num(1)?,
                Some("train") => split.train.push(p()?),
                Some("val") => split.val.push(p()?),
                Some("test") => split.test.push(p()?),
                _ => return Err(Error::Parse(format!("unknown split set in {rec:?}"))),
            }
        }
        Ok(split)
    }
}
