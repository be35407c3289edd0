//! Flat binary container for models and cached arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EMAPCNT\0"
//! version    u32      1
//! kind       u32 length + UTF-8 bytes
//! metadata   u32 count, then per entry: u32 length + key, u32 length + value
//! tensors    u32 count, then per tensor:
//!              u32 length + name, u8 dtype (1 = f32, 2 = f64),
//!              u32 rank, rank × u64 dims
//! payload    tensor data in table order, row-major, little-endian IEEE-754
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::datacube::ProbabilityField;
use crate::error::{Error, Result};
use crate::features::{Activation, EncodeMode, FeatureCube, FilterBank, SmcaeModel, SmcaeSpec, Standardizer, Whitening};
use crate::ssmlp::{EpochRecord, MlpSpec, TrainedMlp};

const MAGIC: &[u8; 8] = b"EMAPCNT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            _ => Err(Error::MalformedFile(format!("unknown tensor dtype code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub precision: Precision,
    pub data: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push<D: ndarray::Dimension>(&mut self, name: &str, precision: Precision, data: &ndarray::Array<f64, D>) -> &mut Self {
        self.tensors.push(Tensor {
            name: name.to_string(),
            precision,
            data: data.clone().into_dyn().as_standard_layout().into_owned(),
        });
        self
    }

    pub fn get_meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedFile(format!("{} container lacks metadata '{key}'", self.kind)))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get_meta(key)?;
        v.parse()
            .map_err(|_| Error::MalformedFile(format!("metadata '{key}' has invalid value '{v}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.data)
            .ok_or_else(|| Error::MalformedFile(format!("{} container lacks tensor '{name}'", self.kind)))
    }

    pub fn tensor1(&self, name: &str) -> Result<Array1<f64>> {
        self.tensor(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::MalformedFile(format!("tensor '{name}': {e}")))
    }

    pub fn tensor2(&self, name: &str) -> Result<Array2<f64>> {
        self.tensor(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::MalformedFile(format!("tensor '{name}': {e}")))
    }

    pub fn tensor3(&self, name: &str) -> Result<Array3<f64>> {
        self.tensor(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::MalformedFile(format!("tensor '{name}': {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::MalformedFile(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.precision.code());
            out.extend_from_slice(&(t.data.ndim() as u32).to_le_bytes());
            for &d in t.data.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for &v in t.data.iter() {
                match t.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::MalformedFile("not a container file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("container version {version}")));
        }
        let kind = r.string()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let precision = Precision::from_code(r.u8()?)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::MalformedFile("tensor dim overflow".into()))?);
            }
            table.push((name, precision, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, precision, shape) in table {
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::MalformedFile(format!("tensor '{name}' is too large")))?;
            let raw = r.take(
                count
                    .checked_mul(precision.size())
                    .ok_or_else(|| Error::MalformedFile(format!("tensor '{name}' is too large")))?,
            )?;
            let data: Vec<f64> = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            };
            let data = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("count matches shape");
            tensors.push(Tensor { name, precision, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedFile(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedFile("container is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::MalformedFile("invalid UTF-8 string".into()))
    }
}

/// Types that round-trip through a [`Container`].
pub trait Persist: Sized {
    const KIND: &'static str;

    fn to_container(&self, precision: Precision) -> Container;

    fn from_container(c: &Container) -> Result<Self>;

    fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        self.to_container(precision).write(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn split<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.parse().map_err(|_| Error::MalformedFile(format!("metadata '{key}' has invalid list '{s}'"))))
        .collect()
}

fn push_scaler(c: &mut Container, prefix: &str, s: &Standardizer, precision: Precision) {
    c.set(&format!("{prefix}epsilon"), s.epsilon);
    c.push(&format!("{prefix}means"), precision, &s.means);
    c.push(&format!("{prefix}stds"), precision, &s.stds);
}

fn read_scaler(c: &Container, prefix: &str) -> Result<Standardizer> {
    Ok(Standardizer {
        means: c.tensor1(&format!("{prefix}means"))?,
        stds: c.tensor1(&format!("{prefix}stds"))?,
        epsilon: c.parse_meta(&format!("{prefix}epsilon"))?,
    })
}

impl Persist for Standardizer {
    const KIND: &'static str = "standardizer";

    fn to_container(&self, precision: Precision) -> Container {
        let mut c = Container::new(Self::KIND);
        push_scaler(&mut c, "", self, precision);
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        read_scaler(c, "")
    }
}

impl Persist for FilterBank {
    const KIND: &'static str = "mica-filter-bank";

    fn to_container(&self, precision: Precision) -> Container {
        let mut c = Container::new(Self::KIND);
        c.set("receptive_field", self.receptive_field)
            .set("ica_converged", self.ica_converged)
            .set("ica_iterations", self.ica_iterations);
        c.push("spectral_mean", precision, &self.spectral.mean)
            .push("spectral_matrix", precision, &self.spectral.matrix)
            .push("spectral_variances", precision, &Array1::from(self.spectral.variances.clone()))
            .push("filters", precision, &self.filters);
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let bank = FilterBank {
            spectral: Whitening {
                mean: c.tensor1("spectral_mean")?,
                matrix: c.tensor2("spectral_matrix")?,
                variances: c.tensor1("spectral_variances")?.to_vec(),
            },
            filters: c.tensor2("filters")?,
            receptive_field: c.parse_meta("receptive_field")?,
            ica_converged: c.parse_meta("ica_converged")?,
            ica_iterations: c.parse_meta("ica_iterations")?,
        };
        bank.validate()?;
        Ok(bank)
    }
}

impl Persist for SmcaeModel {
    const KIND: &'static str = "smcae-model";

    fn to_container(&self, precision: Precision) -> Container {
        let s = &self.spec;
        let mut c = Container::new(Self::KIND);
        c.set("channels", join(&s.channels))
            .set("kernel", s.kernel)
            .set("loss_weights", join(&s.loss_weights))
            .set(
                "activation",
                match s.activation {
                    Activation::Relu => "relu",
                    Activation::Linear => "linear",
                },
            )
            .set(
                "encode_mode",
                match s.encode_mode {
                    EncodeMode::Concat => "concat",
                    EncodeMode::Final => "final",
                },
            )
            .set("patch_size", s.patch_size)
            .set("n_patches", s.n_patches)
            .set("batch_size", s.batch_size)
            .set("epochs", s.epochs)
            .set("learning_rate", s.learning_rate)
            .set("lr_decay", s.lr_decay)
            .set("bands", self.bands);
        push_scaler(&mut c, "input_", &self.input_scaler, precision);
        c.push("params", precision, &Array1::from(self.params.clone()))
            .push("loss_history", Precision::F64, &Array1::from(self.loss_history.clone()))
            .push("pair_losses", Precision::F64, &Array1::from(self.pair_losses.clone()));
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let spec = SmcaeSpec {
            channels: split(c.get_meta("channels")?, "channels")?,
            kernel: c.parse_meta("kernel")?,
            loss_weights: split(c.get_meta("loss_weights")?, "loss_weights")?,
            activation: match c.get_meta("activation")? {
                "relu" => Activation::Relu,
                "linear" => Activation::Linear,
                other => return Err(Error::MalformedFile(format!("unknown activation '{other}'"))),
            },
            encode_mode: match c.get_meta("encode_mode")? {
                "concat" => EncodeMode::Concat,
                "final" => EncodeMode::Final,
                other => return Err(Error::MalformedFile(format!("unknown encode mode '{other}'"))),
            },
            patch_size: c.parse_meta("patch_size")?,
            n_patches: c.parse_meta("n_patches")?,
            batch_size: c.parse_meta("batch_size")?,
            epochs: c.parse_meta("epochs")?,
            learning_rate: c.parse_meta("learning_rate")?,
            lr_decay: c.parse_meta("lr_decay")?,
        };
        let bands: usize = c.parse_meta("bands")?;
        let mut model = SmcaeModel::init(spec, bands, read_scaler(c, "input_")?, 0)?;
        let params = c.tensor1("params")?.to_vec();
        if params.len() != model.params.len() {
            return Err(Error::MalformedFile(format!(
                "SMCAE container holds {} parameters, architecture needs {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        model.loss_history = c.tensor1("loss_history")?.to_vec();
        model.pair_losses = c.tensor1("pair_losses")?.to_vec();
        Ok(model)
    }
}

impl Persist for TrainedMlp {
    const KIND: &'static str = "mlp-model";

    fn to_container(&self, precision: Precision) -> Container {
        let s = &self.spec;
        let mut c = Container::new(Self::KIND);
        c.set("input_dim", s.input_dim)
            .set("num_classes", s.num_classes)
            .set("hidden_layers", s.hidden_layers)
            .set("units_per_layer", s.units_per_layer)
            .set("weight_decay", s.weight_decay)
            .set("aux_weight", s.aux_weight)
            .set("best_epoch", self.best_epoch);
        let history = Array2::from_shape_fn((self.history.len(), 4), |(i, j)| {
            let r = &self.history[i];
            [r.epoch as f64, r.train_loss, r.val_loss, r.lr][j]
        });
        c.push("params", precision, &Array1::from(self.params.clone()))
            .push("history", Precision::F64, &history);
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let spec = MlpSpec {
            input_dim: c.parse_meta("input_dim")?,
            num_classes: c.parse_meta("num_classes")?,
            hidden_layers: c.parse_meta("hidden_layers")?,
            units_per_layer: c.parse_meta("units_per_layer")?,
            weight_decay: c.parse_meta("weight_decay")?,
            aux_weight: c.parse_meta("aux_weight")?,
        };
        spec.validate()?;
        let params = c.tensor1("params")?.to_vec();
        if params.len() != spec.num_params() {
            return Err(Error::MalformedFile(format!(
                "MLP container holds {} parameters, architecture needs {}",
                params.len(),
                spec.num_params()
            )));
        }
        let h = c.tensor2("history")?;
        if h.ncols() != 4 {
            return Err(Error::MalformedFile("MLP history must have 4 columns".into()));
        }
        let history = h
            .rows()
            .into_iter()
            .map(|r| EpochRecord {
                epoch: r[0] as usize,
                train_loss: r[1],
                val_loss: r[2],
                lr: r[3],
            })
            .collect();
        Ok(TrainedMlp {
            spec,
            params,
            history,
            best_epoch: c.parse_meta("best_epoch")?,
        })
    }
}

impl Persist for FeatureCube {
    const KIND: &'static str = "feature-cube";

    fn to_container(&self, precision: Precision) -> Container {
        let mut c = Container::new(Self::KIND);
        c.push("values", precision, self.values());
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        FeatureCube::new(c.tensor3("values")?)
    }
}

impl Persist for ProbabilityField {
    const KIND: &'static str = "probability-field";

    fn to_container(&self, precision: Precision) -> Container {
        let mut c = Container::new(Self::KIND);
        c.push("values", precision, self.values());
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        ProbabilityField::new(c.tensor3("values")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::SpectralCube;
    use crate::features::{learn_ica_filters, train_smcae, MicaParams};
    use ndarray::{Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(seed: u64) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralCube::with_index_wavelengths(Array3::from_shape_simple_fn((8, 8, 4), || rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn byte_layout() {
        let mut c = Container::new("k");
        c.set("a", "b");
        c.push("t", Precision::F32, &Array1::from(vec![1.5, -2.0]));
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"EMAPCNT\0");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[b.len() - 8..b.len() - 4], &1.5f32.to_le_bytes());
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut c = Container::new("k");
        c.push("t", Precision::F64, &Array2::<f64>::zeros((3, 2)));
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut future = b;
        future[8] = 9;
        assert!(matches!(Container::from_bytes(&future), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn f32_storage_rounds_once() {
        let v = Array1::from(vec![0.1f64, 1.0 / 3.0]);
        let mut c = Container::new("k");
        c.push("t", Precision::F32, &v);
        let back = Container::from_bytes(&c.to_bytes()).unwrap().tensor1("t").unwrap();
        assert_eq!(back[0], 0.1f32 as f64);
        assert_eq!(back[1], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn filter_bank_round_trip() {
        let params = MicaParams {
            num_filters: 4,
            receptive_field: 3,
            spectral_components: 3,
            n_patches: 200,
            ..MicaParams::default()
        };
        let bank = learn_ica_filters(&cube(1), &params, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.bin");
        bank.save(&p, Precision::F64).unwrap();
        assert_eq!(FilterBank::load(&p).unwrap(), bank);
        bank.save(&p, Precision::F32).unwrap();
        let lossy = FilterBank::load(&p).unwrap();
        assert!((&lossy.filters - &bank.filters).iter().all(|d| d.abs() < 1e-5 * (1.0 + bank.filters.iter().fold(0.0f64, |a, b| a.max(b.abs())))));
        assert!(SmcaeModel::load(&p).is_err());
    }

    #[test]
    fn smcae_round_trip() {
        let spec = SmcaeSpec {
            channels: vec![4, 6],
            loss_weights: vec![1.0, 0.5],
            n_patches: 8,
            batch_size: 4,
            epochs: 1,
            ..SmcaeSpec::default()
        };
        let m = train_smcae(&cube(2), &spec, 1).unwrap();
        let c = Container::from_bytes(&m.to_container(Precision::F64).to_bytes()).unwrap();
        let back = SmcaeModel::from_container(&c).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mlp_round_trip() {
        let spec = MlpSpec::new(3, 4, 2, 64, 1e-4).unwrap();
        let mut m = TrainedMlp::init(spec, 5).unwrap();
        m.history.push(EpochRecord {
            epoch: 0,
            train_loss: 1.2,
            val_loss: 1.3,
            lr: 0.002,
        });
        let c = Container::from_bytes(&m.to_container(Precision::F64).to_bytes()).unwrap();
        assert_eq!(TrainedMlp::from_container(&c).unwrap(), m);
    }

    #[test]
    fn caches_round_trip_exactly() {
        let f = FeatureCube::from_cube(&cube(3));
        let c = Container::from_bytes(&f.to_container(Precision::F64).to_bytes()).unwrap();
        assert_eq!(FeatureCube::from_container(&c).unwrap(), f);
        let mut v = Array3::from_elem((2, 3, 4), 0.25);
        v.index_axis_mut(Axis(2), 0).fill(0.7);
        v.index_axis_mut(Axis(2), 1).fill(0.1);
        v.index_axis_mut(Axis(2), 2).fill(0.1);
        v.index_axis_mut(Axis(2), 3).fill(0.1);
        let p = ProbabilityField::new(v).unwrap();
        let c = Container::from_bytes(&p.to_container(Precision::F64).to_bytes()).unwrap();
        assert_eq!(ProbabilityField::from_container(&c).unwrap(), p);
    }
}
