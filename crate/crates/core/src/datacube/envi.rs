//! ENVI-style `.hdr` + raw binary rasters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::SpectralCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interleave {
    Bsq,
    Bil,
    Bip,
}

impl Interleave {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bsq" => Ok(Interleave::Bsq),
            "bil" => Ok(Interleave::Bil),
            "bip" => Ok(Interleave::Bip),
            other => Err(Error::UnsupportedFormat(format!("interleave '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Interleave::Bsq => "bsq",
            Interleave::Bil => "bil",
            Interleave::Bip => "bip",
        }
    }

    /// Linear element offset of (row, col, band) in a file of the given dims.
    fn offset(&self, lines: usize, samples: usize, bands: usize, r: usize, c: usize, b: usize) -> usize {
        match self {
            Interleave::Bsq => (b * lines + r) * samples + c,
            Interleave::Bil => (r * bands + b) * samples + c,
            Interleave::Bip => (r * samples + c) * bands + b,
        }
    }
}

/// ENVI numeric codes that this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Int16,
    Float32,
    Float64,
    UInt16,
}

impl DataType {
    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            2 => Ok(DataType::Int16),
            4 => Ok(DataType::Float32),
            5 => Ok(DataType::Float64),
            12 => Ok(DataType::UInt16),
            other => Err(Error::UnsupportedFormat(format!("ENVI data type {other}"))),
        }
    }

    pub fn code(&self) -> u32 {
        match self {
            DataType::Int16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 5,
            DataType::UInt16 => 12,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            DataType::Int16 | DataType::UInt16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }

    fn decode(&self, bytes: &[u8], big_endian: bool) -> f64 {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(bytes);
                if big_endian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            DataType::Int16 => rd!(i16, 2),
            DataType::UInt16 => rd!(u16, 2),
            DataType::Float32 => rd!(f32, 4),
            DataType::Float64 => rd!(f64, 8),
        }
    }

    fn encode(&self, v: f64, big_endian: bool, out: &mut Vec<u8>) -> Result<()> {
        macro_rules! wr {
            ($x:expr) => {{
                let x = $x;
                if big_endian {
                    out.extend_from_slice(&x.to_be_bytes())
                } else {
                    out.extend_from_slice(&x.to_le_bytes())
                }
            }};
        }
        match self {
            DataType::Float32 => wr!(v as f32),
            DataType::Float64 => wr!(v),
            DataType::Int16 => {
                let r = v.round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
                    return Err(Error::OutOfRange(format!("{v} does not fit int16")));
                }
                wr!(r as i16)
            }
            DataType::UInt16 => {
                let r = v.round();
                if !(0.0..=u16::MAX as f64).contains(&r) {
                    return Err(Error::OutOfRange(format!("{v} does not fit uint16")));
                }
                wr!(r as u16)
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnviHeader {
    pub samples: usize,
    pub lines: usize,
    pub bands: usize,
    pub interleave: Interleave,
    pub data_type: DataType,
    pub big_endian: bool,
    pub header_offset: usize,
    pub wavelengths: Option<Vec<f64>>,
    /// Every key/value pair as read, keys lower-cased.
    pub fields: BTreeMap<String, String>,
}

impl EnviHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let fields = parse_fields(text)?;
        let get = |k: &str| {
            fields
                .get(k)
                .map(|s| s.as_str())
                .ok_or_else(|| Error::Parse(format!("header is missing required key '{k}'")))
        };
        let uint = |k: &str| -> Result<usize> {
            get(k)?
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("key '{k}' is not an unsigned integer")))
        };
        let samples = uint("samples")?;
        let lines = uint("lines")?;
        let bands = uint("bands")?;
        let interleave = Interleave::parse(get("interleave")?)?;
        let data_type = DataType::from_code(uint("data type")? as u32)?;
        let big_endian = match uint("byte order")? {
            0 => false,
            1 => true,
            other => return Err(Error::Parse(format!("byte order must be 0 or 1, got {other}"))),
        };
        let header_offset = match fields.get("header offset") {
            Some(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Parse("key 'header offset' is not an integer".into()))?,
            None => 0,
        };
        let wavelengths = match fields.get("wavelength") {
            Some(list) => {
                let wl = parse_list(list)?;
                if wl.len() != bands {
                    return Err(Error::Parse(format!(
                        "{} wavelengths listed for {bands} bands",
                        wl.len()
                    )));
                }
                Some(wl)
            }
            None => None,
        };
        if samples == 0 || lines == 0 || bands == 0 {
            return Err(Error::Parse("samples, lines and bands must be positive".into()));
        }
        Ok(Self {
            samples,
            lines,
            bands,
            interleave,
            data_type,
            big_endian,
            header_offset,
            wavelengths,
            fields,
        })
    }

    pub fn payload_len(&self) -> usize {
        self.samples * self.lines * self.bands * self.data_type.size()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("ENVI\n");
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "lines = {}", self.lines);
        let _ = writeln!(s, "bands = {}", self.bands);
        let _ = writeln!(s, "header offset = {}", self.header_offset);
        let _ = writeln!(s, "data type = {}", self.data_type.code());
        let _ = writeln!(s, "interleave = {}", self.interleave.as_str());
        let _ = writeln!(s, "byte order = {}", u8::from(self.big_endian));
        if let Some(wl) = &self.wavelengths {
            let items: Vec<String> = wl.iter().map(|w| format!("{w}")).collect();
            let _ = writeln!(s, "wavelength units = Nanometers");
            let _ = writeln!(s, "wavelength = {{{}}}", items.join(", "));
        }
        s
    }
}

fn parse_fields(text: &str) -> Result<BTreeMap<String, String>> {
    let mut fields = BTreeMap::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() || line.eq_ignore_ascii_case("ENVI") || line.starts_with(';') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse(format!("header line without '=': {line}")));
        };
        let key = k.trim().to_ascii_lowercase();
        let mut value = v.trim().to_string();
        if value.starts_with('{') {
            while !value.contains('}') {
                let Some(next) = lines.next() else {
                    return Err(Error::Parse(format!("unterminated '{{' for key '{key}'")));
                };
                value.push(' ');
                value.push_str(next.trim());
            }
        }
        fields.insert(key, value);
    }
    Ok(fields)
}

fn parse_list(value: &str) -> Result<Vec<f64>> {
    let inner = value.trim().trim_start_matches('{').trim_end_matches('}');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad list element '{s}'")))
        })
        .collect()
}

pub fn read_envi_header(header_path: &Path) -> Result<EnviHeader> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    EnviHeader::parse(&text)
}

/// Decodes the payload into (row, col, band) order.
pub(crate) fn decode_payload(header: &EnviHeader, bytes: &[u8]) -> Result<Array3<f64>> {
    let expected = header.header_offset + header.payload_len();
    if bytes.len() != expected {
        return Err(Error::MalformedFile(format!(
            "data file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[header.header_offset..];
    let (h, w, b) = (header.lines, header.samples, header.bands);
    let size = header.data_type.size();
    let mut out = Array3::<f64>::zeros((h, w, b));
    for ((r, c, k), v) in out.indexed_iter_mut() {
        let off = header.interleave.offset(h, w, b, r, c, k) * size;
        *v = header
            .data_type
            .decode(&payload[off..off + size], header.big_endian);
    }
    Ok(out)
}

pub(crate) fn encode_payload(
    values: &Array3<f64>,
    interleave: Interleave,
    data_type: DataType,
    big_endian: bool,
) -> Result<Vec<u8>> {
    let (h, w, b) = values.dim();
    let mut out = Vec::with_capacity(h * w * b * data_type.size());
    let mut emit = |r, c, k| data_type.encode(values[[r, c, k]], big_endian, &mut out);
    match interleave {
        Interleave::Bsq => {
            for k in 0..b {
                for r in 0..h {
                    for c in 0..w {
                        emit(r, c, k)?;
                    }
                }
            }
        }
        Interleave::Bil => {
            for r in 0..h {
                for k in 0..b {
                    for c in 0..w {
                        emit(r, c, k)?;
                    }
                }
            }
        }
        Interleave::Bip => {
            for r in 0..h {
                for c in 0..w {
                    for k in 0..b {
                        emit(r, c, k)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reads a cube; wavelengths come from the header or default to band indices.
pub fn read_envi(header_path: &Path, data_path: &Path) -> Result<SpectralCube> {
    let header = read_envi_header(header_path)?;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let values = decode_payload(&header, &bytes)?;
    match header.wavelengths {
        Some(wl) => SpectralCube::new(values, wl),
        None => SpectralCube::with_index_wavelengths(values),
    }
}

pub fn write_envi(
    cube: &SpectralCube,
    header_path: &Path,
    data_path: &Path,
    interleave: Interleave,
    data_type: DataType,
) -> Result<()> {
    let header = EnviHeader {
        samples: cube.width(),
        lines: cube.height(),
        bands: cube.bands(),
        interleave,
        data_type,
        big_endian: false,
        header_offset: 0,
        wavelengths: Some(cube.wavelengths().to_vec()),
        fields: BTreeMap::new(),
    };
    let bytes = encode_payload(cube.values(), interleave, data_type, false)?;
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    fs::write(header_path, header.to_text()).map_err(|e| Error::io(header_path, e))
}
