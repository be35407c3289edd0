//! Ground-truth label rasters: single-band ENVI uint16, or plain-text PGM (`P2`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};

use super::envi::{decode_payload, encode_payload, read_envi_header, DataType, EnviHeader, Interleave};
use super::LabelMap;
use crate::error::{Error, Result};

/// Reads ground truth from `path`: `.pgm` files are parsed as plain PGM text,
/// anything else as an ENVI header whose payload is `data` (or found next to it).
pub fn read_labels(path: &Path, data: Option<&Path>) -> Result<LabelMap> {
    let is_pgm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        return read_pgm_labels(path);
    }
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None => find_data_file(path)?,
    };
    let header = read_envi_header(path)?;
    if header.bands != 1 {
        return Err(Error::Dimension(format!(
            "label raster must have 1 band, found {}",
            header.bands
        )));
    }
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let values = decode_payload(&header, &bytes)?;
    let labels = values.index_axis(Axis(2), 0).mapv(|v| v as u16);
    if values.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64) {
        return Err(Error::MalformedFile("label raster has non-integer or negative values".into()));
    }
    LabelMap::from_labels(labels)
}

/// Locates the raw payload for an ENVI header: `<stem>.raw`, `.img`, `.dat`, `.bin` or `<stem>`.
pub fn find_data_file(header: &Path) -> Result<PathBuf> {
    for ext in ["raw", "img", "dat", "bin"] {
        let p = header.with_extension(ext);
        if p.is_file() {
            return Ok(p);
        }
    }
    let bare = header.with_extension("");
    if bare.is_file() {
        return Ok(bare);
    }
    Err(Error::Parse(format!(
        "no data file found next to header {}",
        header.display()
    )))
}

pub fn write_envi_labels(labels: &LabelMap, header_path: &Path, data_path: &Path) -> Result<()> {
    let values = labels.labels().mapv(f64::from).insert_axis(Axis(2));
    let values: Array3<f64> = values.as_standard_layout().into_owned();
    let header = EnviHeader {
        samples: labels.width(),
        lines: labels.height(),
        bands: 1,
        interleave: Interleave::Bsq,
        data_type: DataType::UInt16,
        big_endian: false,
        header_offset: 0,
        wavelengths: None,
        fields: Default::default(),
    };
    let bytes = encode_payload(&values, Interleave::Bsq, DataType::UInt16, false)?;
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    fs::write(header_path, header.to_text()).map_err(|e| Error::io(header_path, e))
}

pub fn read_pgm_labels(path: &Path) -> Result<LabelMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&text)
}

fn parse_pgm(text: &str) -> Result<LabelMap> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Parse("PGM label grid must start with 'P2'".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::MalformedFile(format!("PGM ended before {what}")))?
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("PGM {what} is not an unsigned integer")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval > u16::MAX as usize {
        return Err(Error::UnsupportedFormat(format!("PGM maxval {maxval}")));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = num("pixel")?;
        if v > maxval {
            return Err(Error::MalformedFile(format!("pixel value {v} exceeds maxval {maxval}")));
        }
        data.push(v as u16);
    }
    if tokens.next().is_some() {
        return Err(Error::MalformedFile("trailing data after PGM raster".into()));
    }
    let labels = Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    LabelMap::from_labels(labels)
}

pub fn write_pgm_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let maxval = labels.labels().iter().copied().max().unwrap_or(0).max(1);
    let mut s = format!("P2\n{} {}\n{}\n", labels.width(), labels.height(), maxval);
    for row in labels.labels().rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
