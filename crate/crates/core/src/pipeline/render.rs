use std::path::Path;

use image::{Rgb, RgbImage};

use crate::datacube::LabelMap;
use crate::error::{Error, Result};

/// Class index to RGB color; index 0 is the unlabeled background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

const DEFAULT_COLORS: [[u8; 3]; 17] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

impl Default for Palette {
    /// Background plus 16 classes.
    fn default() -> Self {
        Self {
            colors: DEFAULT_COLORS.to_vec(),
        }
    }
}

impl Palette {
    /// `colors[0]` must be black and all entries distinct.
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.first() != Some(&[0, 0, 0]) {
            return Err(Error::InvalidArgument("palette entry 0 must be black".into()));
        }
        for (i, c) in colors.iter().enumerate() {
            if colors[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("palette color {c:?} repeats at index {i}")));
            }
        }
        Ok(Self { colors })
    }

    /// Highest class index the palette can draw.
    pub fn max_class(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn color(&self, class: u16) -> Option<[u8; 3]> {
        self.colors.get(class as usize).copied()
    }
}

/// Writes an 8-bit RGB PNG with one pixel per raster cell.
pub fn render_map(labels: &LabelMap, palette: &Palette, path: &Path) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((r, c), &l) in labels.labels().indexed_iter() {
        let rgb = palette.color(l).ok_or_else(|| {
            Error::OutOfRange(format!("label {l} exceeds palette with {} classes", palette.max_class()))
        })?;
        img.put_pixel(c as u32, r as u32, Rgb(rgb));
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))
}
