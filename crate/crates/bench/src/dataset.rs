//! Binary dataset files.
//!
//! Layout, all little-endian: `SSAMDS01`, u32 version, u32 count, u32 C,
//! u32 H, u32 W, u32 M, `count·C·H·W` f32 pixels (channel-major per image),
//! then `count` u32 labels.

use std::fs;
use std::path::Path;

use ssam_core::adaptation::Dataset;
use ssam_core::encoders::{Image, ImageShape};
use ssam_core::Error;

use crate::error::Result;

pub const DATASET_MAGIC: &[u8; 8] = b"SSAMDS01";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    shape: ImageShape,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<u32>,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

impl DatasetFile {
    pub fn new(shape: ImageShape, num_classes: usize, pixels: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")).into());
        }
        if shape.is_empty() || pixels.len() != labels.len() * shape.len() {
            return Err(Error::Config(format!(
                "{} pixels do not make {} images of {}x{}x{}",
                pixels.len(),
                labels.len(),
                shape.channels,
                shape.height,
                shape.width
            ))
            .into());
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Config(format!("label {l} out of range for {num_classes} classes")).into());
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Degenerate {
                op: "dataset",
                detail: "non-finite pixel".into(),
            }.into());
        }
        Ok(Self {
            shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> Image {
        let n = self.shape.len();
        let data = self.pixels[i * n..(i + 1) * n].iter().map(|&p| p as f64).collect();
        Image::new(self.shape, data).expect("pixels validated on construction")
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let images = (0..self.len()).map(|i| self.image(i)).collect();
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        Ok(Dataset::new(images, labels, self.num_classes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.pixels.len() + self.labels.len()));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.len() as u32,
            self.shape.channels as u32,
            self.shape.height as u32,
            self.shape.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(
                bytes.len(),
                format!("expected {HEADER_LEN}-byte header, found {} bytes", bytes.len()),
            )
            .into());
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(format_err(0, "bad magic, expected SSAMDS01").into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != DATASET_VERSION {
            return Err(format_err(8, format!("unsupported version {version}")).into());
        }
        let count = word(1) as usize;
        let shape = ImageShape::new(word(2) as usize, word(3) as usize, word(4) as usize);
        let m = word(5) as usize;
        if m < 2 {
            return Err(format_err(28, format!("class count {m} below 2")).into());
        }
        let pixel_count = count
            .checked_mul(shape.len())
            .ok_or_else(|| format_err(12, "image count overflows"))?;
        let expected = HEADER_LEN + 4 * (pixel_count + count);
        if bytes.len() != expected {
            return Err(format_err(
                bytes.len().min(expected),
                format!("expected {expected} bytes, found {}", bytes.len()),
            )
            .into());
        }
        let label_start = HEADER_LEN + 4 * pixel_count;
        let mut pixels = Vec::with_capacity(pixel_count);
        for (i, c) in bytes[HEADER_LEN..label_start].chunks_exact(4).enumerate() {
            let p = f32::from_le_bytes(c.try_into().unwrap());
            if !p.is_finite() {
                return Err(format_err(HEADER_LEN + 4 * i, "non-finite pixel").into());
            }
            pixels.push(p);
        }
        let mut labels = Vec::with_capacity(count);
        for (i, c) in bytes[label_start..].chunks_exact(4).enumerate() {
            let l = u32::from_le_bytes(c.try_into().unwrap());
            if l as usize >= m {
                return Err(format_err(label_start + 4 * i, format!("label {l} out of range for {m} classes")).into());
            }
            labels.push(l);
        }
        Self::new(shape, m, pixels, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
