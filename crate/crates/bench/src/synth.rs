//! Synthetic classification sets with a pixel-space distribution shift.
//!
//! Each class has one random template image; samples are the template plus
//! Gaussian noise, and the shift is applied to every sample afterwards. The
//! category embeddings are the frozen encoder's normalised features of the
//! unshifted templates, so the frozen pipeline classifies clean samples well
//! and loses accuracy only through the shift.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use ssam_core::adaptation::{accuracy, predict};
use ssam_core::encoders::{CategoryEmbeddings, Encoder, Image, ImageShape};
use ssam_core::numerics::Matrix;
use ssam_core::Error;

use crate::dataset::DatasetFile;
use crate::error::{BenchError, Result};

// independent RNG streams per generation stage
const STREAM_TEMPLATES: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_SHIFT: u64 = 2;
const STREAM_ORDER: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// A fixed random pattern, scaled by the magnitude, added to every sample.
    AdditiveBias,
    /// Fresh per-pixel noise with standard deviation equal to the magnitude.
    PixelNoise,
    /// Every RGB pixel rotated about the grey axis by the magnitude in radians.
    ChannelRotation,
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AdditiveBias => "additive-bias",
            Self::PixelNoise => "pixel-noise",
            Self::ChannelRotation => "channel-rotation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticShiftSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image: ImageShape,
    pub seed: u64,
    pub shift: ShiftKind,
    pub shift_magnitude: f64,
    pub sample_noise: f64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            images_per_class: 64,
            image: ImageShape::new(3, 12, 12),
            seed: 0,
            shift: ShiftKind::AdditiveBias,
            shift_magnitude: 0.5,
            sample_noise: 0.5,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Core(Error::Config(m)));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.images_per_class == 0 || self.image.is_empty() {
            return bad("empty dataset spec".into());
        }
        for (name, v) in [("shift_magnitude", self.shift_magnitude), ("sample_noise", self.sample_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.shift == ShiftKind::ChannelRotation && self.image.channels != 3 {
            return bad(format!("channel rotation needs 3 channels, got {}", self.image.channels));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// A generated set together with what produced it.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub spec: SyntheticShiftSpec,
    /// Shifted samples; this is what gets adapted on.
    pub file: DatasetFile,
    /// The same samples before the shift.
    pub clean: DatasetFile,
    pub templates: Vec<Image>,
    pub categories: CategoryEmbeddings,
    pub clean_accuracy: f64,
    pub shifted_accuracy: f64,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn quantise(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Normalised frozen-encoder features of the templates, one row per class.
pub fn categories_for(encoder: &Encoder, templates: &[Image]) -> Result<CategoryEmbeddings> {
    let feats = encoder.encode_batch(templates, &encoder.zero_adapter())?;
    Ok(CategoryEmbeddings::from_matrix(&feats)?)
}

/// Rotation about `(1,1,1)/√3` by `angle` radians.
fn grey_axis_rotation(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let t = 1.0 - c;
    let a = t / 3.0;
    [
        [c + a, a - k * s, a + k * s],
        [a + k * s, c + a, a - k * s],
        [a - k * s, a + k * s, c + a],
    ]
}

fn apply_shift(spec: &SyntheticShiftSpec, samples: &mut [Vec<f64>]) {
    let mut r = rng(spec.seed, STREAM_SHIFT);
    let n = spec.image.len();
    let mag = spec.shift_magnitude;
    match spec.shift {
        ShiftKind::AdditiveBias => {
            let pattern = gaussian(&mut r, n, mag);
            for s in samples.iter_mut() {
                s.iter_mut().zip(&pattern).for_each(|(x, p)| *x += p);
            }
        }
        ShiftKind::PixelNoise => {
            for s in samples.iter_mut() {
                let noise = gaussian(&mut r, n, mag);
                s.iter_mut().zip(noise).for_each(|(x, e)| *x += e);
            }
        }
        ShiftKind::ChannelRotation => {
            let rot = grey_axis_rotation(mag);
            let plane = spec.image.height * spec.image.width;
            for s in samples.iter_mut() {
                for p in 0..plane {
                    let px = [s[p], s[plane + p], s[2 * plane + p]];
                    for (c, row) in rot.iter().enumerate() {
                        s[c * plane + p] = row.iter().zip(px).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
    }
}

fn file_from(spec: &SyntheticShiftSpec, samples: &[Vec<f64>], labels: &[u32]) -> Result<DatasetFile> {
    let pixels = samples.iter().flat_map(|s| quantise(s)).collect();
    DatasetFile::new(spec.image, spec.num_classes, pixels, labels.to_vec())
}

fn frozen_accuracy(encoder: &Encoder, file: &DatasetFile, cats: &CategoryEmbeddings) -> Result<f64> {
    let ds = file.to_dataset()?;
    let pred = predict(encoder, ds.images(), &encoder.zero_adapter(), cats)?;
    Ok(accuracy(&pred, ds.labels()))
}

/// Generates the shifted set for `spec` and checks that the frozen encoder
/// separates the unshifted samples clearly above chance.
pub fn generate_dataset(spec: &SyntheticShiftSpec, encoder: &Encoder) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    if encoder.image_shape() != spec.image {
        return Err(Error::Config(format!(
            "encoder takes {:?} images, spec asks for {:?}",
            encoder.image_shape(),
            spec.image
        ))
        .into());
    }
    let n = spec.image.len();
    let m = spec.num_classes;

    let mut tr = rng(spec.seed, STREAM_TEMPLATES);
    let template_pixels: Vec<Vec<f64>> = (0..m).map(|_| gaussian(&mut tr, n, 1.0)).collect();
    let templates = template_pixels
        .iter()
        .map(|t| Image::new(spec.image, t.iter().map(|&x| x as f32 as f64).collect()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let categories = categories_for(encoder, &templates)?;

    let mut sr = rng(spec.seed, STREAM_SAMPLES);
    let mut items: Vec<(u32, Vec<f64>)> = Vec::with_capacity(m * spec.images_per_class);
    for (c, t) in template_pixels.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            let noise = gaussian(&mut sr, n, spec.sample_noise);
            items.push((c as u32, t.iter().zip(noise).map(|(a, b)| a + b).collect()));
        }
    }
    items.shuffle(&mut rng(spec.seed, STREAM_ORDER));
    let labels: Vec<u32> = items.iter().map(|(l, _)| *l).collect();
    let mut samples: Vec<Vec<f64>> = items.into_iter().map(|(_, s)| s).collect();

    let clean = file_from(spec, &samples, &labels)?;
    let clean_accuracy = frozen_accuracy(encoder, &clean, &categories)?;
    let floor = 1.0 / m as f64 + 0.05;
    if clean_accuracy <= floor {
        return Err(BenchError::Quality(format!(
            "frozen encoder reaches only {clean_accuracy:.3} on unshifted samples (needs > {floor:.3}); lower sample_noise"
        )));
    }

    apply_shift(spec, &mut samples);
    let file = file_from(spec, &samples, &labels)?;
    let shifted_accuracy = frozen_accuracy(encoder, &file, &categories)?;
    Ok(SyntheticBenchmark {
        spec: *spec,
        file,
        clean,
        templates,
        categories,
        clean_accuracy,
        shifted_accuracy,
    })
}

/// Mean cosine between each template's frozen feature and the others'.
pub fn template_coherence(cats: &CategoryEmbeddings) -> f64 {
    let t: &Matrix = cats.matrix();
    let m = t.rows();
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum += t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    sum / (m * (m - 1)) as f64
}
