use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_true, gaussian_matrix, tile_index, vstack, AdapterParams, Image, ImageShape};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Convolutional encoder configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub image: ImageShape,
    /// Hidden channel count `D`, also the feature dimension.
    pub dim: usize,
    /// Side `s` of the square tiles that share one adapter token.
    pub patch_side: usize,
    pub seed: u64,
    /// Emit unit-norm features.
    #[serde(default = "default_true")]
    pub normalize_output: bool,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(3, 12, 12),
            dim: 16,
            patch_side: 2,
            seed: 0,
            normalize_output: true,
        }
    }
}

impl ConvConfig {
    pub fn num_tokens(&self) -> usize {
        (self.image.height / self.patch_side) * (self.image.width / self.patch_side)
    }

    fn validate(&self) -> Result<()> {
        let s = self.patch_side;
        if s == 0 || self.image.height % s != 0 || self.image.width % s != 0 {
            return Err(Error::Config(format!(
                "feature map {}x{} is not divisible into {s}x{s} tiles",
                self.image.height, self.image.width
            )));
        }
        if self.image.is_empty() || self.dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// A `D × H × W` hidden representation, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn from_positions(m: &Matrix, height: usize, width: usize) -> Self {
        let channels = m.cols();
        let mut data = vec![0.0; channels * height * width];
        for p in 0..height * width {
            for c in 0..channels {
                data[c * height * width + p] = m.get(p, c);
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }
}

/// Token index for every raster position of an `height × width` map tiled
/// into `s × s` squares, tiles numbered row-major.
fn tile_tokens(height: usize, width: usize, s: usize) -> Vec<usize> {
    let per_row = width / s;
    (0..height * width)
        .map(|p| (p / width / s) * per_row + (p % width) / s)
        .collect()
}

/// Adds adapter token `i`, replicated over an `s × s` tile, to the `i`-th tile
/// of the feature map.
pub fn apply_adapter_conv(map: &FeatureMap, adapter: &AdapterParams, s: usize) -> Result<FeatureMap> {
    if s == 0 || map.height % s != 0 || map.width % s != 0 {
        return Err(Error::Config(format!(
            "feature map {}x{} is not divisible into {s}x{s} tiles",
            map.height, map.width
        )));
    }
    let tokens = (map.height / s) * (map.width / s);
    if adapter.num_tokens() != tokens || adapter.dim() != map.channels {
        return Err(Error::dim(
            "apply_adapter_conv",
            format!(
                "adapter {}x{} for {tokens} tiles of {} channels",
                adapter.num_tokens(),
                adapter.dim(),
                map.channels
            ),
        ));
    }
    let mut out = map.clone();
    let hw = map.height * map.width;
    for (p, &t) in tile_tokens(map.height, map.width, s).iter().enumerate() {
        for c in 0..map.channels {
            out.data[c * hw + p] += adapter.tokens().get(t, c);
        }
    }
    Ok(out)
}

/// im2col gather indices for a 3×3, stride-1, zero-padded convolution over a
/// batch of `(height·width) × channels` maps stacked vertically.
fn conv3x3_index(batch: usize, height: usize, width: usize, channels: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(batch * height * width * 9 * channels);
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                for k in 0..9 {
                    let ny = y as isize + (k / 3) as isize - 1;
                    let nx = x as isize + (k % 3) as isize - 1;
                    let inside = ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width;
                    for c in 0..channels {
                        idx.push(inside.then(|| {
                            ((b * height * width) + ny as usize * width + nx as usize) * channels + c
                        }));
                    }
                }
            }
        }
    }
    idx
}

/// A small convolutional encoder: one 3×3 convolution producing the hidden
/// map, adapter injection, two further 3×3 convolutions and global average
/// pooling.
#[derive(Debug, Clone)]
pub struct ToyConvEncoder {
    config: ConvConfig,
    conv1: Matrix,
    bias1: Matrix,
    conv2: Matrix,
    bias2: Matrix,
    conv3: Matrix,
    bias3: Matrix,
}

impl ToyConvEncoder {
    pub fn new(config: ConvConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let cin = config.image.channels;
        let sd_in = 1.0 / ((9 * cin) as f64).sqrt();
        let sd = 1.0 / ((9 * d) as f64).sqrt();
        Ok(Self {
            conv1: gaussian_matrix(&mut rng, 9 * cin, d, sd_in),
            bias1: gaussian_matrix(&mut rng, 1, d, 0.1),
            conv2: gaussian_matrix(&mut rng, 9 * d, d, sd),
            bias2: gaussian_matrix(&mut rng, 1, d, 0.1),
            conv3: gaussian_matrix(&mut rng, 9 * d, d, sd),
            bias3: gaussian_matrix(&mut rng, 1, d, 0.1),
            config,
        })
    }

    pub fn config(&self) -> &ConvConfig {
        &self.config
    }

    pub fn adapter_shape(&self) -> (usize, usize) {
        (self.config.num_tokens(), self.config.dim)
    }

    pub(super) fn weights(&self) -> Vec<&Matrix> {
        vec![
            &self.conv1,
            &self.bias1,
            &self.conv2,
            &self.bias2,
            &self.conv3,
            &self.bias3,
        ]
    }

    fn first_layer_positions(&self, image: &Image) -> Result<Matrix> {
        let s = image.shape();
        let pos = image.to_positions();
        let idx = conv3x3_index(1, s.height, s.width, s.channels);
        let cols = 9 * s.channels;
        let data: Vec<f64> = idx
            .iter()
            .map(|i| i.map_or(0.0, |i| pos.data()[i]))
            .collect();
        let patches = Matrix::from_vec(s.height * s.width, cols, data)?;
        let mut out = patches.matmul(&self.conv1)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(self.bias1.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Output `O` of the first convolution, before the adapter.
    pub fn hidden(&self, image: &Image) -> Result<FeatureMap> {
        let s = image.shape();
        Ok(FeatureMap::from_positions(
            &self.first_layer_positions(image)?,
            s.height,
            s.width,
        ))
    }

    pub(super) fn forward(&self, tape: &Tape, images: &[Image], adapter: Var) -> Result<Var> {
        let ImageShape { height, width, .. } = self.config.image;
        let d = self.config.dim;
        let batch = images.len();
        let hw = height * width;
        let first: Vec<Matrix> = images
            .iter()
            .map(|img| self.first_layer_positions(img))
            .collect::<Result<_>>()?;
        let hidden = tape.constant(vstack(&first)?);
        let tokens = tile_tokens(height, width, self.config.patch_side);
        let tiled = tape.gather(adapter, batch * hw, d, tile_index(batch, &tokens, d));
        let x = tape.tanh(tape.add(hidden, tiled));

        let conv = |x: Var, w: &Matrix, b: &Matrix| {
            let cols = tape.gather(x, batch * hw, 9 * d, conv3x3_index(batch, height, width, d));
            tape.add_row(tape.matmul(cols, tape.constant(w.clone())), tape.constant(b.clone()))
        };
        let x = tape.tanh(conv(x, &self.conv2, &self.bias2));
        let x = conv(x, &self.conv3, &self.bias3);
        let out = tape.block_row_mean(x, hw);
        Ok(if self.config.normalize_output { tape.row_normalize(out) } else { out })
    }
}
