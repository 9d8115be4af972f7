//! Frozen toy image encoders, the two adapter designs and the fixed
//! category-embedding matrix.

mod category;
mod conv;
mod vit;

pub use category::{CategoryEmbeddings, EmbeddingSource, EMBEDDING_MAGIC};
pub use conv::{apply_adapter_conv, ConvConfig, FeatureMap, ToyConvEncoder};
pub use vit::{apply_adapter_vit, patchify_pixels, ToyVitEncoder, VitBlockWeights, VitConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A test image stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || data.len() != shape.len() {
            return Err(Error::dim(
                "image",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::degenerate("image", "non-finite pixel"));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Pixels as a `(height·width) × channels` matrix, rows in raster order.
    pub fn to_positions(&self) -> Matrix {
        let ImageShape {
            channels,
            height,
            width,
        } = self.shape;
        let mut m = Matrix::zeros(height * width, channels);
        for c in 0..channels {
            for p in 0..height * width {
                m.set(p, c, self.data[c * height * width + p]);
            }
        }
        m
    }
}

/// The learnable adapter tokens, one `D`-vector per patch (or spatial tile).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams(Matrix);

impl AdapterParams {
    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self(Matrix::zeros(tokens, dim))
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::degenerate("adapter", "non-finite adapter entry"));
        }
        Ok(Self(m))
    }

    pub fn tokens(&self) -> &Matrix {
        &self.0
    }

    pub fn num_tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.0.to_le_bytes())
    }
}

/// Either encoder family, built from an [`EncoderConfig`].
#[derive(Debug, Clone)]
pub enum Encoder {
    Vit(ToyVitEncoder),
    Conv(ToyConvEncoder),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum EncoderConfig {
    Vit(VitConfig),
    Conv(ConvConfig),
}

impl EncoderConfig {
    pub fn image_shape(&self) -> ImageShape {
        match self {
            EncoderConfig::Vit(c) => c.image,
            EncoderConfig::Conv(c) => c.image,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            EncoderConfig::Vit(_) => "vit",
            EncoderConfig::Conv(_) => "conv",
        }
    }
}

impl Encoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        Ok(match config {
            EncoderConfig::Vit(c) => Encoder::Vit(ToyVitEncoder::new(c.clone())?),
            EncoderConfig::Conv(c) => Encoder::Conv(ToyConvEncoder::new(c.clone())?),
        })
    }

    pub fn config(&self) -> EncoderConfig {
        match self {
            Encoder::Vit(e) => EncoderConfig::Vit(e.config().clone()),
            Encoder::Conv(e) => EncoderConfig::Conv(e.config().clone()),
        }
    }

    /// `(N, D)` of the adapter this encoder accepts.
    pub fn adapter_shape(&self) -> (usize, usize) {
        match self {
            Encoder::Vit(e) => e.adapter_shape(),
            Encoder::Conv(e) => e.adapter_shape(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.adapter_shape().1
    }

    pub fn image_shape(&self) -> ImageShape {
        self.config().image_shape()
    }

    pub fn zero_adapter(&self) -> AdapterParams {
        let (n, d) = self.adapter_shape();
        AdapterParams::zeros(n, d)
    }

    /// Records the batched forward pass on `tape`. Returns the `|B| × D`
    /// feature matrix; `adapter` must be an `N × D` node.
    pub fn encode_on_tape(&self, tape: &Tape, images: &[Image], adapter: Var) -> Result<Var> {
        self.check_images(images)?;
        Ok(match self {
            Encoder::Vit(e) => e.forward(tape, images, adapter)?,
            Encoder::Conv(e) => e.forward(tape, images, adapter)?,
        })
    }

    /// Features of a batch under the given adapter, one row per image.
    pub fn encode_batch(&self, images: &[Image], adapter: &AdapterParams) -> Result<Matrix> {
        self.check_adapter(adapter)?;
        let tape = Tape::new();
        let a = tape.constant(adapter.tokens().clone());
        let v = self.encode_on_tape(&tape, images, a)?;
        tape.try_value(v)
    }

    pub fn encode(&self, image: &Image, adapter: &AdapterParams) -> Result<Vec<f64>> {
        Ok(self
            .encode_batch(std::slice::from_ref(image), adapter)?
            .into_data())
    }

    pub fn check_adapter(&self, adapter: &AdapterParams) -> Result<()> {
        let want = self.adapter_shape();
        let got = (adapter.num_tokens(), adapter.dim());
        if want != got {
            return Err(Error::dim(
                "encode",
                format!("adapter is {got:?}, encoder expects {want:?}"),
            ));
        }
        Ok(())
    }

    fn check_images(&self, images: &[Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::dim("encode", "empty image batch"));
        }
        let want = self.image_shape();
        if let Some(bad) = images.iter().find(|i| i.shape() != want) {
            return Err(Error::dim(
                "encode",
                format!("image shape {:?}, encoder expects {want:?}", bad.shape()),
            ));
        }
        Ok(())
    }

    /// Serialised frozen weights, in a fixed order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mats = match self {
            Encoder::Vit(e) => e.weights(),
            Encoder::Conv(e) => e.weights(),
        };
        for m in mats {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    /// SHA-256 of [`Encoder::weight_bytes`], hex encoded.
    pub fn weights_checksum(&self) -> String {
        sha256_hex(&self.weight_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// `I − J/D`: right-multiplying by this subtracts each row's mean.
pub(crate) fn centering_matrix(dim: usize) -> Matrix {
    let mut m = Matrix::filled(dim, dim, -1.0 / dim as f64);
    for i in 0..dim {
        m.set(i, i, 1.0 - 1.0 / dim as f64);
    }
    m
}

/// Gather indices that repeat adapter token `token_of[p]` at row `p` for
/// every image in a batch of `batch` (rows are `batch × token_of.len()`).
pub(crate) fn tile_index(batch: usize, token_of: &[usize], dim: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(batch * token_of.len() * dim);
    for _ in 0..batch {
        for &t in token_of {
            idx.extend((0..dim).map(|d| Some(t * dim + d)));
        }
    }
    idx
}

/// Stacks rows of several matrices with equal column counts.
pub(crate) fn vstack(parts: &[Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, Matrix::cols);
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data().len()).sum());
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::dim("vstack", "column counts differ"));
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Matrix::from_vec(rows, cols, data)
}


pub(crate) fn default_true() -> bool {
    true
}
