use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gaussian_matrix, sha256_hex};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, NORM_EPS};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SSAMEMB1";
const HEADER_LEN: usize = 16;
const MAX_DRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    SeededOrthonormal { seed: u64 },
    File,
    Derived,
}

/// The fixed `M × D` category matrix `T`, rows unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEmbeddings {
    matrix: Matrix,
    source: EmbeddingSource,
}

impl CategoryEmbeddings {
    /// Unit rows from any matrix with at least two nonzero rows.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::with_source(m, EmbeddingSource::Derived)
    }

    fn with_source(m: &Matrix, source: EmbeddingSource) -> Result<Self> {
        if m.rows() < 2 || m.cols() == 0 {
            return Err(Error::Config(format!(
                "need at least 2 categories with nonzero dimension, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::degenerate("category_embeddings", "non-finite entry"));
        }
        Ok(Self {
            matrix: m.row_normalize()?,
            source,
        })
    }

    /// Orthonormal rows from Gram–Schmidt on seeded Gaussian draws. A draw
    /// whose residual is nearly parallel to earlier rows is rejected and
    /// redrawn.
    pub fn seeded_orthonormal(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(Error::Config(format!(
                "need M >= 2 and D >= 2, got M={num_classes}, D={dim}"
            )));
        }
        if num_classes > dim {
            return Err(Error::Config(format!(
                "cannot place {num_classes} orthonormal categories in {dim} dimensions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while rows.len() < num_classes {
            let mut accepted = false;
            for _ in 0..MAX_DRAWS {
                let draw = gaussian_matrix(&mut rng, 1, dim, 1.0).into_data();
                let draw_norm = draw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut v = draw.clone();
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                // residual must keep a fair share of the draw
                if norm > NORM_EPS && norm > 0.1 * draw_norm {
                    v.iter_mut().for_each(|x| *x /= norm);
                    let ok = rows
                        .iter()
                        .all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() < 0.5);
                    if ok {
                        rows.push(v);
                        accepted = true;
                        break;
                    }
                }
            }
            if !accepted {
                return Err(Error::Config("failed to draw separated category embeddings".into()));
            }
        }
        Self::with_source(&Matrix::from_rows(&rows)?, EmbeddingSource::SeededOrthonormal { seed })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.matrix.to_le_bytes())
    }

    /// `SSAMEMB1`, u32 M, u32 D, then `M × D` little-endian f32, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.matrix.data().len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.matrix.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses the binary form and re-normalises every row.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                detail: format!("expected {HEADER_LEN}-byte header, file has {} bytes", bytes.len()),
            });
        }
        if &bytes[..8] != EMBEDDING_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected SSAMEMB1".into(),
            });
        }
        let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + 4 * m * d;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                detail: format!("expected {expected} bytes for {m}x{d} embeddings, found {}", bytes.len()),
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::with_source(&Matrix::from_vec(m, d, data)?, EmbeddingSource::File)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
