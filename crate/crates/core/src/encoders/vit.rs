use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{centering_matrix, default_true, gaussian_matrix, tile_index, vstack, AdapterParams, Image, ImageShape};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Patch-transformer encoder configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image: ImageShape,
    /// Patch grid as (rows, cols); `N = rows × cols`.
    pub grid: (usize, usize),
    pub dim: usize,
    pub num_blocks: usize,
    /// Adapter tokens are added right before this block. `num_blocks` means
    /// after the last block.
    pub insertion_layer: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    /// Emit unit-norm features.
    #[serde(default = "default_true")]
    pub normalize_output: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(3, 12, 12),
            grid: (3, 3),
            dim: 16,
            num_blocks: 3,
            insertion_layer: 0,
            mlp_hidden: 32,
            seed: 0,
            normalize_output: true,
        }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn patch_size(&self) -> (usize, usize) {
        (self.image.height / self.grid.0, self.image.width / self.grid.1)
    }

    fn patch_input_dim(&self) -> usize {
        let (ph, pw) = self.patch_size();
        self.image.channels * ph * pw
    }

    fn validate(&self) -> Result<()> {
        let (gr, gc) = self.grid;
        if gr == 0 || gc == 0 || self.image.height % gr != 0 || self.image.width % gc != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into a {gr}x{gc} patch grid",
                self.image.height, self.image.width
            )));
        }
        if self.image.is_empty() || self.dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.insertion_layer > self.num_blocks {
            return Err(Error::Config(format!(
                "insertion layer {} exceeds block count {}",
                self.insertion_layer, self.num_blocks
            )));
        }
        Ok(())
    }
}

/// Frozen weights of one attention + MLP block.
#[derive(Debug, Clone)]
pub struct VitBlockWeights {
    query: Matrix,
    key: Matrix,
    value: Matrix,
    out: Matrix,
    mlp_in: Matrix,
    mlp_in_bias: Matrix,
    mlp_out: Matrix,
    mlp_out_bias: Matrix,
}

/// A miniature patch transformer: linear patch embedding, a stack of
/// mean-centred single-head attention blocks with tanh MLPs, mean pooling
/// over patches and a linear head. The adapter adds one token per patch.
#[derive(Debug, Clone)]
pub struct ToyVitEncoder {
    config: VitConfig,
    embed: Matrix,
    embed_bias: Matrix,
    blocks: Vec<VitBlockWeights>,
    head: Matrix,
    centering: Matrix,
}

impl ToyVitEncoder {
    pub fn new(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let h = config.mlp_hidden;
        let p = config.patch_input_dim();
        let sd = 1.0 / (d as f64).sqrt();

        let embed = gaussian_matrix(&mut rng, p, d, 1.0 / (p as f64).sqrt());
        let embed_bias = gaussian_matrix(&mut rng, 1, d, 0.1);
        let blocks = (0..config.num_blocks)
            .map(|_| VitBlockWeights {
                query: gaussian_matrix(&mut rng, d, d, sd),
                key: gaussian_matrix(&mut rng, d, d, sd),
                value: gaussian_matrix(&mut rng, d, d, sd),
                out: gaussian_matrix(&mut rng, d, d, sd),
                mlp_in: gaussian_matrix(&mut rng, d, h, sd),
                mlp_in_bias: gaussian_matrix(&mut rng, 1, h, 0.1),
                mlp_out: gaussian_matrix(&mut rng, h, d, 1.0 / (h as f64).sqrt()),
                mlp_out_bias: gaussian_matrix(&mut rng, 1, d, 0.1),
            })
            .collect();
        let head = gaussian_matrix(&mut rng, d, d, sd);
        Ok(Self {
            centering: centering_matrix(d),
            config,
            embed,
            embed_bias,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn adapter_shape(&self) -> (usize, usize) {
        (self.config.num_patches(), self.config.dim)
    }

    pub(super) fn weights(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed, &self.embed_bias];
        for b in &self.blocks {
            out.extend([
                &b.query,
                &b.key,
                &b.value,
                &b.out,
                &b.mlp_in,
                &b.mlp_in_bias,
                &b.mlp_out,
                &b.mlp_out_bias,
            ]);
        }
        out.push(&self.head);
        out
    }

    /// Patch embeddings `p₁..p_N` of one image (`N × D`).
    pub fn patchify(&self, image: &Image) -> Result<Matrix> {
        let pixels = patchify_pixels(image, self.config.grid)?;
        let mut emb = pixels.matmul(&self.embed)?;
        for r in 0..emb.rows() {
            for (v, b) in emb.row_mut(r).iter_mut().zip(self.embed_bias.data()) {
                *v += b;
            }
        }
        Ok(emb)
    }

    pub(super) fn forward(&self, tape: &Tape, images: &[Image], adapter: Var) -> Result<Var> {
        let n = self.config.num_patches();
        let d = self.config.dim;
        let patches: Vec<Matrix> = images
            .iter()
            .map(|img| self.patchify(img))
            .collect::<Result<_>>()?;
        let mut x = tape.constant(vstack(&patches)?);
        let tokens: Vec<usize> = (0..n).collect();
        let centering = tape.constant(self.centering.clone());

        for layer in 0..=self.blocks.len() {
            if layer == self.config.insertion_layer {
                let tiled = tape.gather(adapter, images.len() * n, d, tile_index(images.len(), &tokens, d));
                x = tape.add(x, tiled);
            }
            if let Some(block) = self.blocks.get(layer) {
                x = self.block(tape, block, x, centering);
            }
        }
        let pooled = tape.block_row_mean(x, n);
        let head = tape.constant(self.head.clone());
        let out = tape.matmul(pooled, head);
        Ok(if self.config.normalize_output { tape.row_normalize(out) } else { out })
    }

    fn block(&self, tape: &Tape, w: &VitBlockWeights, x: Var, centering: Var) -> Var {
        let n = self.config.num_patches();
        let c = tape.matmul(x, centering);
        let q = tape.matmul(c, tape.constant(w.query.clone()));
        let k = tape.matmul(c, tape.constant(w.key.clone()));
        let v = tape.matmul(c, tape.constant(w.value.clone()));
        let scores = tape.scale(tape.block_matmul_nt(q, k, n), 1.0 / (self.config.dim as f64).sqrt());
        let attn = tape.row_softmax(scores);
        let mixed = tape.block_matmul(attn, v, n);
        let x = tape.add(x, tape.matmul(mixed, tape.constant(w.out.clone())));

        let c = tape.matmul(x, centering);
        let hidden = tape.add_row(
            tape.matmul(c, tape.constant(w.mlp_in.clone())),
            tape.constant(w.mlp_in_bias.clone()),
        );
        let hidden = tape.tanh(hidden);
        let mlp = tape.add_row(
            tape.matmul(hidden, tape.constant(w.mlp_out.clone())),
            tape.constant(w.mlp_out_bias.clone()),
        );
        tape.add(x, mlp)
    }
}

/// Splits an image into a `rows × cols` grid of non-overlapping patches.
///
/// Patches are numbered in row-major grid order; each row of the output is
/// one patch flattened channel-first, then by row, then by column.
pub fn patchify_pixels(image: &Image, grid: (usize, usize)) -> Result<Matrix> {
    let s = image.shape();
    let (gr, gc) = grid;
    if gr == 0 || gc == 0 || s.height % gr != 0 || s.width % gc != 0 {
        return Err(Error::Config(format!(
            "image {}x{} is not divisible into a {gr}x{gc} patch grid",
            s.height, s.width
        )));
    }
    let (ph, pw) = (s.height / gr, s.width / gc);
    let mut out = Matrix::zeros(gr * gc, s.channels * ph * pw);
    for py in 0..gr {
        for px in 0..gc {
            let row = out.row_mut(py * gc + px);
            let mut k = 0;
            for c in 0..s.channels {
                for y in 0..ph {
                    for x in 0..pw {
                        row[k] = image.get(c, py * ph + y, px * pw + x);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `qᵢ = pᵢ + aᵢ` for every patch.
pub fn apply_adapter_vit(patches: &Matrix, adapter: &AdapterParams) -> Result<Matrix> {
    if patches.shape() != adapter.tokens().shape() {
        return Err(Error::dim(
            "apply_adapter_vit",
            format!(
                "{:?} patches vs {:?} adapter tokens",
                patches.shape(),
                adapter.tokens().shape()
            ),
        ));
    }
    patches.add(adapter.tokens())
}
