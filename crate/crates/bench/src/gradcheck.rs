//! Analytic adapter gradients against central finite differences, for each
//! loss term and the combined objective, on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use ssam_core::encoders::{CategoryEmbeddings, ConvConfig, Encoder, EncoderConfig, Image, ImageShape, VitConfig};
use ssam_core::numerics::{relative_error, Matrix, Tape, DEFAULT_FD_STEP};
use ssam_core::objectives::{objective_on_tape, LossTerms, ObjectiveConfig};
use ssam_core::Error;

use crate::error::{BenchError, Result};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const IMAGE: ImageShape = ImageShape {
    channels: 3,
    height: 6,
    width: 6,
};
const VIT_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Component {
    #[serde(rename = "l_ent")]
    Entropy,
    #[serde(rename = "l_pir")]
    Reconstruction,
    #[serde(rename = "l_ca")]
    Alignment,
    #[serde(rename = "total")]
    Total,
}

impl Component {
    pub const ALL: [Component; 4] = [Self::Entropy, Self::Reconstruction, Self::Alignment, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "l_ent",
            Self::Reconstruction => "l_pir",
            Self::Alignment => "l_ca",
            Self::Total => "total",
        }
    }

    fn pick(self, t: &LossTerms) -> ssam_core::numerics::Var {
        match self {
            Self::Entropy => t.entropy,
            Self::Reconstruction => t.reconstruction,
            Self::Alignment => t.alignment,
            Self::Total => t.total,
        }
    }
}

impl std::str::FromStr for Component {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss component {s:?}")).into())
    }
}

/// Instance sizes. The adapter always has 9 tokens: a 3×3 patch grid for the
/// transformer, 2×2 tiles of a 6×6 map for the convolutional encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSizes {
    pub batch: usize,
    pub classes: usize,
    pub dim: usize,
    pub instances: usize,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        Self {
            batch: 8,
            classes: 4,
            dim: 16,
            instances: 20,
        }
    }
}

impl GradcheckSizes {
    pub fn validate(&self) -> Result<()> {
        let ok = (1..=16).contains(&self.batch)
            && (2..=8).contains(&self.classes)
            && (1..=32).contains(&self.dim)
            && self.instances >= 1;
        if !ok {
            return Err(Error::Config(format!(
                "gradcheck sizes need 1 <= |B| <= 16, 2 <= M <= 8, 1 <= D <= 32 and at least one instance, got {self:?}"
            ))
            .into());
        }
        Ok(())
    }
}

/// Worst relative error of one component on one encoder case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub case: String,
    pub component: Component,
    pub max_rel_err: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub sizes: GradcheckSizes,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }

    /// `Err(Gradcheck)` naming every failing component.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let names: Vec<String> = self
            .failures()
            .iter()
            .map(|e| format!("{} on {} (rel err {:.3e})", e.component.name(), e.case, e.max_rel_err))
            .collect();
        Err(BenchError::Gradcheck(names.join(", ")))
    }
}

/// Encoder cases: the transformer with the adapter before the first block,
/// between the blocks and after the last, then the convolutional encoder.
pub fn cases(dim: usize) -> Vec<(String, EncoderConfig)> {
    let mut out: Vec<(String, EncoderConfig)> = (0..=VIT_BLOCKS)
        .map(|layer| {
            let cfg = VitConfig {
                image: IMAGE,
                grid: (3, 3),
                dim,
                num_blocks: VIT_BLOCKS,
                insertion_layer: layer,
                mlp_hidden: 2 * dim,
                seed: 0,
                normalize_output: true,
            };
            (format!("vit@{layer}"), EncoderConfig::Vit(cfg))
        })
        .collect();
    out.push((
        "conv".into(),
        EncoderConfig::Conv(ConvConfig {
            image: IMAGE,
            dim,
            patch_side: 2,
            seed: 0,
            normalize_output: true,
        }),
    ));
    out
}

struct Problem {
    images: Vec<Image>,
    categories: CategoryEmbeddings,
    adapter: Matrix,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

fn problem(encoder: &Encoder, sizes: &GradcheckSizes, seed: u64, instance: usize) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance as u64);
    let shape = encoder.image_shape();
    let images = (0..sizes.batch)
        .map(|_| Image::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<ssam_core::Result<Vec<_>>>()?;
    let d = encoder.feature_dim();
    let cats = Matrix::from_vec(sizes.classes, d, (0..sizes.classes * d).map(|_| normal(&mut rng, 1.0)).collect())?;
    let (tokens, dim) = encoder.adapter_shape();
    let adapter = Matrix::from_vec(tokens, dim, (0..tokens * dim).map(|_| normal(&mut rng, 0.1)).collect())?;
    Ok(Problem {
        images,
        categories: CategoryEmbeddings::from_matrix(&cats)?,
        adapter,
    })
}

fn terms(encoder: &Encoder, p: &Problem, tape: &Tape, adapter: &Matrix, cfg: &ObjectiveConfig) -> Result<LossTerms> {
    let a = tape.param(adapter.clone());
    let feats = encoder.encode_on_tape(tape, &p.images, a)?;
    Ok(objective_on_tape(tape, feats, &p.categories, cfg))
}

fn component_values(encoder: &Encoder, p: &Problem, adapter: &Matrix, cfg: &ObjectiveConfig) -> Result<[f64; 4]> {
    let tape = Tape::new();
    let t = terms(encoder, p, &tape, adapter, cfg)?;
    let mut out = [0.0; 4];
    for (o, c) in out.iter_mut().zip(Component::ALL) {
        *o = tape.scalar(c.pick(&t))?;
    }
    Ok(out)
}

/// Central differences of all four components at once.
fn fd_gradients(encoder: &Encoder, p: &Problem, cfg: &ObjectiveConfig) -> Result<[Matrix; 4]> {
    let h = DEFAULT_FD_STEP;
    let (r, c) = p.adapter.shape();
    let mut grads = [(); 4].map(|_| Matrix::zeros(r, c));
    let mut x = p.adapter.clone();
    for i in 0..r * c {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = component_values(encoder, p, &x, cfg)?;
        x.data_mut()[i] = orig - h;
        let minus = component_values(encoder, p, &x, cfg)?;
        x.data_mut()[i] = orig;
        for k in 0..4 {
            grads[k].data_mut()[i] = (plus[k] - minus[k]) / (2.0 * h);
        }
    }
    Ok(grads)
}

fn analytic_gradients(encoder: &Encoder, p: &Problem, cfg: &ObjectiveConfig) -> Result<[Matrix; 4]> {
    let tape = Tape::new();
    let a = tape.param(p.adapter.clone());
    let feats = encoder.encode_on_tape(&tape, &p.images, a)?;
    let t = objective_on_tape(&tape, feats, &p.categories, cfg);
    let mut out = [(); 4].map(|_| Matrix::zeros(0, 0));
    for (o, c) in out.iter_mut().zip(Component::ALL) {
        *o = tape.gradient(c.pick(&t), a)?;
    }
    Ok(out)
}

/// Runs every case with α = β = 1. `corrupt` is applied to the analytic
/// gradient of each component before comparison; it exists to exercise the
/// failure path.
pub fn gradcheck_with(
    seed: u64,
    sizes: &GradcheckSizes,
    corrupt: Option<&dyn Fn(Component, &mut Matrix)>,
) -> Result<GradcheckReport> {
    sizes.validate()?;
    let cfg = ObjectiveConfig::default();
    let mut entries = Vec::new();
    for (case, enc_cfg) in cases(sizes.dim) {
        let encoder = Encoder::new(&enc_cfg)?;
        let mut worst = [(0.0f64, 0usize); 4];
        for k in 0..sizes.instances {
            let p = problem(&encoder, sizes, seed, k)?;
            let mut analytic = analytic_gradients(&encoder, &p, &cfg)?;
            let fd = fd_gradients(&encoder, &p, &cfg)?;
            for (j, c) in Component::ALL.into_iter().enumerate() {
                if let Some(f) = corrupt {
                    f(c, &mut analytic[j]);
                }
                let err = relative_error(&analytic[j], &fd[j]);
                let err = if err.is_finite() { err } else { f64::INFINITY };
                if err > worst[j].0 || k == 0 {
                    worst[j] = (err, k);
                }
            }
        }
        for (j, c) in Component::ALL.into_iter().enumerate() {
            entries.push(GradcheckEntry {
                case: case.clone(),
                component: c,
                max_rel_err: worst[j].0,
                worst_instance: worst[j].1,
                passed: worst[j].0 <= GRADCHECK_TOLERANCE,
            });
        }
    }
    Ok(GradcheckReport {
        seed,
        sizes: *sizes,
        tolerance: GRADCHECK_TOLERANCE,
        entries,
    })
}

pub fn gradcheck(seed: u64, sizes: &GradcheckSizes) -> Result<GradcheckReport> {
    gradcheck_with(seed, sizes, None)
}
