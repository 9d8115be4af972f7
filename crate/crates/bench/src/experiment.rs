//! Adaptation runs with diagnostics, the loss-component and α/β ablation,
//! and the seeded benchmark used by the acceptance harness.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use ssam_core::adaptation::{encode_all, run_stream, AdaptConfig, AdaptReport, Dataset};
use ssam_core::encoders::{CategoryEmbeddings, Encoder, EncoderConfig, VitConfig};
use ssam_core::Error;

use crate::error::Result;
use crate::report::{summarize, AccuracyRow, Diagnostics, ReportBundle};
use crate::synth::{generate_dataset, SyntheticShiftSpec};

/// Inner optimiser steps per batch on the benchmark. Four batches of 64 at
/// lr 1e-4 move the adapter by at most ~4e-4 with a single step, which
/// leaves every prediction unchanged.
pub const BENCHMARK_STEPS_PER_BATCH: usize = 50;

/// Thread cap for ablation cells.
pub const THREADS_ENV: &str = "SSAM_THREADS";

/// Which loss terms a cell keeps on top of the entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMask {
    #[serde(rename = "ent-only")]
    EntOnly,
    #[serde(rename = "ent+pir")]
    EntPir,
    #[serde(rename = "ent+ca")]
    EntCa,
    #[serde(rename = "full")]
    Full,
}

impl LossMask {
    pub const ALL: [LossMask; 4] = [Self::EntOnly, Self::EntPir, Self::EntCa, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::EntOnly => "ent-only",
            Self::EntPir => "ent+pir",
            Self::EntCa => "ent+ca",
            Self::Full => "full",
        }
    }

    /// Effective `(α, β)` after dropping the masked terms.
    pub fn weights(self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            Self::EntOnly => (0.0, 0.0),
            Self::EntPir => (alpha, 0.0),
            Self::EntCa => (0.0, beta),
            Self::Full => (alpha, beta),
        }
    }

    /// The mask that a plain `(α, β)` pair amounts to.
    pub fn of(alpha: f64, beta: f64) -> Self {
        match (alpha > 0.0, beta > 0.0) {
            (false, false) => Self::EntOnly,
            (true, false) => Self::EntPir,
            (false, true) => Self::EntCa,
            (true, true) => Self::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub masks: Vec<LossMask>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        let sweep = vec![0.1, 0.2, 0.5, 1.0, 2.0];
        Self {
            alphas: sweep.clone(),
            betas: sweep,
            masks: LossMask::ALL.to_vec(),
        }
    }
}

impl AblationGrid {
    /// Loss masks at the single point `(α, β)`.
    pub fn masks_at(alpha: f64, beta: f64) -> Self {
        Self {
            alphas: vec![alpha],
            betas: vec![beta],
            masks: LossMask::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() || self.masks.is_empty() {
            return Err(Error::Config("ablation grid has an empty axis".into()).into());
        }
        if let Some(w) = self.alphas.iter().chain(&self.betas).find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("grid weight {w} must be finite and >= 0")).into());
        }
        Ok(())
    }

    /// `(mask, α, β)` in α-major, then β, then mask order.
    pub fn cells(&self) -> Vec<(LossMask, f64, f64)> {
        let mut out = Vec::new();
        for &a in &self.alphas {
            for &b in &self.betas {
                for &m in &self.masks {
                    out.push((m, a, b));
                }
            }
        }
        out
    }
}

/// A labelled set with its category embeddings and the seed that orders its
/// stream.
#[derive(Debug, Clone)]
pub struct Instance {
    pub dataset: Dataset,
    pub categories: CategoryEmbeddings,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub bundle: ReportBundle,
    pub run: AdaptReport,
}

fn row(encoder: &Encoder, seed: u64, mask: LossMask, alpha: f64, beta: f64, r: &AdaptReport) -> AccuracyRow {
    AccuracyRow {
        seed,
        encoder: encoder.config().family_name().to_string(),
        mask: mask.name().to_string(),
        alpha,
        beta,
        pre_accuracy: r.pre_accuracy,
        post_accuracy: r.post_accuracy,
        online_accuracy: r.online_accuracy,
        delta: r.post_accuracy - r.pre_accuracy,
    }
}

/// Adapts over `dataset` once and collects accuracy, losses, heatmaps and
/// projections before and after.
pub fn run_experiment(
    dataset: &Dataset,
    categories: &CategoryEmbeddings,
    adapt: &AdaptConfig,
    encoder: &EncoderConfig,
    per_image: bool,
) -> Result<Experiment> {
    let encoder = Encoder::new(encoder)?;
    run_experiment_with(&encoder, dataset, categories, adapt, per_image)
}

pub fn run_experiment_with(
    encoder: &Encoder,
    dataset: &Dataset,
    categories: &CategoryEmbeddings,
    adapt: &AdaptConfig,
    per_image: bool,
) -> Result<Experiment> {
    let run = run_stream(encoder, categories, dataset, adapt)?;
    let pre = encode_all(encoder, dataset.images(), &encoder.zero_adapter())?;
    let post = encode_all(encoder, dataset.images(), &run.final_adapter)?;
    let diagnostics = Diagnostics::compute(&pre, &post, dataset.labels(), categories, per_image)?;
    let mask = LossMask::of(adapt.alpha, adapt.beta);
    let accuracy = vec![row(encoder, adapt.seed, mask, adapt.alpha, adapt.beta, &run)];
    Ok(Experiment {
        bundle: ReportBundle {
            summary: summarize(&accuracy),
            accuracy,
            diagnostics: Some(diagnostics),
            loss_curve: run.history.clone(),
        },
        run,
    })
}

/// `SSAM_THREADS` if set and positive, otherwise rayon's default.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")).into()),
        },
    }
}

/// Every grid cell on every instance. Cells whose masks reduce to the same
/// effective weights share one run; rows are emitted per instance, then per
/// cell in grid order.
pub fn run_ablation(
    instances: &[Instance],
    grid: &AblationGrid,
    base: &AdaptConfig,
    encoder: &EncoderConfig,
) -> Result<ReportBundle> {
    let encoder = Encoder::new(encoder)?;
    run_ablation_with(&encoder, instances, grid, base)
}

pub fn run_ablation_with(
    encoder: &Encoder,
    instances: &[Instance],
    grid: &AblationGrid,
    base: &AdaptConfig,
) -> Result<ReportBundle> {
    grid.validate()?;
    base.validate()?;
    if instances.is_empty() {
        return Err(Error::Config("ablation needs at least one instance".into()).into());
    }
    let cells = grid.cells();
    let key = |w: (f64, f64)| (w.0.to_bits(), w.1.to_bits());
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &(m, a, b) in &cells {
        let w = m.weights(a, b);
        if !distinct.iter().any(|d| key(*d) == key(w)) {
            distinct.push(w);
        }
    }
    let jobs: Vec<(usize, (f64, f64))> = (0..instances.len())
        .flat_map(|i| distinct.iter().map(move |&w| (i, w)))
        .collect();

    let work = || {
        jobs.par_iter()
            .map(|&(i, (alpha, beta))| {
                let inst = &instances[i];
                let cfg = AdaptConfig {
                    alpha,
                    beta,
                    seed: inst.seed,
                    ..*base
                };
                run_stream(encoder, &inst.categories, &inst.dataset, &cfg).map(|r| ((i, key((alpha, beta))), r))
            })
            .collect::<ssam_core::Result<Vec<_>>>()
    };
    let results = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }?;
    let by_key: HashMap<_, _> = results.into_iter().collect();

    let mut accuracy = Vec::with_capacity(instances.len() * cells.len());
    for (i, inst) in instances.iter().enumerate() {
        for &(m, a, b) in &cells {
            let r = &by_key[&(i, key(m.weights(a, b)))];
            accuracy.push(row(encoder, inst.seed, m, a, b, r));
        }
    }
    Ok(ReportBundle {
        summary: summarize(&accuracy),
        accuracy,
        diagnostics: None,
        loss_curve: Vec::new(),
    })
}

/// Counts of positive, negative and zero differences with the one-sided
/// sign-test p-value for "positive more often". Ties are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(deltas: &[f64]) -> SignTest {
    let positive = deltas.iter().filter(|d| **d > 0.0).count();
    let negative = deltas.iter().filter(|d| **d < 0.0).count();
    let n = positive + negative;
    let p_value = if positive == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n as u64).expect("p = 0.5 is a valid probability");
        1.0 - b.cdf(positive as u64 - 1)
    };
    SignTest {
        positive,
        negative,
        ties: deltas.len() - n,
        p_value,
    }
}

/// The benchmark encoder: the default toy ViT with encoder seed 0.
pub fn benchmark_encoder() -> EncoderConfig {
    EncoderConfig::Vit(VitConfig::default())
}

/// Benchmark adaptation settings for one seed: α = β = 1, lr 1e-4, batches
/// of 64, continual Adam, [`BENCHMARK_STEPS_PER_BATCH`] steps per batch.
pub fn benchmark_adapt_config(seed: u64) -> AdaptConfig {
    AdaptConfig {
        steps_per_batch: BENCHMARK_STEPS_PER_BATCH,
        seed,
        ..AdaptConfig::default()
    }
}

/// Seed `s` of the benchmark generates its own data from the default spec
/// and visits it in the order fixed by the same seed.
pub fn benchmark_instance(encoder: &Encoder, seed: u64) -> Result<Instance> {
    let bench = generate_dataset(&SyntheticShiftSpec::default().with_seed(seed), encoder)?;
    Ok(Instance {
        dataset: bench.file.to_dataset()?,
        categories: bench.categories,
        seed,
    })
}
