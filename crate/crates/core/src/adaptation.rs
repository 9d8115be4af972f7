//! Test-time adaptation loop: only the adapter is optimised, the encoder and
//! category embeddings stay frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{AdapterParams, CategoryEmbeddings, Encoder, Image};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, Matrix, Tape};
use crate::objectives::{objective_on_tape, LossBreakdown, ObjectiveConfig};

/// Images encoded per parallel work item during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// One adapter carried across the whole stream.
    Continual,
    /// Adapter and optimiser state reset before every batch.
    Episodic,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continual" => Ok(Self::Continual),
            "episodic" => Ok(Self::Episodic),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_per_batch: usize,
    pub mode: AdaptMode,
    pub optimizer: OptimizerKind,
    /// Seeds the order in which the stream is visited.
    pub seed: u64,
    pub temperature: Option<f64>,
    pub stop_grad_target: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 1e-4,
            batch_size: 64,
            steps_per_batch: 1,
            mode: AdaptMode::Continual,
            optimizer: OptimizerKind::default(),
            seed: 0,
            temperature: None,
            stop_grad_target: false,
        }
    }
}

impl AdaptConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
            stop_grad_target: self.stop_grad_target,
        }
    }

    /// A zero learning rate is accepted so a run can report losses without
    /// moving the adapter.
    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::Config(format!(
                    "invalid Adam parameters beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        Ok(())
    }
}

/// First-order optimiser state for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Matrix,
    v: Matrix,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, rows: usize, cols: usize) -> Self {
        Self {
            kind,
            lr,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.kind, self.lr, self.m.rows(), self.m.cols());
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut Matrix, grad: &Matrix) -> Result<()> {
        if params.shape() != grad.shape() || params.shape() != self.m.shape() {
            return Err(Error::dim(
                "optimizer_step",
                format!("params {:?}, gradient {:?}", params.shape(), grad.shape()),
            ));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.data_mut().iter_mut().zip(grad.data()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let m = self.m.data_mut();
                let v = self.v.data_mut();
                for (i, (p, &g)) in params.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Labelled image set. Labels are read only by the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::Config("images differ in shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Index of the category most cosine-similar to `feature`, lowest index on ties.
pub fn classify(feature: &[f64], categories: &CategoryEmbeddings) -> Result<usize> {
    let v = Matrix::row_vector(feature);
    Ok(classify_features(&v, categories)?[0])
}

/// [`classify`] for every row of a feature matrix.
pub fn classify_features(features: &Matrix, categories: &CategoryEmbeddings) -> Result<Vec<usize>> {
    if features.cols() != categories.dim() {
        return Err(Error::dim(
            "classify",
            format!("feature dim {} vs category dim {}", features.cols(), categories.dim()),
        ));
    }
    Ok(cosine_similarity_matrix(features, categories.matrix())?.row_argmax())
}

/// Encodes `images` in parallel chunks; rows follow input order.
pub fn encode_all(encoder: &Encoder, images: &[Image], adapter: &AdapterParams) -> Result<Matrix> {
    let parts: Vec<Matrix> = images
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| encoder.encode_batch(chunk, adapter))
        .collect::<Result<_>>()?;
    let cols = encoder.feature_dim();
    let mut data = Vec::with_capacity(images.len() * cols);
    for p in parts {
        data.extend(p.into_data());
    }
    Matrix::from_vec(images.len(), cols, data)
}

pub fn predict(
    encoder: &Encoder,
    images: &[Image],
    adapter: &AdapterParams,
    categories: &CategoryEmbeddings,
) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    classify_features(&encode_all(encoder, images, adapter)?, categories)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate(
    encoder: &Encoder,
    dataset: &Dataset,
    adapter: &AdapterParams,
    categories: &CategoryEmbeddings,
) -> Result<f64> {
    let pred = predict(encoder, dataset.images(), adapter, categories)?;
    Ok(accuracy(&pred, dataset.labels()))
}

/// Adapter plus optimiser state, advanced one batch at a time.
#[derive(Debug, Clone)]
pub struct AdaptSession<'a> {
    encoder: &'a Encoder,
    categories: &'a CategoryEmbeddings,
    cfg: AdaptConfig,
    adapter: Matrix,
    optimizer: Optimizer,
}

impl<'a> AdaptSession<'a> {
    pub fn new(encoder: &'a Encoder, categories: &'a CategoryEmbeddings, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        if encoder.feature_dim() != categories.dim() {
            return Err(Error::dim(
                "adapt",
                format!(
                    "encoder features have {} dims, categories {}",
                    encoder.feature_dim(),
                    categories.dim()
                ),
            ));
        }
        let (rows, cols) = encoder.adapter_shape();
        Ok(Self {
            encoder,
            categories,
            cfg,
            adapter: Matrix::zeros(rows, cols),
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate, rows, cols),
        })
    }

    /// Starts from `adapter` instead of zero.
    pub fn with_adapter(mut self, adapter: &AdapterParams) -> Result<Self> {
        self.encoder.check_adapter(adapter)?;
        self.adapter = adapter.tokens().clone();
        Ok(self)
    }

    pub fn adapter(&self) -> AdapterParams {
        AdapterParams::from_matrix(self.adapter.clone()).expect("adapter stays finite")
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    /// Zero adapter, fresh optimiser.
    pub fn reset(&mut self) {
        self.adapter = Matrix::zeros(self.adapter.rows(), self.adapter.cols());
        self.optimizer.reset();
    }

    /// Loss at the current adapter without taking a step.
    pub fn loss(&self, images: &[Image]) -> Result<LossBreakdown> {
        let obj = self.cfg.objective();
        let tape = Tape::new();
        let phi = tape.constant(self.adapter.clone());
        let v = self.encoder.encode_on_tape(&tape, images, phi)?;
        objective_on_tape(&tape, v, self.categories, &obj).breakdown(&tape, &obj)
    }

    /// Runs `steps_per_batch` optimiser steps on one batch. Each entry of the
    /// result is the loss at the adapter the step started from. On any
    /// failure the adapter and optimiser are restored to their state before
    /// the batch.
    pub fn adapt_batch(&mut self, images: &[Image]) -> Result<Vec<LossBreakdown>> {
        if images.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let saved = (self.adapter.clone(), self.optimizer.clone());
        let out = self.steps(images);
        if out.is_err() {
            (self.adapter, self.optimizer) = saved;
        }
        out
    }

    fn steps(&mut self, images: &[Image]) -> Result<Vec<LossBreakdown>> {
        let obj = self.cfg.objective();
        let mut history = Vec::with_capacity(self.cfg.steps_per_batch);
        for _ in 0..self.cfg.steps_per_batch {
            let tape = Tape::new();
            let phi = tape.param(self.adapter.clone());
            let v = self.encoder.encode_on_tape(&tape, images, phi)?;
            let terms = objective_on_tape(&tape, v, self.categories, &obj);
            let loss = terms.breakdown(&tape, &obj)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric { primitive: "objective" });
            }
            let grad = tape.gradient(terms.total, phi)?;
            self.optimizer.step(&mut self.adapter, &grad)?;
            if !self.adapter.is_finite() {
                return Err(Error::Numeric { primitive: "optimizer_step" });
            }
            history.push(loss);
        }
        Ok(history)
    }
}

/// One batch from a given adapter with a fresh optimiser.
pub fn adapt_batch(
    encoder: &Encoder,
    images: &[Image],
    adapter: &AdapterParams,
    categories: &CategoryEmbeddings,
    cfg: &AdaptConfig,
) -> Result<(AdapterParams, Vec<LossBreakdown>)> {
    let mut session = AdaptSession::new(encoder, categories, *cfg)?.with_adapter(adapter)?;
    let history = session.adapt_batch(images)?;
    Ok((session.adapter(), history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptReport {
    /// Loss before each optimiser step, batch-major.
    pub history: Vec<LossBreakdown>,
    pub batch_seconds: Vec<f64>,
    pub batches: usize,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    /// Each batch scored with the adapter it arrives to, before adapting on it.
    pub online_accuracy: f64,
    pub adapter_checksum: String,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub categories_checksum_before: String,
    pub categories_checksum_after: String,
    #[serde(skip)]
    pub final_adapter: AdapterParams,
}

impl AdaptReport {
    pub fn frozen_state_unchanged(&self) -> bool {
        self.encoder_checksum_before == self.encoder_checksum_after
            && self.categories_checksum_before == self.categories_checksum_after
    }
}

/// Shuffled visiting order of the stream, fixed by `seed`.
pub fn stream_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Adapts over the whole dataset in batches, then measures accuracy with the
/// final adapter.
pub fn run_stream(
    encoder: &Encoder,
    categories: &CategoryEmbeddings,
    dataset: &Dataset,
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let encoder_before = encoder.weights_checksum();
    let categories_before = categories.checksum();

    let zero = encoder.zero_adapter();
    let pre_accuracy = evaluate(encoder, dataset, &zero, categories)?;

    let mut session = AdaptSession::new(encoder, categories, *cfg)?;
    let order = stream_order(dataset.len(), cfg.seed);
    let mut history = Vec::new();
    let mut batch_seconds = Vec::new();
    let mut online_hits = 0usize;
    for idx in order.chunks(cfg.batch_size) {
        let images: Vec<Image> = idx.iter().map(|&i| dataset.images()[i].clone()).collect();
        if cfg.mode == AdaptMode::Episodic {
            session.reset();
        }
        let start = Instant::now();
        let pred = predict(encoder, &images, &session.adapter(), categories)?;
        online_hits += idx
            .iter()
            .zip(pred)
            .filter(|(&i, p)| dataset.labels()[i] == *p)
            .count();
        history.extend(session.adapt_batch(&images)?);
        batch_seconds.push(start.elapsed().as_secs_f64());
    }

    let final_adapter = session.adapter();
    let post_accuracy = evaluate(encoder, dataset, &final_adapter, categories)?;
    Ok(AdaptReport {
        history,
        batches: batch_seconds.len(),
        batch_seconds,
        pre_accuracy,
        post_accuracy,
        online_accuracy: online_hits as f64 / dataset.len() as f64,
        adapter_checksum: final_adapter.checksum(),
        encoder_checksum_before: encoder_before,
        encoder_checksum_after: encoder.weights_checksum(),
        categories_checksum_before: categories_before,
        categories_checksum_after: categories.checksum(),
        final_adapter,
    })
}
