//! A single weak learner: a shared query/passage linear embedding over
//! hashed features with layer normalization, trained to minimize the
//! negative log-likelihood of gold pairs against sampled negatives.
//!
//! Parameters are kept in f64 so analytic gradients can be checked
//! against central finite differences to tight tolerances; embeddings
//! are exposed as f32, matching the on-disk matrix and index formats.
//! Training is single-threaded and bitwise deterministic under fixed
//! seeds. Corpus embedding parallelizes over rows with disjoint writes,
//! so parallel and sequential runs produce identical matrices.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{AugmentedExample, Corpus};
use crate::error::{Error, Result};
use crate::featurizer::{featurize, FeaturizerConfig, SparseFeatures};
use crate::index::EmbeddingMatrix;
use crate::rng::rng_for;

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_LN_EPSILON: f64 = 1e-5;
const ADAM_EPSILON: f64 = 1e-8;

/// Linear embedding with optional layer norm after the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub featurizer: FeaturizerConfig,
    pub dim: usize,
    /// `num_buckets x dim`, row-major.
    pub weights: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub ln_epsilon: f64,
    /// Distilled models regress raw linear outputs and disable this.
    pub use_layer_norm: bool,
}

impl EncoderModel {
    /// Uniform(-1/sqrt(dim), 1/sqrt(dim)) weights, unit gain, zero bias.
    pub fn random(featurizer: FeaturizerConfig, dim: usize, seed: u64) -> Result<Self> {
        featurizer.validate()?;
        if dim == 0 {
            return Err(Error::Argument("dim must be >= 1".to_string()));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = rng_for(seed, 0x494e4954); // "INIT"
        let n = featurizer.num_buckets as usize * dim;
        let weights = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Ok(EncoderModel {
            featurizer,
            dim,
            weights,
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            ln_epsilon: DEFAULT_LN_EPSILON,
            use_layer_norm: true,
        })
    }

    /// All-zero weights; useful as the degenerate constant scorer.
    pub fn zeros(featurizer: FeaturizerConfig, dim: usize) -> Result<Self> {
        featurizer.validate()?;
        if dim == 0 {
            return Err(Error::Argument("dim must be >= 1".to_string()));
        }
        let n = featurizer.num_buckets as usize * dim;
        Ok(EncoderModel {
            featurizer,
            dim,
            weights: vec![0.0; n],
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            ln_epsilon: DEFAULT_LN_EPSILON,
            use_layer_norm: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        let expect = self.featurizer.num_buckets as usize * self.dim;
        if self.weights.len() != expect
            || self.ln_gain.len() != self.dim
            || self.ln_bias.len() != self.dim
        {
            return Err(Error::Validation(
                "parameter shapes disagree with dim".to_string(),
            ));
        }
        let finite = self.weights.iter().all(|v| v.is_finite())
            && self.ln_gain.iter().all(|v| v.is_finite())
            && self.ln_bias.iter().all(|v| v.is_finite())
            && self.ln_epsilon.is_finite()
            && self.ln_epsilon > 0.0;
        if !finite {
            return Err(Error::Validation("non-finite parameters".to_string()));
        }
        Ok(())
    }

    /// Projection z = W^T x over the sparse features.
    fn project(&self, features: &SparseFeatures) -> Vec<f64> {
        let mut z = vec![0.0f64; self.dim];
        for (bucket, value) in features.iter() {
            let row =
                &self.weights[bucket as usize * self.dim..(bucket as usize + 1) * self.dim];
            let v = f64::from(value);
            for (zd, wd) in z.iter_mut().zip(row) {
                *zd += v * wd;
            }
        }
        z
    }

    /// Full-precision embedding of already-featurized text.
    pub fn embed_features_f64(&self, features: &SparseFeatures) -> Vec<f64> {
        let z = self.project(features);
        if !self.use_layer_norm {
            return z;
        }
        let (xhat, _) = layer_norm_xhat(&z, self.ln_epsilon);
        xhat.iter()
            .zip(self.ln_gain.iter().zip(&self.ln_bias))
            .map(|(x, (g, b))| g * x + b)
            .collect()
    }

    pub fn embed_f64(&self, text: &str) -> Vec<f64> {
        self.embed_features_f64(&featurize(text, &self.featurizer))
    }
}

/// Deterministic d-dimensional embedding of `text`.
pub fn embed(model: &EncoderModel, text: &str) -> Vec<f32> {
    model.embed_f64(text).into_iter().map(|v| v as f32).collect()
}

/// Relevance as the inner product of shared-encoder embeddings.
pub fn score(model: &EncoderModel, query: &str, passage: &str) -> f64 {
    let q = model.embed_f64(query);
    let p = model.embed_f64(passage);
    q.iter().zip(&p).map(|(a, b)| a * b).sum()
}

/// Normalized activations and the inverse std used by the backward pass.
fn layer_norm_xhat(z: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    let d = z.len() as f64;
    let mean = z.iter().sum::<f64>() / d;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + epsilon).sqrt();
    (z.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Softmax cross-entropy of the positive against its negatives,
/// computed with max-subtraction.
pub fn nll_loss(score_pos: f64, scores_neg: &[f64]) -> Result<f64> {
    if scores_neg.is_empty() {
        return Err(Error::Argument(
            "nll requires at least one negative".to_string(),
        ));
    }
    if !score_pos.is_finite() || scores_neg.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in nll".to_string()));
    }
    let max = scores_neg
        .iter()
        .fold(score_pos, |acc, &s| if s > acc { s } else { acc });
    let sum: f64 =
        (score_pos - max).exp() + scores_neg.iter().map(|s| (s - max).exp()).sum::<f64>();
    Ok(max + sum.ln() - score_pos)
}

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives consumed per example; examples may carry more.
    pub negatives_per_example: usize,
    /// Score other in-batch positives as extra negatives (baseline mode).
    pub in_batch_negatives: bool,
    pub seed: u64,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 10,
            batch_size: 32,
            negatives_per_example: 8,
            in_batch_negatives: false,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.adam_beta1 > 0.0
            && self.adam_beta1 < 1.0
            && self.adam_beta2 > 0.0
            && self.adam_beta2 < 1.0
            && self.batch_size >= 1
            && self.negatives_per_example >= 1
            && self.grad_clip.map_or(true, |c| c > 0.0);
        if !ok {
            return Err(Error::Argument(
                "invalid training configuration".to_string(),
            ));
        }
        Ok(())
    }
}

/// Featurized view of one example, positives cycled by epoch.
pub(crate) struct ExampleFeatures {
    pub query: SparseFeatures,
    pub positives: Vec<SparseFeatures>,
    pub negatives: Vec<SparseFeatures>,
}

pub(crate) fn featurize_examples(
    examples: &[AugmentedExample],
    corpus: &Corpus,
    featurizer: &FeaturizerConfig,
    max_negatives: usize,
) -> Vec<ExampleFeatures> {
    examples
        .par_iter()
        .map(|ex| {
            let passage_feats = |id: &String| {
                let row = corpus.row_of(id).expect("validated id");
                featurize(&corpus.get(row).full_text(), featurizer)
            };
            ExampleFeatures {
                query: featurize(&ex.pair.query_text, featurizer),
                positives: ex.pair.positive_ids.iter().map(passage_feats).collect(),
                negatives: ex
                    .negative_ids
                    .iter()
                    .take(max_negatives)
                    .map(passage_feats)
                    .collect(),
            }
        })
        .collect()
}

/// Forward state cached for the backward pass.
struct Trace {
    xhat: Vec<f64>,
    inv_std: f64,
    out: Vec<f64>,
}

fn forward(model: &EncoderModel, features: &SparseFeatures) -> Trace {
    let z = model.project(features);
    if !model.use_layer_norm {
        return Trace {
            out: z,
            xhat: Vec::new(),
            inv_std: 0.0,
        };
    }
    let (xhat, inv_std) = layer_norm_xhat(&z, model.ln_epsilon);
    let out = xhat
        .iter()
        .zip(model.ln_gain.iter().zip(&model.ln_bias))
        .map(|(x, (g, b))| g * x + b)
        .collect();
    Trace { xhat, inv_std, out }
}

#[derive(Clone)]
pub(crate) struct Gradients {
    pub weights: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl Gradients {
    pub(crate) fn zeros(model: &EncoderModel) -> Self {
        Gradients {
            weights: vec![0.0; model.weights.len()],
            ln_gain: vec![0.0; model.dim],
            ln_bias: vec![0.0; model.dim],
        }
    }

    fn reset(&mut self) {
        self.weights.iter_mut().for_each(|v| *v = 0.0);
        self.ln_gain.iter_mut().for_each(|v| *v = 0.0);
        self.ln_bias.iter_mut().for_each(|v| *v = 0.0);
    }

    fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|v| *v *= s);
        self.ln_gain.iter_mut().for_each(|v| *v *= s);
        self.ln_bias.iter_mut().for_each(|v| *v *= s);
    }

    fn norm(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|v| v * v).sum::<f64>()
            + self.ln_gain.iter().map(|v| v * v).sum::<f64>()
            + self.ln_bias.iter().map(|v| v * v).sum::<f64>();
        sq.sqrt()
    }
}

/// Backpropagate d_out through layer norm and the projection.
fn backward(
    model: &EncoderModel,
    features: &SparseFeatures,
    trace: &Trace,
    d_out: &[f64],
    grads: &mut Gradients,
) {
    let dim = model.dim;
    let dz: Vec<f64> = if model.use_layer_norm {
        let mut d_xhat = vec![0.0f64; dim];
        for d in 0..dim {
            grads.ln_gain[d] += d_out[d] * trace.xhat[d];
            grads.ln_bias[d] += d_out[d];
            d_xhat[d] = d_out[d] * model.ln_gain[d];
        }
        let n = dim as f64;
        let mean_dxhat = d_xhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = d_xhat
            .iter()
            .zip(&trace.xhat)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n;
        (0..dim)
            .map(|d| {
                trace.inv_std * (d_xhat[d] - mean_dxhat - trace.xhat[d] * mean_dxhat_xhat)
            })
            .collect()
    } else {
        d_out.to_vec()
    };

    for (bucket, value) in features.iter() {
        let row =
            &mut grads.weights[bucket as usize * dim..(bucket as usize + 1) * dim];
        let v = f64::from(value);
        for (g, dzd) in row.iter_mut().zip(&dz) {
            *g += v * dzd;
        }
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One batch slot: featurized query, the epoch's positive, negatives.
pub(crate) struct ExampleBatchItem<'a> {
    pub query: &'a SparseFeatures,
    pub positive: &'a SparseFeatures,
    pub negatives: &'a [SparseFeatures],
}

/// Mean NLL and parameter gradients for one batch.
///
/// When `in_batch` is set, every other example's positive is scored as
/// an additional negative.
pub(crate) fn batch_loss_and_grad(
    model: &EncoderModel,
    batch: &[ExampleBatchItem<'_>],
    in_batch: bool,
    grads: &mut Gradients,
) -> Result<f64> {
    let b = batch.len();
    let queries: Vec<Trace> = batch.iter().map(|it| forward(model, it.query)).collect();
    let positives: Vec<Trace> = batch.iter().map(|it| forward(model, it.positive)).collect();
    let negatives: Vec<Vec<Trace>> = batch
        .iter()
        .map(|it| it.negatives.iter().map(|f| forward(model, f)).collect())
        .collect();

    let mut d_queries = vec![vec![0.0f64; model.dim]; b];
    let mut d_positives = vec![vec![0.0f64; model.dim]; b];
    let mut d_negatives: Vec<Vec<Vec<f64>>> = negatives
        .iter()
        .map(|ns| vec![vec![0.0f64; model.dim]; ns.len()])
        .collect();

    let scale = 1.0 / b as f64;
    let mut total_loss = 0.0f64;

    for i in 0..b {
        let q = &queries[i].out;
        let s_pos = dot64(q, &positives[i].out);
        let mut s_negs: Vec<f64> = negatives[i].iter().map(|t| dot64(q, &t.out)).collect();
        let mut inbatch_partners = Vec::new();
        if in_batch {
            for j in 0..b {
                if j != i {
                    s_negs.push(dot64(q, &positives[j].out));
                    inbatch_partners.push(j);
                }
            }
        }
        total_loss += nll_loss(s_pos, &s_negs)?;

        // Softmax over (positive, negatives); dL/ds = p - onehot(pos).
        let max = s_negs
            .iter()
            .fold(s_pos, |acc, &s| if s > acc { s } else { acc });
        let e_pos = (s_pos - max).exp();
        let e_negs: Vec<f64> = s_negs.iter().map(|s| (s - max).exp()).collect();
        let z = e_pos + e_negs.iter().sum::<f64>();

        let d_pos = (e_pos / z - 1.0) * scale;
        for d in 0..model.dim {
            d_queries[i][d] += d_pos * positives[i].out[d];
            d_positives[i][d] += d_pos * q[d];
        }
        let own = negatives[i].len();
        for (j, &e) in e_negs.iter().enumerate() {
            let d_neg = (e / z) * scale;
            if j < own {
                for d in 0..model.dim {
                    d_queries[i][d] += d_neg * negatives[i][j].out[d];
                    d_negatives[i][j][d] += d_neg * q[d];
                }
            } else {
                let partner = inbatch_partners[j - own];
                for d in 0..model.dim {
                    d_queries[i][d] += d_neg * positives[partner].out[d];
                    d_positives[partner][d] += d_neg * q[d];
                }
            }
        }
    }

    for i in 0..b {
        backward(model, batch[i].query, &queries[i], &d_queries[i], grads);
        backward(model, batch[i].positive, &positives[i], &d_positives[i], grads);
        for (j, trace) in negatives[i].iter().enumerate() {
            backward(model, &batch[i].negatives[j], trace, &d_negatives[i][j], grads);
        }
    }

    Ok(total_loss * scale)
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: usize,
}

impl AdamState {
    fn new(model: &EncoderModel) -> Self {
        AdamState {
            m: Gradients::zeros(model),
            v: Gradients::zeros(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut EncoderModel, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = cfg.learning_rate;

        let update = |param: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..param.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
            }
        };
        update(
            &mut model.weights,
            &grads.weights,
            &mut self.m.weights,
            &mut self.v.weights,
        );
        update(
            &mut model.ln_gain,
            &grads.ln_gain,
            &mut self.m.ln_gain,
            &mut self.v.ln_gain,
        );
        update(
            &mut model.ln_bias,
            &grads.ln_bias,
            &mut self.m.ln_bias,
            &mut self.v.ln_bias,
        );
    }
}

/// Flattened loss gradients for finite-difference verification.
///
/// Layout matches the parameter order: all weight rows, then ln_gain,
/// then ln_bias.
pub struct LossGrads {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl LossGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.weights.clone();
        g.extend_from_slice(&self.ln_gain);
        g.extend_from_slice(&self.ln_bias);
        g
    }
}

/// Mean batch NLL and its analytic parameter gradients over the given
/// examples (first positive each, all carried negatives).
///
/// This is the exact quantity one training step descends; exposing it
/// lets callers check the backward pass against finite differences.
pub fn nll_loss_and_grad(
    model: &EncoderModel,
    examples: &[AugmentedExample],
    corpus: &Corpus,
    in_batch: bool,
) -> Result<LossGrads> {
    if examples.is_empty() {
        return Err(Error::Argument("empty example batch".to_string()));
    }
    let feats = featurize_examples(examples, corpus, &model.featurizer, usize::MAX);
    let items: Vec<ExampleBatchItem> = feats
        .iter()
        .map(|f| ExampleBatchItem {
            query: &f.query,
            positive: &f.positives[0],
            negatives: &f.negatives,
        })
        .collect();
    let mut grads = Gradients::zeros(model);
    let loss = batch_loss_and_grad(model, &items, in_batch, &mut grads)?;
    Ok(LossGrads {
        loss,
        weights: grads.weights,
        ln_gain: grads.ln_gain,
        ln_bias: grads.ln_bias,
    })
}

/// Mean NLL over examples using each example's first positive and its
/// explicit negatives only.
fn dev_nll(model: &EncoderModel, features: &[ExampleFeatures]) -> Result<f64> {
    if features.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0f64;
    for f in features {
        let q = model.embed_features_f64(&f.query);
        let pos = model.embed_features_f64(&f.positives[0]);
        let s_pos = dot64(&q, &pos);
        let s_negs: Vec<f64> = f
            .negatives
            .iter()
            .map(|n| dot64(&q, &model.embed_features_f64(n)))
            .collect();
        total += nll_loss(s_pos, &s_negs)?;
    }
    Ok(total / features.len() as f64)
}

/// What a training run produced, including per-epoch curves.
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub epoch_train_nll: Vec<f64>,
    pub epoch_dev_nll: Vec<f64>,
    /// 0 means the initialization was never improved upon.
    pub best_epoch: usize,
    pub best_dev_nll: f64,
    pub final_train_nll: f64,
}

/// Train a fresh encoder with Adam, returning the best dev-NLL epoch.
///
/// Deterministic given `config.seed` (shuffling) and `init_seed`
/// (initialization). Epoch 0 is the initialization itself, so zero
/// epochs returns it unchanged.
pub fn train(
    train: &[AugmentedExample],
    dev: &[AugmentedExample],
    corpus: &Corpus,
    featurizer: &FeaturizerConfig,
    dim: usize,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".to_string()));
    }

    let mut model = EncoderModel::random(featurizer.clone(), dim, init_seed)?;
    let train_feats =
        featurize_examples(train, corpus, featurizer, config.negatives_per_example);
    let dev_feats = featurize_examples(dev, corpus, featurizer, config.negatives_per_example);

    let mut best_dev = dev_nll(&model, &dev_feats)?;
    let mut best_epoch = 0usize;
    let mut best_params = (
        model.weights.clone(),
        model.ln_gain.clone(),
        model.ln_bias.clone(),
    );

    let mut adam = AdamState::new(&model);
    let mut grads = Gradients::zeros(&model);
    let mut shuffle_rng = rng_for(config.seed, 0x54524e); // "TRN"
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epoch_train_nll = Vec::with_capacity(config.epochs);
    let mut epoch_dev_nll = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut final_train_nll = f64::NAN;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let items: Vec<ExampleBatchItem> = chunk
                .iter()
                .map(|&i| {
                    let f = &train_feats[i];
                    ExampleBatchItem {
                        query: &f.query,
                        positive: &f.positives[epoch % f.positives.len()],
                        negatives: &f.negatives,
                    }
                })
                .collect();

            grads.reset();
            let loss =
                batch_loss_and_grad(&model, &items, config.in_batch_negatives, &mut grads)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite loss {loss}"),
                });
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(&mut model, &grads, config);
            epoch_loss += loss;
            epoch_batches += 1;
        }

        let train_nll = epoch_loss / epoch_batches as f64;
        let dev = dev_nll(&model, &dev_feats)?;
        epoch_train_nll.push(train_nll);
        epoch_dev_nll.push(dev);
        final_train_nll = train_nll;
        if dev < best_dev {
            best_dev = dev;
            best_epoch = epoch + 1;
            best_params = (
                model.weights.clone(),
                model.ln_gain.clone(),
                model.ln_bias.clone(),
            );
        }
    }

    model.weights = best_params.0;
    model.ln_gain = best_params.1;
    model.ln_bias = best_params.2;

    Ok(TrainOutcome {
        model,
        epoch_train_nll,
        epoch_dev_nll,
        best_epoch,
        best_dev_nll: best_dev,
        final_train_nll,
    })
}

/// Embed every passage; row order follows corpus order.
pub fn embed_corpus(model: &EncoderModel, corpus: &Corpus) -> EmbeddingMatrix {
    let features: Vec<SparseFeatures> = corpus
        .passages()
        .par_iter()
        .map(|p| featurize(&p.full_text(), &model.featurizer))
        .collect();
    let ids = corpus.iter().map(|p| p.id.clone()).collect();
    embed_features_matrix(model, &features, ids)
}

/// Embed pre-featurized rows (parallel, disjoint row writes).
pub(crate) fn embed_features_matrix(
    model: &EncoderModel,
    features: &[SparseFeatures],
    row_ids: Vec<String>,
) -> EmbeddingMatrix {
    let dim = model.dim;
    let mut data = vec![0.0f32; features.len() * dim];
    data.par_chunks_mut(dim)
        .zip(features.par_iter())
        .for_each(|(row, f)| {
            for (d, v) in model.embed_features_f64(f).into_iter().enumerate() {
                row[d] = v as f32;
            }
        });
    EmbeddingMatrix {
        num_rows: features.len(),
        dim,
        data,
        row_ids,
    }
}

/// Flatten trainable parameters in gradient layout order.
pub fn flatten_params(model: &EncoderModel) -> Vec<f64> {
    let mut p = model.weights.clone();
    p.extend_from_slice(&model.ln_gain);
    p.extend_from_slice(&model.ln_bias);
    p
}

/// Inverse of [`flatten_params`].
pub fn set_flat_params(model: &mut EncoderModel, params: &[f64]) {
    let w = model.weights.len();
    model.weights.copy_from_slice(&params[..w]);
    model.ln_gain.copy_from_slice(&params[w..w + model.dim]);
    model.ln_bias.copy_from_slice(&params[w + model.dim..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrainPair;

    fn tiny_featurizer() -> FeaturizerConfig {
        FeaturizerConfig {
            num_buckets: 16,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 3,
        }
    }

    fn small_featurizer() -> FeaturizerConfig {
        FeaturizerConfig {
            num_buckets: 1 << 10,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 1,
        }
    }

    #[test]
    fn zero_weights_embed_to_bias() {
        let mut model = EncoderModel::zeros(small_featurizer(), 4).unwrap();
        model.ln_bias = vec![0.5, -0.5, 1.0, 0.0];
        let v = embed(&model, "any text at all");
        assert_eq!(v, vec![0.5, -0.5, 1.0, 0.0]);
        // Empty text hits the same epsilon-guarded path.
        let v = embed(&model, "");
        assert_eq!(v, vec![0.5, -0.5, 1.0, 0.0]);
    }

    #[test]
    fn self_score_is_nonnegative() {
        let model = EncoderModel::random(small_featurizer(), 8, 7).unwrap();
        for text in ["nobel prize", "a b c", ""] {
            let s = score(&model, text, text);
            let norm_sq: f64 = model.embed_f64(text).iter().map(|v| v * v).sum();
            assert!(s >= 0.0);
            assert!((s - norm_sq).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_model_scores_bias_norm() {
        let mut model = EncoderModel::zeros(small_featurizer(), 3).unwrap();
        assert_eq!(score(&model, "a", "b"), 0.0);

        model.ln_bias = vec![1.0, 2.0, -1.0];
        let expect = 1.0 + 4.0 + 1.0;
        for (q, p) in [("x", "y"), ("foo bar", "baz"), ("", "anything")] {
            assert!((score(&model, q, p) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_matches_straight_line_oracle() {
        let model = EncoderModel::random(tiny_featurizer(), 4, 99).unwrap();
        let text = "nobel prize";
        let got = model.embed_f64(text);

        // Dense matrix multiply plus layer norm, written independently.
        let feats = featurize(text, &model.featurizer);
        let mut x = vec![0.0f64; 16];
        for (i, v) in feats.iter() {
            x[i as usize] = f64::from(v);
        }
        let mut z = vec![0.0f64; 4];
        for d in 0..4 {
            for b in 0..16 {
                z[d] += x[b] * model.weights[b * 4 + d];
            }
        }
        let mean: f64 = z.iter().sum::<f64>() / 4.0;
        let var: f64 = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let denom = (var + model.ln_epsilon).sqrt();
        let want: Vec<f64> = (0..4)
            .map(|d| model.ln_gain[d] * (z[d] - mean) / denom + model.ln_bias[d])
            .collect();

        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut model = EncoderModel::random(small_featurizer(), 64, 5).unwrap();
        // Non-degenerate input: pre-norm variance well above ln_epsilon.
        model.weights.iter_mut().for_each(|w| *w *= 10.0);
        let v = model.embed_f64("some reasonably long text with several distinct words");
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn nll_uniform_scores_give_ln_n_plus_one() {
        for n in [1usize, 3, 7] {
            let loss = nll_loss(0.3, &vec![0.3; n]).unwrap();
            let expect = ((n + 1) as f64).ln();
            assert!((loss - expect).abs() < 1e-9, "n={n}: {loss} vs {expect}");
        }
    }

    #[test]
    fn nll_saturates_when_positive_dominates() {
        let loss = nll_loss(100.0, &[0.0, 0.0, 0.0]).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-40, "{loss}");
    }

    #[test]
    fn nll_matches_direct_evaluation() {
        let loss = nll_loss(1.0, &[0.0, 2.0]).unwrap();
        let direct = -(1.0f64) + (1.0f64.exp() + 1.0 + 2.0f64.exp()).ln();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_bad_input() {
        assert!(nll_loss(1.0, &[]).is_err());
        assert!(nll_loss(f64::NAN, &[0.0]).is_err());
        assert!(nll_loss(0.0, &[f64::INFINITY]).is_err());
    }

    fn toy_dataset(n: usize) -> (Corpus, Vec<AugmentedExample>) {
        let topics = ["red orange crimson", "blue navy azure", "green olive lime"];
        let passages: Vec<crate::data::Passage> = (0..n)
            .map(|i| crate::data::Passage {
                id: format!("p{i}"),
                title: String::new(),
                text: format!("{} item {}", topics[i % 3], i),
            })
            .collect();
        let corpus = Corpus::from_passages(passages).unwrap();
        let examples = (0..n)
            .map(|i| {
                let pair = TrainPair {
                    query_id: format!("q{i}"),
                    query_text: format!("{} thing", topics[i % 3]),
                    positive_ids: vec![format!("p{i}")],
                };
                let neg = format!("p{}", (i + 1) % n);
                AugmentedExample::new(pair, vec![neg], &corpus).unwrap()
            })
            .collect();
        (corpus, examples)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (corpus, examples) = toy_dataset(10);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(
            &examples,
            &examples,
            &corpus,
            &small_featurizer(),
            4,
            &cfg,
            21,
        )
        .unwrap();
        let init = EncoderModel::random(small_featurizer(), 4, 21).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn training_loss_decreases_on_toy_data() {
        let (corpus, examples) = toy_dataset(50);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 10,
            negatives_per_example: 1,
            seed: 5,
            ..Default::default()
        };
        let out =
            train(&examples, &examples, &corpus, &small_featurizer(), 8, &cfg, 2).unwrap();
        assert!(out.epoch_train_nll.len() == 3);
        assert!(
            out.epoch_train_nll[0] > out.epoch_train_nll[1]
                && out.epoch_train_nll[1] > out.epoch_train_nll[2],
            "losses {:?} not strictly decreasing",
            out.epoch_train_nll
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, examples) = toy_dataset(20);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            negatives_per_example: 1,
            seed: 11,
            ..Default::default()
        };
        let a = train(&examples, &examples, &corpus, &small_featurizer(), 4, &cfg, 3).unwrap();
        let b = train(&examples, &examples, &corpus, &small_featurizer(), 4, &cfg, 3).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_dev_nll, b.epoch_dev_nll);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (corpus, _) = toy_dataset(4);
        let cfg = TrainConfig::default();
        assert!(train(&[], &[], &corpus, &small_featurizer(), 4, &cfg, 0).is_err());
    }

    #[test]
    fn corpus_rows_match_individual_embeds() {
        let (corpus, _) = toy_dataset(12);
        let model = EncoderModel::random(small_featurizer(), 6, 8).unwrap();
        let matrix = embed_corpus(&model, &corpus);
        assert_eq!(matrix.num_rows, 12);
        for (i, p) in corpus.iter().enumerate() {
            let row = matrix.row(i);
            let direct = embed(&model, &p.full_text());
            assert_eq!(row, direct.as_slice());
            assert_eq!(matrix.row_ids[i], p.id);
        }
    }

    #[test]
    fn parallel_and_sequential_embedding_agree() {
        let (corpus, _) = toy_dataset(40);
        let model = EncoderModel::random(small_featurizer(), 6, 8).unwrap();
        let parallel = embed_corpus(&model, &corpus);
        let mut sequential = Vec::with_capacity(40 * 6);
        for p in corpus.iter() {
            sequential.extend(embed(&model, &p.full_text()));
        }
        assert_eq!(parallel.data, sequential);
    }

    #[test]
    fn empty_corpus_embeds_to_empty_matrix() {
        let corpus = Corpus::from_passages(Vec::new()).unwrap();
        let model = EncoderModel::random(small_featurizer(), 4, 0).unwrap();
        let m = embed_corpus(&model, &corpus);
        assert_eq!(m.num_rows, 0);
        assert_eq!(m.dim, 4);
        assert!(m.data.is_empty());
    }

    /// Central finite differences against the analytic gradient on a
    /// small model; exercised more broadly by the acceptance suite.
    #[test]
    fn gradient_matches_finite_differences() {
        let (corpus, examples) = toy_dataset(6);
        let model = EncoderModel::random(tiny_featurizer(), 4, 17).unwrap();

        let loss_at = |params: &[f64], in_batch: bool| -> f64 {
            let mut probe = model.clone();
            set_flat_params(&mut probe, params);
            nll_loss_and_grad(&probe, &examples, &corpus, in_batch)
                .unwrap()
                .loss
        };

        for in_batch in [false, true] {
            let analytic = nll_loss_and_grad(&model, &examples, &corpus, in_batch)
                .unwrap()
                .flat();
            let params = flatten_params(&model);
            let h = 1e-5;
            for i in 0..params.len() {
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let fd = (loss_at(&plus, in_batch) - loss_at(&minus, in_batch)) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "param {i} (in_batch={in_batch}): analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }
}
