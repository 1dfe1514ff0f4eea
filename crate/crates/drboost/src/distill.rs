//! Collapse an ensemble's query encoders into one full-width encoder.
//!
//! The ensemble's concatenated query and passage vectors for each gold
//! pair become fixed regression targets; a fresh encoder of width
//! `total_dim` is trained to map the query text near both. The passage
//! index is untouched, so the distilled model slots in as a drop-in
//! query encoder at search time.
//!
//! The distilled encoder applies no layer norm: its targets carry the
//! per-subvector scale structure of the ensemble, which normalizing the
//! full-width output would destroy.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::boosting::{ensemble_embed_features, Ensemble, Side};
use crate::data::{Corpus, TrainPair};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::featurizer::{featurize, SparseFeatures};
use crate::rng::rng_for;

/// Settings for one distillation run.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the passage-target term relative to the query-target
    /// term (1.0 reproduces the plain two-term objective).
    pub passage_term_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            passage_term_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.passage_term_weight < 0.0 {
            return Err(Error::Argument("invalid distillation configuration".to_string()));
        }
        Ok(())
    }
}

/// One regression target: the ensemble's views of a gold pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub query_text: String,
    pub q_bar: Vec<f32>,
    pub c_bar: Vec<f32>,
}

/// Concatenated (query, first-positive passage) embeddings per pair.
pub fn build_targets(
    ensemble: &Ensemble,
    pairs: &[TrainPair],
    corpus: &Corpus,
) -> Result<Vec<DistillTarget>> {
    pairs
        .par_iter()
        .map(|pair| {
            let row = corpus.row_of(&pair.positive_ids[0]).ok_or_else(|| {
                Error::Validation(format!(
                    "query '{}' references unknown passage '{}'",
                    pair.query_id, pair.positive_ids[0]
                ))
            })?;
            let q_feats = featurize(&pair.query_text, ensemble.featurizer());
            let c_feats = featurize(&corpus.get(row).full_text(), ensemble.featurizer());
            Ok(DistillTarget {
                query_text: pair.query_text.clone(),
                q_bar: ensemble_embed_features(ensemble, &q_feats, Side::Query),
                c_bar: ensemble_embed_features(ensemble, &c_feats, Side::Passage),
            })
        })
        .collect()
}

struct PreparedTarget {
    features: SparseFeatures,
    q_bar: Vec<f64>,
    c_bar: Vec<f64>,
}

fn prepare(targets: &[DistillTarget], ensemble: &Ensemble) -> Vec<PreparedTarget> {
    targets
        .par_iter()
        .map(|t| PreparedTarget {
            features: featurize(&t.query_text, ensemble.featurizer()),
            q_bar: t.q_bar.iter().map(|&v| f64::from(v)).collect(),
            c_bar: t.c_bar.iter().map(|&v| f64::from(v)).collect(),
        })
        .collect()
}

/// Per-pair regression loss and (optionally) the output-side gradient.
fn pair_loss(
    output: &[f64],
    target: &PreparedTarget,
    passage_weight: f64,
    d_out: Option<&mut [f64]>,
) -> f64 {
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; output.len()];
    for d in 0..output.len() {
        let dq = output[d] - target.q_bar[d];
        let dc = output[d] - target.c_bar[d];
        loss += dq * dq + passage_weight * dc * dc;
        grad[d] = 2.0 * dq + passage_weight * 2.0 * dc;
    }
    if let Some(out) = d_out {
        out.copy_from_slice(&grad);
    }
    loss
}

fn mean_loss(model: &EncoderModel, targets: &[PreparedTarget], passage_weight: f64) -> f64 {
    if targets.is_empty() {
        return f64::INFINITY;
    }
    let total: f64 = targets
        .iter()
        .map(|t| {
            let out = model.embed_features_f64(&t.features);
            pair_loss(&out, t, passage_weight, None)
        })
        .sum();
    total / targets.len() as f64
}

/// Result of a distillation run with its loss curves.
pub struct DistillOutcome {
    pub model: EncoderModel,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_dev_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

/// Train a full-width query encoder against the ensemble's targets.
///
/// Adam on the squared-error objective, early model selection on the
/// dev loss (the initialization counts as epoch 0). Deterministic under
/// `config.seed`.
pub fn distill(
    ensemble: &Ensemble,
    train_pairs: &[TrainPair],
    dev_pairs: &[TrainPair],
    corpus: &Corpus,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Argument("empty training set".to_string()));
    }
    let train_targets = prepare(&build_targets(ensemble, train_pairs, corpus)?, ensemble);
    let dev_targets = prepare(&build_targets(ensemble, dev_pairs, corpus)?, ensemble);

    let mut model = EncoderModel::random(
        ensemble.featurizer().clone(),
        ensemble.total_dim(),
        rng_seed_for_init(config.seed),
    )?;
    model.use_layer_norm = false;

    let w = config.passage_term_weight;
    let mut best_dev = mean_loss(&model, &dev_targets, w);
    let mut best_epoch = 0usize;
    let mut best_weights = model.weights.clone();

    let dim = model.dim;
    let mut adam_m = vec![0.0f64; model.weights.len()];
    let mut adam_v = vec![0.0f64; model.weights.len()];
    let mut t = 0usize;
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut order: Vec<usize> = (0..train_targets.len()).collect();
    let mut shuffle_rng = rng_for(config.seed, 0x44495354); // "DIST"
    let mut epoch_train_loss = Vec::with_capacity(config.epochs);
    let mut epoch_dev_loss = Vec::with_capacity(config.epochs);
    let mut grads = vec![0.0f64; model.weights.len()];
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0f64;
            let mut d_out = vec![0.0f64; dim];

            for &i in chunk {
                let target = &train_targets[i];
                let out = model.embed_features_f64(&target.features);
                batch_loss += pair_loss(&out, target, w, Some(&mut d_out));
                for (bucket, value) in target.features.iter() {
                    let row = &mut grads[bucket as usize * dim..(bucket as usize + 1) * dim];
                    let v = f64::from(value) * scale;
                    for (g, d) in row.iter_mut().zip(&d_out) {
                        *g += v * d;
                    }
                }
            }
            batch_loss *= scale;
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite distillation loss {batch_loss}"),
                });
            }

            t += 1;
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for i in 0..model.weights.len() {
                adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * grads[i];
                adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * grads[i] * grads[i];
                let mhat = adam_m[i] / bc1;
                let vhat = adam_v[i] / bc2;
                model.weights[i] -= config.learning_rate * mhat / (vhat.sqrt() + adam_eps);
            }
            epoch_loss += batch_loss;
            batches += 1;
        }

        let train_loss = epoch_loss / batches as f64;
        let dev_loss = mean_loss(&model, &dev_targets, w);
        epoch_train_loss.push(train_loss);
        epoch_dev_loss.push(dev_loss);
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best_epoch = epoch_train_loss.len();
            best_weights = model.weights.clone();
        }
    }

    model.weights = best_weights;
    Ok(DistillOutcome {
        model,
        epoch_train_loss,
        epoch_dev_loss,
        best_epoch,
        best_dev_loss: best_dev,
    })
}

fn rng_seed_for_init(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, 0x44494e49) // "DINI"
}

/// Mean regression loss and its analytic weight gradients, for
/// finite-difference verification (the distilled model has no active
/// layer-norm parameters).
pub fn distill_loss_and_grad(
    model: &EncoderModel,
    targets: &[DistillTarget],
    ensemble: &Ensemble,
    passage_weight: f64,
) -> Result<crate::encoder::LossGrads> {
    if targets.is_empty() {
        return Err(Error::Argument("empty target set".to_string()));
    }
    let prepared = prepare(targets, ensemble);
    let dim = model.dim;
    let mut grads = vec![0.0f64; model.weights.len()];
    let scale = 1.0 / prepared.len() as f64;
    let mut total = 0.0f64;
    let mut d_out = vec![0.0f64; dim];
    for t in &prepared {
        let out = model.embed_features_f64(&t.features);
        total += pair_loss(&out, t, passage_weight, Some(&mut d_out));
        for (bucket, value) in t.features.iter() {
            let row = &mut grads[bucket as usize * dim..(bucket as usize + 1) * dim];
            let v = f64::from(value) * scale;
            for (g, d) in row.iter_mut().zip(&d_out) {
                *g += v * d;
            }
        }
    }
    Ok(crate::encoder::LossGrads {
        loss: total * scale,
        weights: grads,
        ln_gain: vec![0.0; dim],
        ln_bias: vec![0.0; dim],
    })
}

/// Mean regression loss of `model` against the targets.
pub fn distill_loss(
    model: &EncoderModel,
    targets: &[DistillTarget],
    ensemble: &Ensemble,
    passage_weight: f64,
) -> f64 {
    mean_loss(model, &prepare(targets, ensemble), passage_weight)
}
