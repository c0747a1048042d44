//! Optimization loop, evaluation, ensembling and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{penalized, regularized_loss, Adam, AdamConfig};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_embeddings, make_batches, read_embeddings, Batch, EmbeddingStats, Encoded, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{argmax, Mimn, Mode, ModelConfig, SentencePair, Variant};
use crate::tensor::{Gradients, Graph, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub l2_coeff: f64,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            l2_coeff: 3e-4,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::Config("l2_coeff must be a nonnegative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch, without the penalty.
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub stopped_early: bool,
}

pub struct Trained<F: Scalar> {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Mimn<F>,
    pub history: History,
}

/// Overall and per-label accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_label: Vec<LabelAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAccuracy {
    pub label: String,
    pub correct: usize,
    pub total: usize,
    /// `None` when the label never occurs as gold.
    pub accuracy: Option<f64>,
}

impl Evaluation {
    pub fn from_predictions(labels: &[String], predicted: &[usize], gold: &[usize]) -> Result<Self> {
        if predicted.len() != gold.len() || gold.is_empty() {
            return Err(Error::Contract(
                "need one prediction per example and at least one example".into(),
            ));
        }
        let mut per_label: Vec<LabelAccuracy> = labels
            .iter()
            .map(|l| LabelAccuracy {
                label: l.clone(),
                correct: 0,
                total: 0,
                accuracy: None,
            })
            .collect();
        for (&p, &g) in predicted.iter().zip(gold) {
            let slot = per_label
                .get_mut(g)
                .ok_or_else(|| Error::Label(format!("gold label {g} outside the label set")))?;
            slot.total += 1;
            slot.correct += usize::from(p == g);
        }
        for l in &mut per_label {
            l.accuracy = (l.total > 0).then(|| l.correct as f64 / l.total as f64);
        }
        let correct = per_label.iter().map(|l| l.correct).sum();
        Ok(Evaluation {
            accuracy: correct as f64 / gold.len() as f64,
            correct,
            total: gold.len(),
            per_label,
        })
    }
}

/// Settings for the synthetic toy corpus: width 16 throughout, no dropout
/// or penalty, 30 epochs without early stopping.
pub fn toy_settings(variant: Variant, seed: u64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        embed_dim: 16,
        hidden: 16,
        mlp_hidden: 16,
        dropout: 0.0,
        variant,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 16,
        l2_coeff: 0.0,
        patience: 30,
        max_epochs: 30,
        seed,
        adam: AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
    };
    (model, train)
}

/// Fresh model over `vocab` with embeddings from `embeddings`, or random
/// rows for every word when no file is given.
pub fn init_model<F: Scalar>(
    config: ModelConfig,
    vocab: &Vocabulary,
    embeddings: Option<&Path>,
    seed: u64,
) -> Result<(Mimn<F>, EmbeddingStats)> {
    let dim = config.embed_dim;
    let mut model = Mimn::new(config, vocab.len(), seed)?;
    let emb_seed = mix(seed ^ 0x656d_6265_6464);
    let (table, stats) = match embeddings {
        Some(path) => load_embeddings(path, vocab, dim, emb_seed)?,
        None => read_embeddings(std::io::empty(), vocab, dim, emb_seed)?,
    };
    model.set_embeddings(table)?;
    Ok((model, stats))
}

fn pair(e: &Encoded) -> (Vec<bool>, Vec<bool>) {
    (vec![true; e.premise.len()], vec![true; e.hypothesis.len()])
}

/// Label distribution for one unpadded example.
pub fn predict<F: Scalar>(model: &Mimn<F>, e: &Encoded) -> Result<Vec<F>> {
    let (pm, qm) = pair(e);
    model.forward(SentencePair {
        premise: &e.premise,
        premise_mask: &pm,
        hypothesis: &e.hypothesis,
        hypothesis_mask: &qm,
    })
}

pub fn evaluate<F: Scalar>(model: &Mimn<F>, examples: &[Encoded]) -> Result<Evaluation> {
    let predicted = examples
        .par_iter()
        .map(|e| predict(model, e).map(|p| argmax(&p)))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Evaluation::from_predictions(&model.config().labels, &predicted, &gold)
}

/// Averages member distributions per example, then takes the argmax.
pub fn ensemble_eval<F: Scalar>(members: &[Mimn<F>], examples: &[Encoded]) -> Result<Evaluation> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    if members
        .iter()
        .any(|m| m.config() != first.config() || m.vocab_size() != first.vocab_size())
    {
        return Err(Error::Config("ensemble members have different configurations".into()));
    }
    let predicted = examples
        .par_iter()
        .map(|e| {
            let dists = members.iter().map(|m| predict(m, e)).collect::<Result<Vec<_>>>()?;
            Ok(argmax(&average(&dists)))
        })
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Evaluation::from_predictions(&first.config().labels, &predicted, &gold)
}

/// Element-wise mean of equal-length distributions.
pub fn average<F: Scalar>(dists: &[Vec<F>]) -> Vec<F> {
    let k = F::of(dists.len() as f64);
    let mut out = vec![F::zero(); dists.first().map_or(0, Vec::len)];
    for d in dists {
        for (o, &p) in out.iter_mut().zip(d) {
            *o = *o + p;
        }
    }
    out.into_iter().map(|s| s / k).collect()
}

// splitmix64 finalizer; decorrelates per-example dropout streams
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct StepOutcome<F> {
    loss: F,
    correct: bool,
    grads: Gradients<F>,
}

fn example_step<F: Scalar>(model: &Mimn<F>, batch: &Batch, i: usize, weight: F, seed: u64) -> Result<StepOutcome<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mode = Mode::train(&mut rng);
    let mut g = Graph::with_params(model.store());
    let vars = model.forward_graph(&mut g, batch.pair(i), &mut mode)?;
    let gold = batch.labels[i];
    let correct = argmax(g.value(vars.logits)) == gold;
    let ce = g.cross_entropy(vars.logits, gold)?;
    let scaled = g.scale(ce, weight)?;
    let grads = g.backward(scaled)?;
    Ok(StepOutcome {
        loss: g.value(ce)[0],
        correct,
        grads,
    })
}

/// One optimizer step on `batch`: mean cross-entropy plus the L2 penalty.
/// Returns the summed unweighted loss and the number of correct predictions.
pub fn train_batch<F: Scalar>(
    model: &mut Mimn<F>,
    adam: &mut Adam<F>,
    batch: &Batch,
    l2_coeff: f64,
    seed: u64,
) -> Result<(f64, usize)> {
    let weight = F::of(1.0 / batch.len() as f64);
    let outcomes = {
        let m = &*model;
        (0..batch.len())
            .into_par_iter()
            .map(|i| example_step(m, batch, i, weight, mix(seed ^ mix(i as u64))))
            .collect::<Result<Vec<_>>>()?
    };
    let penalty = {
        let store = model.store();
        let mut g = Graph::with_params(store);
        let zero = g.constant(crate::tensor::Tensor::scalar(F::zero()));
        let total = regularized_loss(&mut g, zero, store, F::of(l2_coeff))?;
        g.backward(total)?
    };
    let store = model.store_mut();
    store.zero_grads();
    let mut loss = 0.0;
    let mut correct = 0;
    for o in &outcomes {
        o.grads.accumulate_into(store)?;
        loss += o.loss.to_f64_lossy();
        correct += usize::from(o.correct);
    }
    penalty.accumulate_into(store)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    adam.step(store)?;
    Ok((loss, correct))
}

/// Trains with early stopping on validation accuracy. Deterministic for a
/// fixed `config.seed`.
pub fn train<F: Scalar>(
    mut model: Mimn<F>,
    train_set: &[Encoded],
    valid_set: &[Encoded],
    config: &TrainConfig,
) -> Result<Trained<F>> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let mut adam = Adam::new(config.adam);
    let mut history = History {
        variant: model.config().variant,
        seed: config.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best = model.store().clone();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let epoch_seed = mix(config.seed ^ mix(epoch as u64));
        let batches = make_batches(train_set, config.batch_size, epoch_seed)?;
        let (mut loss, mut correct) = (0.0, 0);
        for (b, batch) in batches.iter().enumerate() {
            let step_seed = mix(epoch_seed ^ mix(b as u64 + 1));
            let (l, c) =
                train_batch(&mut model, &mut adam, batch, config.l2_coeff, step_seed).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { epoch, batch: b },
                    other => other,
                })?;
            loss += l;
            correct += c;
        }
        let valid = evaluate(&model, valid_set)?.accuracy;
        let record = EpochRecord {
            epoch,
            train_loss: loss / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            valid_accuracy: valid,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} valid {:.3}",
            record.train_loss,
            record.train_accuracy,
            valid
        );
        history.epochs.push(record);
        if valid > history.best_valid_accuracy {
            history.best_valid_accuracy = valid;
            history.best_epoch = epoch;
            best = model.store().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let config = model.config().clone();
    Ok(Trained {
        model: Mimn::from_store(config, best)?,
        history,
    })
}

#[cfg(test)]
mod tests;
