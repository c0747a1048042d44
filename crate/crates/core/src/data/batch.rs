use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Encoded, PAD};
use crate::error::{Error, Result};
use crate::model::SentencePair;

/// Padded rows for a group of examples. Matrices are row-major `[B×L]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub premise: Vec<usize>,
    pub premise_mask: Vec<bool>,
    pub premise_len: usize,
    pub hypothesis: Vec<usize>,
    pub hypothesis_mask: Vec<bool>,
    pub hypothesis_len: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Encoded]) -> Self {
        let lp = examples.iter().map(|e| e.premise.len()).max().unwrap_or(0);
        let lq = examples.iter().map(|e| e.hypothesis.len()).max().unwrap_or(0);
        let (premise, premise_mask) = pad(examples.iter().map(|e| &e.premise[..]), lp);
        let (hypothesis, hypothesis_mask) = pad(examples.iter().map(|e| &e.hypothesis[..]), lq);
        Batch {
            premise,
            premise_mask,
            premise_len: lp,
            hypothesis,
            hypothesis_mask,
            hypothesis_len: lq,
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row `i` with its padding.
    pub fn pair(&self, i: usize) -> SentencePair<'_> {
        let (lp, lq) = (self.premise_len, self.hypothesis_len);
        SentencePair {
            premise: &self.premise[i * lp..(i + 1) * lp],
            premise_mask: &self.premise_mask[i * lp..(i + 1) * lp],
            hypothesis: &self.hypothesis[i * lq..(i + 1) * lq],
            hypothesis_mask: &self.hypothesis_mask[i * lq..(i + 1) * lq],
        }
    }
}

fn pad<'a>(rows: impl Iterator<Item = &'a [usize]>, len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for row in rows {
        ids.extend_from_slice(row);
        ids.resize(ids.len() + len - row.len(), PAD);
        mask.extend(std::iter::repeat_n(true, row.len()));
        mask.resize(mask.len() + len - row.len(), false);
    }
    (ids, mask)
}

/// Shuffle by `seed`, then cut into batches of `batch_size`; the last batch
/// may be smaller.
pub fn make_batches(examples: &[Encoded], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<&Encoded> = examples.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(Batch::from_examples).collect())
}
