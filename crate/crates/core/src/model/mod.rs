//! The matching network: encode, align, match, multi-turn inference, classify.

mod config;
mod params;

pub use config::{ModelConfig, Variant, NUM_VIEWS, THREE_WAY_LABELS, TWO_WAY_LABELS};
pub use params::{init_store, param_specs, Layout, MemoryUpdate, EMBEDDING};

use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{bilstm, dense, dropout};
use crate::tensor::{Gradients, Graph, ParamStore, ReduceKind, Scalar, Tensor, Var};

/// Token ids and masks for one premise/hypothesis pair. Masks are true at
/// real tokens; rows may carry trailing padding.
#[derive(Clone, Copy, Debug)]
pub struct SentencePair<'a> {
    pub premise: &'a [usize],
    pub premise_mask: &'a [bool],
    pub hypothesis: &'a [usize],
    pub hypothesis_mask: &'a [bool],
}

/// `[u^c, u^s, u^m]` for one sentence, each `[l×d]`.
#[derive(Clone, Copy, Debug)]
pub struct MatchingSequence {
    pub views: [Var; NUM_VIEWS],
}

/// Graph nodes produced by one inference turn.
#[derive(Clone, Copy, Debug)]
pub struct TurnVars {
    /// `c^k`, `[l×2d]`
    pub inference: Var,
    /// `m^k` after the update, for variants with memory.
    pub memory: Option<Var>,
}

/// Named intermediates of a forward pass, as graph nodes.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub premise_context: Var,
    pub hypothesis_context: Var,
    pub scores: Var,
    pub premise_aligned: Var,
    pub hypothesis_aligned: Var,
    pub premise_views: MatchingSequence,
    pub hypothesis_views: MatchingSequence,
    pub premise_turns: Vec<TurnVars>,
    pub hypothesis_turns: Vec<TurnVars>,
    pub premise_inference: Var,
    pub hypothesis_inference: Var,
    pub logits: Var,
}

/// Materialized intermediates of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<F> {
    pub premise_context: Tensor<F>,
    pub hypothesis_context: Tensor<F>,
    /// `e`, `[l_p×l_q]`
    pub scores: Tensor<F>,
    pub premise_aligned: Tensor<F>,
    pub hypothesis_aligned: Tensor<F>,
    pub premise_views: Vec<Tensor<F>>,
    pub hypothesis_views: Vec<Tensor<F>>,
    pub premise_inference: Vec<Tensor<F>>,
    pub premise_memory: Vec<Tensor<F>>,
    pub hypothesis_inference: Vec<Tensor<F>>,
    pub hypothesis_memory: Vec<Tensor<F>>,
    pub logits: Vec<F>,
    pub probs: Vec<F>,
}

/// Dropout state for one forward pass.
pub struct Mode<'r> {
    pub training: bool,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl Mode<'_> {
    pub fn eval() -> Self {
        Mode {
            training: false,
            rng: None,
        }
    }
}

impl<'r> Mode<'r> {
    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Mode {
            training: true,
            rng: Some(rng),
        }
    }

    fn dropout<F: Scalar>(&mut self, g: &mut Graph<'_, F>, x: Var, rate: f64) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => dropout(g, x, rate, true, &mut **rng),
            _ => Ok(x),
        }
    }
}

/// A model: configuration, parameters and their typed layout.
#[derive(Clone, Debug)]
pub struct Mimn<F: Scalar> {
    config: ModelConfig,
    store: ParamStore<F>,
    layout: Layout,
}

impl<F: Scalar> Mimn<F> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = init_store(&config, vocab_size, seed)?;
        Self::from_store(config, store)
    }

    pub fn from_store(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::bind(&config, &store)?;
        Ok(Mimn { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn into_store(self) -> ParamStore<F> {
        self.store
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(self.layout.embedding).shape()[0]
    }

    /// Replaces the (fixed) embedding table. Row 0 is PAD and must stay zero.
    pub fn set_embeddings(&mut self, table: Tensor<F>) -> Result<()> {
        let current = self.store.get(self.layout.embedding);
        if table.shape() != current.shape() {
            return Err(Error::shape("set_embeddings", current.shape(), table.shape()));
        }
        let r = table.shape()[1];
        if table.data()[..r].iter().any(|v| !v.is_zero()) {
            return Err(Error::Contract("PAD embedding row must be zero".into()));
        }
        *self.store.get_mut(self.layout.embedding) = table.with_requires_grad(false);
        Ok(())
    }

    /// Converts parameters to another precision.
    pub fn cast<G: Scalar>(&self) -> Mimn<G> {
        Mimn {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Looks up embedding rows for `ids`, giving `[l×r]`.
    pub fn embed(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let table = self.store.get(self.layout.embedding);
        let (v, r) = (table.shape()[0], table.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Degenerate {
                op: "embed",
                reason: "empty sentence".into(),
            });
        }
        let mut rows = Vec::with_capacity(ids.len() * r);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("token id {id} outside vocabulary of {v}")));
            }
            rows.extend_from_slice(&table.data()[id * r..(id + 1) * r]);
        }
        Ok(g.constant(Tensor::from_vec(rows, &[ids.len(), r])?))
    }

    /// Context vectors `[l×2d]` from embedded tokens `[l×r]`. The same
    /// encoder weights serve both sentences.
    pub fn encode(&self, g: &mut Graph<'_, F>, embedded: Var, mask: &[bool]) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Degenerate {
                op: "encode",
                reason: "empty sentence".into(),
            });
        }
        bilstm(g, embedded, mask, &self.layout.enc_fwd, &self.layout.enc_bwd)
    }

    /// Dot-product soft alignment. Returns `(p̃, q̃, e)` where
    /// `e = p̄·q̄ᵀ`, `p̃ = softmax_rows(e)·q̄` and `q̃ = softmax_rows(eᵀ)·p̄`.
    pub fn align(
        &self,
        g: &mut Graph<'_, F>,
        premise: Var,
        hypothesis: Var,
        premise_mask: &[bool],
        hypothesis_mask: &[bool],
    ) -> Result<(Var, Var, Var)> {
        let scores = g.matmul_nt(premise, hypothesis)?;
        let to_hyp = g.softmax_masked(scores, hypothesis_mask)?;
        let premise_aligned = g.matmul(to_hyp, hypothesis)?;
        let scores_t = g.transpose(scores)?;
        let to_prem = g.softmax_masked(scores_t, premise_mask)?;
        let hypothesis_aligned = g.matmul(to_prem, premise)?;
        Ok((premise_aligned, hypothesis_aligned, scores))
    }

    /// The three matching views of context against aligned vectors.
    pub fn match_views(&self, g: &mut Graph<'_, F>, context: Var, aligned: Var) -> Result<MatchingSequence> {
        let joined = g.concat(&[context, aligned], 1)?;
        let diff = g.sub(context, aligned)?;
        let prod = g.mul(context, aligned)?;
        let [wc, ws, wm] = &self.layout.views;
        Ok(MatchingSequence {
            views: [dense(g, joined, wc)?, dense(g, diff, ws)?, dense(g, prod, wm)?],
        })
    }

    /// Runs the inference BiLSTM over the matching sequence according to the
    /// variant. Returns the per-token output `[l×H]` and per-turn nodes.
    pub fn multi_turn_infer(
        &self,
        g: &mut Graph<'_, F>,
        seq: &MatchingSequence,
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<TurnVars>)> {
        let d = self.config.hidden;
        let l = mask.len();
        let lay = &self.layout;
        let rate = self.config.dropout;
        let infer = |g: &mut Graph<'_, F>, input: Var, mode: &mut Mode<'_>| -> Result<Var> {
            let reduced = dense(g, input, &lay.inf_reduce)?;
            let reduced = mode.dropout(g, reduced, rate)?;
            bilstm(g, reduced, mask, &lay.inf_fwd, &lay.inf_bwd)
        };

        match self.config.variant {
            Variant::MixedSingleTurn => {
                let mixed = g.concat(&seq.views, 1)?;
                let c = infer(g, mixed, mode)?;
                Ok((
                    c,
                    vec![TurnVars {
                        inference: c,
                        memory: None,
                    }],
                ))
            }
            Variant::NoMemory => {
                let mut turns = Vec::with_capacity(NUM_VIEWS);
                for &u in &seq.views {
                    let c = infer(g, u, mode)?;
                    turns.push(TurnVars {
                        inference: c,
                        memory: None,
                    });
                }
                let parts: Vec<Var> = turns.iter().map(|t| t.inference).collect();
                Ok((g.concat(&parts, 1)?, turns))
            }
            Variant::Full | Variant::GateRelu => {
                if self.config.turns != NUM_VIEWS {
                    return Err(Error::Config(format!(
                        "{} needs {NUM_VIEWS} turns, got {}",
                        self.config.variant, self.config.turns
                    )));
                }
                let mut memory = g.constant(Tensor::zeros(&[l, 2 * d]));
                let mut turns = Vec::with_capacity(NUM_VIEWS);
                for &u in &seq.views {
                    let input = g.concat(&[u, memory], 1)?;
                    let c = infer(g, input, mode)?;
                    let state = g.concat(&[c, memory], 1)?;
                    memory = match &lay.memory {
                        MemoryUpdate::Gate(w) => {
                            let gate = dense(g, state, w)?;
                            let ones = g.constant(Tensor::full(&[l, 2 * d], F::one()));
                            let keep = g.sub(ones, gate)?;
                            let fresh = g.mul(gate, c)?;
                            let old = g.mul(keep, memory)?;
                            g.add(fresh, old)?
                        }
                        MemoryUpdate::Relu(w) => dense(g, state, w)?,
                        MemoryUpdate::None => unreachable!("bound layout has a memory rule"),
                    };
                    turns.push(TurnVars {
                        inference: c,
                        memory: Some(memory),
                    });
                }
                Ok((memory, turns))
            }
        }
    }

    /// Max and mean pooling of both sentences, `[max p; mean p; max q; mean q]`,
    /// then a tanh hidden layer and a linear output layer.
    pub fn classify(
        &self,
        g: &mut Graph<'_, F>,
        premise: Var,
        hypothesis: Var,
        premise_mask: &[bool],
        hypothesis_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let p_max = g.reduce_masked(premise, premise_mask, ReduceKind::Max)?;
        let p_mean = g.reduce_masked(premise, premise_mask, ReduceKind::Mean)?;
        let q_max = g.reduce_masked(hypothesis, hypothesis_mask, ReduceKind::Max)?;
        let q_mean = g.reduce_masked(hypothesis, hypothesis_mask, ReduceKind::Mean)?;
        let pooled = g.concat(&[p_max, p_mean, q_max, q_mean], 0)?;
        let pooled = mode.dropout(g, pooled, self.config.dropout)?;
        let hidden = dense(g, pooled, &self.layout.mlp_hidden)?;
        dense(g, hidden, &self.layout.mlp_out)
    }

    /// Full forward pass on a graph bound to this model's parameters.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, F>,
        pair: SentencePair<'_>,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        if pair.premise.len() != pair.premise_mask.len() || pair.hypothesis.len() != pair.hypothesis_mask.len() {
            return Err(Error::Contract("token and mask lengths differ".into()));
        }
        let rate = self.config.dropout;
        let p_emb = self.embed(g, pair.premise)?;
        let p_emb = mode.dropout(g, p_emb, rate)?;
        let q_emb = self.embed(g, pair.hypothesis)?;
        let q_emb = mode.dropout(g, q_emb, rate)?;

        let p_bar = self.encode(g, p_emb, pair.premise_mask)?;
        let q_bar = self.encode(g, q_emb, pair.hypothesis_mask)?;
        let (p_tilde, q_tilde, scores) = self.align(g, p_bar, q_bar, pair.premise_mask, pair.hypothesis_mask)?;
        let p_views = self.match_views(g, p_bar, p_tilde)?;
        let q_views = self.match_views(g, q_bar, q_tilde)?;
        let (p_inf, p_turns) = self.multi_turn_infer(g, &p_views, pair.premise_mask, mode)?;
        let (q_inf, q_turns) = self.multi_turn_infer(g, &q_views, pair.hypothesis_mask, mode)?;
        let logits = self.classify(g, p_inf, q_inf, pair.premise_mask, pair.hypothesis_mask, mode)?;
        Ok(ForwardVars {
            premise_context: p_bar,
            hypothesis_context: q_bar,
            scores,
            premise_aligned: p_tilde,
            hypothesis_aligned: q_tilde,
            premise_views: p_views,
            hypothesis_views: q_views,
            premise_turns: p_turns,
            hypothesis_turns: q_turns,
            premise_inference: p_inf,
            hypothesis_inference: q_inf,
            logits,
        })
    }

    /// Label distribution in evaluation mode.
    pub fn forward(&self, pair: SentencePair<'_>) -> Result<Vec<F>> {
        let mut g = Graph::with_params(&self.store);
        let vars = self.forward_graph(&mut g, pair, &mut Mode::eval())?;
        Ok(softmax(g.value(vars.logits)))
    }

    /// Evaluation-mode forward pass with every named intermediate.
    pub fn trace(&self, pair: SentencePair<'_>) -> Result<ForwardTrace<F>> {
        let mut g = Graph::with_params(&self.store);
        let v = self.forward_graph(&mut g, pair, &mut Mode::eval())?;
        let views = |s: &MatchingSequence| s.views.iter().map(|&u| g.tensor(u)).collect();
        let inference = |t: &[TurnVars]| t.iter().map(|t| g.tensor(t.inference)).collect();
        let memory = |t: &[TurnVars]| t.iter().filter_map(|t| t.memory).map(|m| g.tensor(m)).collect();
        let logits = g.value(v.logits).to_vec();
        Ok(ForwardTrace {
            premise_context: g.tensor(v.premise_context),
            hypothesis_context: g.tensor(v.hypothesis_context),
            scores: g.tensor(v.scores),
            premise_aligned: g.tensor(v.premise_aligned),
            hypothesis_aligned: g.tensor(v.hypothesis_aligned),
            premise_views: views(&v.premise_views),
            hypothesis_views: views(&v.hypothesis_views),
            premise_inference: inference(&v.premise_turns),
            premise_memory: memory(&v.premise_turns),
            hypothesis_inference: inference(&v.hypothesis_turns),
            hypothesis_memory: memory(&v.hypothesis_turns),
            probs: softmax(&logits),
            logits,
        })
    }

    /// Cross-entropy of one example times `weight`, with gradients for every
    /// trainable parameter. Returns the unweighted loss.
    pub fn loss_and_grads(
        &self,
        pair: SentencePair<'_>,
        gold: usize,
        weight: F,
        mode: &mut Mode<'_>,
    ) -> Result<(F, Gradients<F>)> {
        self.check_label(gold)?;
        let mut g = Graph::with_params(&self.store);
        let vars = self.forward_graph(&mut g, pair, mode)?;
        let ce = g.cross_entropy(vars.logits, gold)?;
        let scaled = g.scale(ce, weight)?;
        let grads = g.backward(scaled)?;
        Ok((g.value(ce)[0], grads))
    }

    fn check_label(&self, gold: usize) -> Result<()> {
        if gold >= self.config.num_labels() {
            return Err(Error::Label(format!(
                "gold label {gold} outside the {}-label set",
                self.config.num_labels()
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| Scalar::exp(z - max)).collect();
    let total = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| Scalar::div(e, total)).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `−ln p(gold)`.
pub fn nll<F: Scalar>(probs: &[F], gold: usize) -> Result<F> {
    let p = probs
        .get(gold)
        .ok_or_else(|| Error::Label(format!("gold label {gold} outside {} classes", probs.len())))?;
    Ok(-Scalar::ln(*p))
}
