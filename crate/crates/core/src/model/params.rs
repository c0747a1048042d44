use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::nn::{DenseWeights, Init, LstmWeights, ParamSpec};
use crate::tensor::{Activation, ParamId, ParamStore, Scalar, Tensor};

pub const EMBEDDING: &str = "embedding";

/// Memory update rule for the multi-turn layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryUpdate {
    /// `g = σ(W_g [c ; m] + b_g)`, `m' = g⊙c + (1−g)⊙m`
    Gate(DenseWeights),
    /// `m' = ReLU(W_m [c ; m])`
    Relu(DenseWeights),
    None,
}

/// Typed handles to every tensor of a model, bound by name to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embedding: ParamId,
    pub enc_fwd: LstmWeights,
    pub enc_bwd: LstmWeights,
    /// `W^c, b^c`, `W^s, b^s`, `W^m, b^m` in view order.
    pub views: [DenseWeights; NUM_VIEWS],
    /// `W_inf`, no bias.
    pub inf_reduce: DenseWeights,
    pub inf_fwd: LstmWeights,
    pub inf_bwd: LstmWeights,
    pub memory: MemoryUpdate,
    pub mlp_hidden: DenseWeights,
    pub mlp_out: DenseWeights,
}

const VIEW_PREFIXES: [&str; NUM_VIEWS] = ["match.concat", "match.sub", "match.mul"];

fn reduce_input(config: &ModelConfig) -> usize {
    let d = config.hidden;
    match config.variant {
        // [u^k ; m^{k-1}]
        Variant::Full | Variant::GateRelu => 3 * d,
        Variant::NoMemory => d,
        // [u^c ; u^s ; u^m]
        Variant::MixedSingleTurn => 3 * d,
    }
}

/// Every tensor the configuration needs, in a fixed order. The embedding
/// table comes first and is not trainable.
pub fn param_specs(config: &ModelConfig, vocab_size: usize) -> Vec<ParamSpec> {
    let (r, d) = (config.embed_dim, config.hidden);
    let mut specs = vec![ParamSpec {
        trainable: false,
        ..ParamSpec::new(EMBEDDING, &[vocab_size, r], Init::Embedding)
    }];
    specs.extend(LstmWeights::specs("enc.fwd", r, d));
    specs.extend(LstmWeights::specs("enc.bwd", r, d));
    let view_inputs = [4 * d, 2 * d, 2 * d];
    for (prefix, input) in VIEW_PREFIXES.iter().zip(view_inputs) {
        specs.extend(DenseWeights::specs(prefix, input, d, true));
    }
    specs.extend(DenseWeights::specs("inf.reduce", reduce_input(config), d, false));
    specs.extend(LstmWeights::specs("inf.fwd", d, d));
    specs.extend(LstmWeights::specs("inf.bwd", d, d));
    match config.variant {
        Variant::Full => specs.extend(DenseWeights::specs("memory.gate", 4 * d, 2 * d, true)),
        Variant::GateRelu => specs.extend(DenseWeights::specs("memory.relu", 4 * d, 2 * d, false)),
        Variant::NoMemory | Variant::MixedSingleTurn => {}
    }
    specs.extend(DenseWeights::specs(
        "mlp.hidden",
        config.pooled_width(),
        config.mlp_hidden,
        true,
    ));
    specs.extend(DenseWeights::specs(
        "mlp.out",
        config.mlp_hidden,
        config.num_labels(),
        true,
    ));
    specs
}

impl Layout {
    pub fn bind<F: Scalar>(config: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        let (r, d) = (config.embed_dim, config.hidden);
        let embedding = store
            .id(EMBEDDING)
            .ok_or_else(|| Error::Contract("missing embedding table".into()))?;
        let emb_shape = store.get(embedding).shape();
        if emb_shape.len() != 2 || emb_shape[1] != r {
            return Err(Error::shape("embedding", emb_shape, &[0, r]));
        }
        let view_inputs = [4 * d, 2 * d, 2 * d];
        let view =
            |i: usize| DenseWeights::bind(store, VIEW_PREFIXES[i], view_inputs[i], d, true, Some(Activation::Relu));
        let memory = match config.variant {
            Variant::Full => MemoryUpdate::Gate(DenseWeights::bind(
                store,
                "memory.gate",
                4 * d,
                2 * d,
                true,
                Some(Activation::Sigmoid),
            )?),
            Variant::GateRelu => MemoryUpdate::Relu(DenseWeights::bind(
                store,
                "memory.relu",
                4 * d,
                2 * d,
                false,
                Some(Activation::Relu),
            )?),
            Variant::NoMemory | Variant::MixedSingleTurn => MemoryUpdate::None,
        };
        Ok(Layout {
            embedding,
            enc_fwd: LstmWeights::bind(store, "enc.fwd", r, d)?,
            enc_bwd: LstmWeights::bind(store, "enc.bwd", r, d)?,
            views: [view(0)?, view(1)?, view(2)?],
            inf_reduce: DenseWeights::bind(store, "inf.reduce", reduce_input(config), d, false, None)?,
            inf_fwd: LstmWeights::bind(store, "inf.fwd", d, d)?,
            inf_bwd: LstmWeights::bind(store, "inf.bwd", d, d)?,
            memory,
            mlp_hidden: DenseWeights::bind(
                store,
                "mlp.hidden",
                config.pooled_width(),
                config.mlp_hidden,
                true,
                Some(Activation::Tanh),
            )?,
            mlp_out: DenseWeights::bind(store, "mlp.out", config.mlp_hidden, config.num_labels(), true, None)?,
        })
    }
}

/// Fresh parameters for `config`. Matrices get Glorot-uniform values, biases
/// zeros (forget gates 1), and the embedding table is zero until loaded.
pub fn init_store<F: Scalar>(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<ParamStore<F>> {
    if vocab_size < 2 {
        return Err(Error::Config("vocabulary must contain PAD and UNK".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(config, vocab_size) {
        let t: Tensor<F> = spec.materialize(&mut rng);
        store.insert(spec.name, t)?;
    }
    Ok(store)
}
