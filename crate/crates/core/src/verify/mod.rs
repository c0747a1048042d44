//! Independent checks: finite differences, parameter counting and a
//! graph-free forward pass.

mod oracle;

pub use oracle::{compare_traces, compare_with_oracle, forward_oracle, Mat, OracleComparison, OracleTrace};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use twofloat::TwoFloat;

use crate::error::Result;
use crate::model::{param_specs, Mimn, Mode, ModelConfig, SentencePair, Variant};
use crate::tensor::{BackwardFault, Graph, ParamId, Scalar};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub variant: Variant,
    pub seed: u64,
    pub tolerance: f64,
    /// Tensors larger than this are checked on a seeded subsample of this size.
    pub max_components: usize,
    /// Corrupts one backward rule, for negative controls.
    pub fault: Option<BackwardFault>,
}

impl GradCheckConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        GradCheckConfig {
            variant,
            seed,
            tolerance: 1e-5,
            max_components: 400,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub tolerance: f64,
    pub passed: bool,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
    /// Names of tensors over tolerance, worst first.
    pub offenders: Vec<String>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Owned token ids for one unpadded pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: usize,
}

impl Instance {
    pub fn masks(&self) -> (Vec<bool>, Vec<bool>) {
        (vec![true; self.premise.len()], vec![true; self.hypothesis.len()])
    }
}

/// Tiny double-precision model with random embeddings and biases, so no
/// unit sits at a symmetric point. Vocabulary of `vocab` ids.
pub fn random_tiny_model(config: ModelConfig, vocab: usize, seed: u64) -> Result<Mimn<f64>> {
    let mut model = Mimn::<f64>::new(config, vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let emb = model.layout().embedding;
    let ids: Vec<ParamId> = model.store().ids().collect();
    for id in ids {
        let t = model.store_mut().get_mut(id);
        if id == emb {
            let r = t.shape()[1];
            t.data_mut()[r..]
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
        } else if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    Ok(model)
}

/// A random pair with lengths in `1..=max_len` over ids `2..vocab`.
pub fn random_instance(rng: &mut impl Rng, vocab: usize, max_len: usize, labels: usize) -> Instance {
    let sentence = |rng: &mut _| -> Vec<usize> {
        let n = Rng::random_range(rng, 1..=max_len);
        (0..n).map(|_| Rng::random_range(rng, 2..vocab)).collect()
    };
    let premise = sentence(rng);
    let hypothesis = sentence(rng);
    Instance {
        premise,
        hypothesis,
        label: rng.random_range(0..labels),
    }
}

fn loss<F: Scalar>(model: &Mimn<F>, x: &Instance) -> Result<F> {
    let (pm, qm) = x.masks();
    let mut g = Graph::with_params(model.store());
    let vars = model.forward_graph(&mut g, pair(x, &pm, &qm), &mut Mode::eval())?;
    let ce = g.cross_entropy(vars.logits, x.label)?;
    Ok(g.value(ce)[0])
}

fn pair<'a>(x: &'a Instance, pm: &'a [bool], qm: &'a [bool]) -> SentencePair<'a> {
    SentencePair {
        premise: &x.premise,
        premise_mask: pm,
        hypothesis: &x.hypothesis,
        hypothesis_mask: qm,
    }
}

/// Compares analytic gradients of the cross-entropy on `x` with central
/// differences for every trainable tensor of `model`. The perturbed losses
/// are evaluated in double-double: in plain f64 one ulp of loss over `2·STEP`
/// is already ~1e-11, which swamps components smaller than ~1e-6.
pub fn gradcheck_model(model: &Mimn<f64>, x: &Instance, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (pm, qm) = x.masks();
    let grads = {
        let mut g = Graph::with_params(model.store());
        if let Some(fault) = config.fault {
            g.inject_fault(fault);
        }
        let vars = model.forward_graph(&mut g, pair(x, &pm, &qm), &mut Mode::eval())?;
        let ce = g.cross_entropy(vars.logits, x.label)?;
        g.backward(ce)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164);
    let mut probe: Mimn<TwoFloat> = model.cast();
    let mut tensors = Vec::new();
    let ids: Vec<ParamId> = model.store().trainable().collect();
    for id in ids {
        let numel = model.store().get(id).numel();
        let indices: Vec<usize> = if numel > config.max_components {
            let mut v = sample(&mut rng, numel, config.max_components).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..numel).collect()
        };
        let analytic = grads.param_grad(id);
        let mut check = TensorCheck {
            name: model.store().name(id).to_string(),
            checked: indices.len(),
            numel,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in indices {
            let original = probe.store().get(id).data()[i];
            probe.store_mut().get_mut(id).data_mut()[i] = original + STEP;
            let plus = loss(&probe, x)?;
            probe.store_mut().get_mut(id).data_mut()[i] = original - STEP;
            let minus = loss(&probe, x)?;
            probe.store_mut().get_mut(id).data_mut()[i] = original;
            let numeric = ((plus - minus) / (2.0 * STEP)).hi();
            let a = analytic.map_or(0.0, |g| g[i]);
            let rel = relative_error(a, numeric);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    let mut bad: Vec<&TensorCheck> = tensors
        .iter()
        .filter(|t| t.max_rel_error.is_nan() || t.max_rel_error >= config.tolerance)
        .collect();
    bad.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        variant: model.config().variant,
        tolerance: config.tolerance,
        passed: bad.is_empty(),
        max_rel_error,
        offenders: bad.iter().map(|t| t.name.clone()).collect(),
        tensors,
    })
}

/// Gradient check on a random tiny model (r = d = 4) and a random pair of
/// 3-token sentences.
pub fn gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model_config = ModelConfig::tiny(config.variant);
    if config.variant == Variant::MixedSingleTurn {
        model_config.turns = 1;
    }
    let vocab = 10;
    let model = random_tiny_model(model_config, vocab, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = Instance {
        premise: (0..3).map(|_| rng.random_range(2..vocab)).collect(),
        hypothesis: (0..3).map(|_| rng.random_range(2..vocab)).collect(),
        label: rng.random_range(0..model.config().num_labels()),
    };
    gradcheck_model(&model, &x, config)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCountReport {
    pub variant: Variant,
    pub tensors: Vec<TensorCount>,
    /// Trainable parameters; the embedding table is excluded.
    pub total: usize,
}

/// Counts trainable parameters from the declared shapes alone.
pub fn count_params(config: &ModelConfig) -> ParamCountReport {
    // the vocabulary only shapes the embedding table, which is not counted
    let tensors: Vec<TensorCount> = param_specs(config, 2)
        .into_iter()
        .filter(|s| s.trainable)
        .map(|s| TensorCount {
            count: s.numel(),
            name: s.name,
            shape: s.shape,
        })
        .collect();
    ParamCountReport {
        variant: config.variant,
        total: tensors.iter().map(|t| t.count).sum(),
        tensors,
    }
}
