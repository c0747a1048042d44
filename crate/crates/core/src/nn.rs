//! LSTM, bidirectional LSTM, dense layers and dropout on top of [`Graph`].
//!
//! Layers do not own tensors. Each layer declares the [`ParamSpec`]s it
//! needs under a name prefix, the model materializes them into a
//! [`ParamStore`], and the layer is then bound back to those entries by name.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    Zeros,
    /// Zeros, except the forget-gate block which is set to 1.
    LstmBias,
    /// Fixed word vectors, filled by the embedding loader.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<F: Scalar, R: Rng>(&self, rng: &mut R) -> Tensor<F> {
        let n = self.numel();
        let data: Vec<F> = match self.init {
            Init::Zeros | Init::Embedding => vec![F::zero(); n],
            Init::Glorot => {
                let (fan_out, fan_in) = match self.shape.as_slice() {
                    [o, i] => (*o, *i),
                    [o] => (*o, 1),
                    s => (s[0], s[1..].iter().product()),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::of(rng.random_range(-limit..limit))).collect()
            }
            Init::LstmBias => {
                let h = n / 4;
                (0..n)
                    .map(|i| if (h..2 * h).contains(&i) { F::one() } else { F::zero() })
                    .collect()
            }
        };
        Tensor::from_vec(data, &self.shape)
            .expect("spec shape is positive")
            .with_requires_grad(self.trainable)
    }
}

fn bind(store: &ParamStore<impl Scalar>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Shape {
            op: "bind",
            lhs: store.get(id).shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(id)
}

/// One LSTM direction. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmWeights {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmWeights {
    pub fn specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.w_ih"), &[4 * hidden, input], Init::Glorot),
            ParamSpec::new(format!("{prefix}.w_hh"), &[4 * hidden, hidden], Init::Glorot),
            ParamSpec::new(format!("{prefix}.bias"), &[4 * hidden], Init::LstmBias),
        ]
    }

    pub fn bind<F: Scalar>(store: &ParamStore<F>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmWeights {
            w_ih: bind(store, &format!("{prefix}.w_ih"), &[4 * hidden, input])?,
            w_hh: bind(store, &format!("{prefix}.w_hh"), &[4 * hidden, hidden])?,
            bias: bind(store, &format!("{prefix}.bias"), &[4 * hidden])?,
            input,
            hidden,
        })
    }
}

/// `activation(W·x + b)` with `W: [out×in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseWeights {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Option<Activation>,
    pub input: usize,
    pub output: usize,
}

impl DenseWeights {
    pub fn specs(prefix: &str, input: usize, output: usize, bias: bool) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::new(format!("{prefix}.w"), &[output, input], Init::Glorot)];
        if bias {
            v.push(ParamSpec::new(format!("{prefix}.b"), &[output], Init::Zeros));
        }
        v
    }

    pub fn bind<F: Scalar>(
        store: &ParamStore<F>,
        prefix: &str,
        input: usize,
        output: usize,
        bias: bool,
        activation: Option<Activation>,
    ) -> Result<Self> {
        Ok(DenseWeights {
            weight: bind(store, &format!("{prefix}.w"), &[output, input])?,
            bias: if bias {
                Some(bind(store, &format!("{prefix}.b"), &[output])?)
            } else {
                None
            },
            activation,
            input,
            output,
        })
    }
}

/// Applies a dense layer to `x: [in]` (giving `[out]`) or row-wise to `x: [n×in]`.
pub fn dense<F: Scalar>(g: &mut Graph<'_, F>, x: Var, w: &DenseWeights) -> Result<Var> {
    let vector = g.shape(x).len() == 1;
    let rows = if vector { g.reshape(x, &[1, g.shape(x)[0]])? } else { x };
    let weight = g.param(w.weight);
    let mut y = g.matmul_nt(rows, weight)?;
    if let Some(b) = w.bias {
        let b = g.param(b);
        y = g.add_row_bias(y, b)?;
    }
    if let Some(act) = w.activation {
        y = g.activation(y, act)?;
    }
    if vector {
        y = g.reshape(y, &[w.output])?;
    }
    Ok(y)
}

/// Inverted dropout: kept entries are scaled by `1/(1−rate)`; identity when
/// not training or when `rate == 0`.
pub fn dropout<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let factors = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect();
    g.mask_mul(x, factors)
}

/// One recurrence step from an already projected input row `x·W_ihᵀ + b`.
fn lstm_step<F: Scalar>(
    g: &mut Graph<'_, F>,
    projected: Var,
    prev: Option<(Var, Var)>,
    w_hh: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let gates = match prev {
        Some((h, _)) => {
            let rec = g.matmul_nt(h, w_hh)?;
            g.add(projected, rec)?
        }
        None => projected,
    };
    let i = g.slice(gates, 1, 0, hidden)?;
    let f = g.slice(gates, 1, hidden, hidden)?;
    let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
    let o = g.slice(gates, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(i)?;
    let o = g.sigmoid(o)?;
    let cand = g.tanh(cand)?;
    let new_info = g.mul(i, cand)?;
    let c = match prev {
        Some((_, c_prev)) => {
            let f = g.sigmoid(f)?;
            let kept = g.mul(f, c_prev)?;
            g.add(kept, new_info)?
        }
        None => new_info,
    };
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// A single LSTM step on `x: [1×in]` with states `[1×h]`.
pub fn lstm_cell<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    for (v, width) in [(x, w.input), (h_prev, w.hidden), (c_prev, w.hidden)] {
        if g.shape(v) != [1, width] {
            return Err(Error::shape("lstm_cell", g.shape(v), &[1, width]));
        }
    }
    let w_ih = g.param(w.w_ih);
    let b = g.param(w.bias);
    let w_hh = g.param(w.w_hh);
    let proj = g.matmul_nt(x, w_ih)?;
    let proj = g.add_row_bias(proj, b)?;
    lstm_step(g, proj, Some((h_prev, c_prev)), w_hh, w.hidden)
}

fn run_direction<F: Scalar>(
    g: &mut Graph<'_, F>,
    seq: Var,
    mask: &[bool],
    w: &LstmWeights,
    reverse: bool,
) -> Result<Var> {
    let n = mask.len();
    let w_ih = g.param(w.w_ih);
    let w_hh = g.param(w.w_hh);
    let b = g.param(w.bias);
    let proj = g.matmul_nt(seq, w_ih)?;
    let proj = g.add_row_bias(proj, b)?;

    let mut outputs: Vec<Option<Var>> = vec![None; n];
    let mut state: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for t in order {
        // padding positions carry the state through untouched
        if !mask[t] {
            continue;
        }
        let row = g.row(proj, t)?;
        let (h, c) = lstm_step(g, row, state, w_hh, w.hidden)?;
        state = Some((h, c));
        outputs[t] = Some(h);
    }
    let mut zero = None;
    let rows: Vec<Var> = outputs
        .into_iter()
        .map(|o| o.unwrap_or_else(|| *zero.get_or_insert_with(|| g.constant(Tensor::zeros(&[1, w.hidden])))))
        .collect();
    g.concat(&rows, 0)
}

/// Bidirectional LSTM over `seq: [n×in]`, returning `[n×2h]` with row `i`
/// holding `[forward h_i ; backward h_i]`. Both directions start from zero
/// state; masked positions are skipped by the recurrence and their output
/// rows are zero.
pub fn bilstm<F: Scalar>(
    g: &mut Graph<'_, F>,
    seq: Var,
    mask: &[bool],
    fwd: &LstmWeights,
    bwd: &LstmWeights,
) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    match shape.as_slice() {
        [n, d] if *n == mask.len() && *d == fwd.input && *d == bwd.input => {}
        _ => return Err(Error::shape("bilstm", &shape, &[mask.len(), fwd.input])),
    }
    if mask.is_empty() {
        return Err(Error::Degenerate {
            op: "bilstm",
            reason: "empty sequence".into(),
        });
    }
    let f = run_direction(g, seq, mask, fwd, false)?;
    let b = run_direction(g, seq, mask, bwd, true)?;
    g.concat(&[f, b], 1)
}
