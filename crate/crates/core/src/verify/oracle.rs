//! The forward pass again, as plain loops over `Vec<f64>` with no graph.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Mimn, ModelConfig, SentencePair, Variant};
use crate::tensor::ParamStore;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    fn hcat(parts: &[&Mat]) -> Mat {
        let rows = (0..parts[0].rows)
            .map(|i| parts.iter().flat_map(|m| m.row(i).iter().copied()).collect())
            .collect();
        Mat::from_rows(rows)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Weights<'a> {
    store: &'a ParamStore<f64>,
}

impl Weights<'_> {
    fn get(&self, name: &str) -> Result<(&[f64], &[usize])> {
        let t = self
            .store
            .by_name(name)
            .ok_or_else(|| Error::Contract(format!("oracle: no tensor `{name}`")))?;
        Ok((t.data(), t.shape()))
    }

    /// `y = W x + b` for a weight stored `[out×in]`.
    fn affine(&self, prefix: &str, x: &[f64], bias: bool) -> Result<Vec<f64>> {
        let (w, shape) = self.get(&format!("{prefix}.w"))?;
        let (out, inp) = (shape[0], shape[1]);
        let b = if bias {
            Some(self.get(&format!("{prefix}.b"))?.0)
        } else {
            None
        };
        Ok((0..out)
            .map(|o| {
                let dot: f64 = (0..inp).map(|k| w[o * inp + k] * x[k]).sum();
                dot + b.map_or(0.0, |b| b[o])
            })
            .collect())
    }

    fn dense_rows(&self, prefix: &str, x: &Mat, bias: bool, act: fn(f64) -> f64) -> Result<Mat> {
        let rows = (0..x.rows)
            .map(|i| Ok(self.affine(prefix, x.row(i), bias)?.into_iter().map(act).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_rows(rows))
    }

    fn lstm(&self, prefix: &str, x: &Mat, reverse: bool) -> Result<Mat> {
        let (w_ih, s_ih) = self.get(&format!("{prefix}.w_ih"))?;
        let (w_hh, _) = self.get(&format!("{prefix}.w_hh"))?;
        let (b, _) = self.get(&format!("{prefix}.bias"))?;
        let (four_h, inp) = (s_ih[0], s_ih[1]);
        let h_dim = four_h / 4;
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut out = Mat::zeros(x.rows, h_dim);
        let steps: Vec<usize> = if reverse {
            (0..x.rows).rev().collect()
        } else {
            (0..x.rows).collect()
        };
        for t in steps {
            let xt = x.row(t);
            let z: Vec<f64> = (0..four_h)
                .map(|j| {
                    let a: f64 = (0..inp).map(|k| w_ih[j * inp + k] * xt[k]).sum();
                    let r: f64 = (0..h_dim).map(|k| w_hh[j * h_dim + k] * h[k]).sum();
                    a + r + b[j]
                })
                .collect();
            for k in 0..h_dim {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h_dim + k]);
                let g = z[2 * h_dim + k].tanh();
                let o = sigmoid(z[3 * h_dim + k]);
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
            out.data[t * h_dim..(t + 1) * h_dim].copy_from_slice(&h);
        }
        Ok(out)
    }

    fn bilstm(&self, prefix: &str, x: &Mat) -> Result<Mat> {
        let f = self.lstm(&format!("{prefix}.fwd"), x, false)?;
        let b = self.lstm(&format!("{prefix}.bwd"), x, true)?;
        Ok(Mat::hcat(&[&f, &b]))
    }
}

/// Intermediates of one oracle pass.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTrace {
    pub premise_context: Mat,
    pub hypothesis_context: Mat,
    pub scores: Mat,
    pub premise_views: Vec<Mat>,
    pub hypothesis_views: Vec<Mat>,
    pub premise_inference: Vec<Mat>,
    pub premise_memory: Vec<Mat>,
    pub hypothesis_inference: Vec<Mat>,
    pub hypothesis_memory: Vec<Mat>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `softmax(rows of a·bᵀ)·b` for each row of `a`, and the raw scores.
fn attend(a: &Mat, b: &Mat) -> (Mat, Mat) {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let scores = Mat::from_rows(
        (0..a.rows)
            .map(|i| (0..b.rows).map(|j| dot(a.row(i), b.row(j))).collect())
            .collect(),
    );
    let aligned = (0..a.rows)
        .map(|i| {
            let w = softmax(scores.row(i));
            (0..b.cols)
                .map(|k| (0..b.rows).map(|j| w[j] * b.at(j, k)).sum())
                .collect()
        })
        .collect();
    (Mat::from_rows(aligned), scores)
}

impl Mat {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn ident(x: f64) -> f64 {
    x
}

struct Inference {
    output: Mat,
    turns: Vec<Mat>,
    memory: Vec<Mat>,
}

fn infer(w: &Weights<'_>, config: &ModelConfig, views: &[Mat]) -> Result<Inference> {
    let d = config.hidden;
    let l = views[0].rows;
    let run = |input: &Mat| -> Result<Mat> {
        let reduced = w.dense_rows("inf.reduce", input, false, ident)?;
        w.bilstm("inf", &reduced)
    };
    match config.variant {
        Variant::MixedSingleTurn => {
            let c = run(&Mat::hcat(&[&views[0], &views[1], &views[2]]))?;
            Ok(Inference {
                output: c.clone(),
                turns: vec![c],
                memory: vec![],
            })
        }
        Variant::NoMemory => {
            let turns = views.iter().map(run).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Mat> = turns.iter().collect();
            Ok(Inference {
                output: Mat::hcat(&refs),
                turns,
                memory: vec![],
            })
        }
        Variant::Full | Variant::GateRelu => {
            let mut m = Mat::zeros(l, 2 * d);
            let mut turns = Vec::new();
            let mut memory = Vec::new();
            for u in views {
                let c = run(&Mat::hcat(&[u, &m]))?;
                let state = Mat::hcat(&[&c, &m]);
                m = if config.variant == Variant::Full {
                    let gate = w.dense_rows("memory.gate", &state, true, sigmoid)?;
                    let fresh = gate.zip(&c, |g, c| g * c);
                    let old = gate.zip(&m, |g, m| (1.0 - g) * m);
                    fresh.zip(&old, |a, b| a + b)
                } else {
                    w.dense_rows("memory.relu", &state, false, relu)?
                };
                turns.push(c);
                memory.push(m.clone());
            }
            Ok(Inference {
                output: m,
                turns,
                memory,
            })
        }
    }
}

fn pool(x: &Mat) -> Vec<f64> {
    let max = (0..x.cols).map(|c| (0..x.rows).map(|r| x.at(r, c)).fold(f64::NEG_INFINITY, f64::max));
    let mean = (0..x.cols).map(|c| (0..x.rows).map(|r| x.at(r, c)).sum::<f64>() / x.rows as f64);
    max.chain(mean).collect()
}

/// Oracle forward pass on unpadded token ids.
pub fn forward_oracle(model: &Mimn<f64>, premise: &[usize], hypothesis: &[usize]) -> Result<OracleTrace> {
    let config = model.config();
    let w = Weights { store: model.store() };
    let (table, shape) = w.get(crate::model::EMBEDDING)?;
    let r = shape[1];
    let embed = |ids: &[usize]| -> Result<Mat> {
        if ids.is_empty() {
            return Err(Error::Contract("oracle: empty sentence".into()));
        }
        Ok(Mat::from_rows(
            ids.iter().map(|&i| table[i * r..(i + 1) * r].to_vec()).collect(),
        ))
    };
    let p_bar = w.bilstm("enc", &embed(premise)?)?;
    let q_bar = w.bilstm("enc", &embed(hypothesis)?)?;
    let (p_tilde, scores) = attend(&p_bar, &q_bar);
    let (q_tilde, _) = attend(&q_bar, &p_bar);

    let views = |ctx: &Mat, ali: &Mat| -> Result<Vec<Mat>> {
        Ok(vec![
            w.dense_rows("match.concat", &Mat::hcat(&[ctx, ali]), true, relu)?,
            w.dense_rows("match.sub", &ctx.zip(ali, |a, b| a - b), true, relu)?,
            w.dense_rows("match.mul", &ctx.zip(ali, |a, b| a * b), true, relu)?,
        ])
    };
    let p_views = views(&p_bar, &p_tilde)?;
    let q_views = views(&q_bar, &q_tilde)?;
    let p_inf = infer(&w, config, &p_views)?;
    let q_inf = infer(&w, config, &q_views)?;

    let pooled: Vec<f64> = [pool(&p_inf.output), pool(&q_inf.output)].concat();
    let hidden: Vec<f64> = w
        .affine("mlp.hidden", &pooled, true)?
        .into_iter()
        .map(f64::tanh)
        .collect();
    let logits = w.affine("mlp.out", &hidden, true)?;
    Ok(OracleTrace {
        premise_context: p_bar,
        hypothesis_context: q_bar,
        scores,
        premise_views: p_views,
        hypothesis_views: q_views,
        premise_inference: p_inf.turns,
        premise_memory: p_inf.memory,
        hypothesis_inference: q_inf.turns,
        hypothesis_memory: q_inf.memory,
        probs: softmax(&logits),
        logits,
    })
}

/// Largest absolute difference per named intermediate, in pipeline order.
#[derive(Clone, Debug, Serialize)]
pub struct OracleComparison {
    pub diffs: Vec<(String, f64)>,
    /// First intermediate whose difference exceeds the tolerance.
    pub first_divergence: Option<String>,
    pub max_diff: f64,
}

impl OracleComparison {
    pub fn agrees(&self) -> bool {
        self.first_divergence.is_none()
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs model and oracle on the same unpadded pair and compares them with
/// [`compare_traces`].
pub fn compare_with_oracle(
    model: &Mimn<f64>,
    premise: &[usize],
    hypothesis: &[usize],
    tolerance: f64,
) -> Result<OracleComparison> {
    let oracle = forward_oracle(model, premise, hypothesis)?;
    let pm = vec![true; premise.len()];
    let qm = vec![true; hypothesis.len()];
    let trace = model.trace(SentencePair {
        premise,
        premise_mask: &pm,
        hypothesis,
        hypothesis_mask: &qm,
    })?;
    Ok(compare_traces(&trace, &oracle, tolerance))
}

/// Compares e, every view u, each turn's c^k then m^k, the logits and the
/// probabilities, in that order.
pub fn compare_traces(t: &ForwardTrace<f64>, oracle: &OracleTrace, tolerance: f64) -> OracleComparison {
    let mut diffs = vec![
        (
            "premise_context".to_string(),
            max_abs(t.premise_context.data(), &oracle.premise_context.data),
        ),
        (
            "hypothesis_context".to_string(),
            max_abs(t.hypothesis_context.data(), &oracle.hypothesis_context.data),
        ),
        ("e".to_string(), max_abs(t.scores.data(), &oracle.scores.data)),
    ];
    let sides = [
        ("premise", &t.premise_views, &oracle.premise_views),
        ("hypothesis", &t.hypothesis_views, &oracle.hypothesis_views),
    ];
    for (side, ours, theirs) in sides {
        for (name, (a, b)) in ["u_c", "u_s", "u_m"].iter().zip(ours.iter().zip(theirs)) {
            diffs.push((format!("{side}.{name}"), max_abs(a.data(), &b.data)));
        }
    }
    let turns = [
        (
            "premise",
            &t.premise_inference,
            &t.premise_memory,
            &oracle.premise_inference,
            &oracle.premise_memory,
        ),
        (
            "hypothesis",
            &t.hypothesis_inference,
            &t.hypothesis_memory,
            &oracle.hypothesis_inference,
            &oracle.hypothesis_memory,
        ),
    ];
    for (side, c, m, oc, om) in turns {
        if c.len() != oc.len() || m.len() != om.len() {
            diffs.push((format!("{side}.turns"), f64::INFINITY));
        }
        for k in 0..c.len().min(oc.len()) {
            diffs.push((format!("{side}.c.{}", k + 1), max_abs(c[k].data(), &oc[k].data)));
            if let (Some(a), Some(b)) = (m.get(k), om.get(k)) {
                diffs.push((format!("{side}.m.{}", k + 1), max_abs(a.data(), &b.data)));
            }
        }
    }
    diffs.push(("logits".to_string(), max_abs(&t.logits, &oracle.logits)));
    diffs.push(("probs".to_string(), max_abs(&t.probs, &oracle.probs)));
    let first_divergence = diffs
        .iter()
        .find(|(_, d)| d.is_nan() || *d > tolerance)
        .map(|(n, _)| n.clone());
    let max_diff = diffs.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    OracleComparison {
        diffs,
        first_divergence,
        max_diff,
    }
}
