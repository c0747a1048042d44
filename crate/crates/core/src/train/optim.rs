use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over the trainable tensors of a store. Reads each
/// tensor's accumulated gradient buffer.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if self.first.is_empty() {
            let sizes: Vec<usize> = store.iter().map(|(_, _, t)| t.numel()).collect();
            self.first = sizes.iter().map(|&n| vec![F::zero(); n]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match the store".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let c1 = F::of(1.0 - beta1.powi(t));
        let c2 = F::of(1.0 - beta2.powi(t));
        let (lr, eps) = (F::of(lr), F::of(eps));
        let ids: Vec<ParamId> = store.trainable().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let tensor = store.get_mut(id);
            let grad = tensor.grad().ok_or(Error::MissingGrad(name))?.to_vec();
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Trainable rank-2 tensors: the weight matrices the penalty covers.
pub fn penalized<F: Scalar>(store: &ParamStore<F>) -> Vec<ParamId> {
    store
        .trainable()
        .filter(|&id| store.get(id).shape().len() == 2)
        .collect()
}

/// `loss + coeff · Σ‖W‖²` over the weight matrices of the graph's store.
pub fn regularized_loss<F: Scalar>(g: &mut Graph<'_, F>, loss: Var, store: &ParamStore<F>, coeff: F) -> Result<Var> {
    if coeff == F::zero() {
        return Ok(loss);
    }
    let mut total = loss;
    for id in penalized(store) {
        let w = g.param(id);
        let sq = g.sum_squares(w)?;
        let term = g.scale(sq, coeff)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[(&str, &[f64], &[usize])]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, data, shape) in values {
            let t = Tensor::from_vec(data.to_vec(), shape).unwrap().with_requires_grad(true);
            s.insert(*name, t).unwrap();
        }
        s
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut s = store(&[("w", &[0.3, -0.2], &[1, 2])]);
        s.zero_grads();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().data(), &[0.3, -0.2]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store(&[("w", &[1.0, 1.0, 1.0], &[3])]);
        s.get_mut(s.id("w").unwrap())
            .accumulate_grad(&[2.5, -0.01, 40.0])
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        let w = s.by_name("w").unwrap().data();
        for (x, sign) in w.iter().zip([1.0, -1.0, 1.0]) {
            assert!((x - (1.0 - 5e-4 * sign)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = store(&[("w", &[0.5], &[1])]);
        let id = s.id("w").unwrap();
        let mut adam = Adam::new(cfg);
        let grads = [0.8, -0.3];
        for g in grads {
            s.get_mut(id).zero_grad();
            s.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam.step(&mut s).unwrap();
        }
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((s.get(id).data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn frozen_tensors_skipped_and_missing_grad_reported() {
        let mut s = store(&[("w", &[1.0], &[1])]);
        s.insert("frozen", Tensor::from_vec(vec![2.0], &[1]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s), Err(Error::MissingGrad(n)) if n == "w"));
        s.zero_grads();
        adam.step(&mut s).unwrap();
        assert_eq!(s.by_name("frozen").unwrap().data(), &[2.0]);
    }

    #[test]
    fn penalty_values_and_gradient() {
        let s = store(&[("w", &[2.0], &[1, 1]), ("b", &[5.0], &[1])]);
        let mut g = Graph::with_params(&s);
        let loss = g.constant(Tensor::scalar(0.7));
        let same = regularized_loss(&mut g, loss, &s, 0.0).unwrap();
        assert_eq!(g.value(same), &[0.7]);
        let total = regularized_loss(&mut g, loss, &s, 0.0003).unwrap();
        assert!((g.value(total)[0] - (0.7 + 0.0012)).abs() < 1e-15);

        let s = store(&[("w", &[0.3, -1.2, 0.8, 0.05], &[2, 2])]);
        let mut g = Graph::with_params(&s);
        let zero = g.constant(Tensor::scalar(0.0));
        let total = regularized_loss(&mut g, zero, &s, 0.01).unwrap();
        let grads = g.backward(total).unwrap();
        let analytic = grads.param_grad(s.id("w").unwrap()).unwrap();
        let w = s.by_name("w").unwrap().data();
        let h = 1e-5;
        for i in 0..4 {
            let f = |delta: f64| {
                0.01 * w
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let x = if i == j { x + delta } else { *x };
                        x * x
                    })
                    .sum::<f64>()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            assert!((analytic[i] - numeric).abs() < 1e-9);
            assert!((analytic[i] - 2.0 * 0.01 * w[i]).abs() < 1e-15);
        }
    }
}
