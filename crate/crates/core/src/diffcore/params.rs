//! Named parameter arrays with gradient accumulators and Adam state.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: DenseArray,
    pub grad: DenseArray,
    pub m: DenseArray,
    pub v: DenseArray,
}

/// Parameter store with per-parameter Adam moments. Iteration order is the
/// sorted name order, so updates are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub seed: u64,
    /// Adam step counter (number of `adam_step` calls applied).
    pub step: usize,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: DenseArray) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: DenseArray::zeros(&shape),
                m: DenseArray::zeros(&shape),
                v: DenseArray::zeros(&shape),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = DenseArray::zeros(p.grad.shape());
        }
    }

    /// Add `g` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &DenseArray) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient for '{name}'"),
                expected: p.grad.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        p.grad = p.grad.add(g)?;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Standard Adam update with bias correction. The global gradient norm is
    /// clipped to `clip_norm` before the moment updates (clip disabled when
    /// `clip_norm <= 0`).
    pub fn adam_step(&mut self, lr: f64, betas: (f64, f64), clip_norm: f64) -> Result<()> {
        for (name, p) in &self.params {
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let sq_norm: f64 = self.params.values().map(|p| p.grad.dot(&p.grad)).sum();
        let norm = sq_norm.sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = betas;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        const ADAM_EPS: f64 = 1e-8;

        for p in self.params.values_mut() {
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad.data()[i] * scale;
                let m = b1 * p.m.data()[i] + (1.0 - b1) * g;
                let v = b2 * p.v.data()[i] + (1.0 - b2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new(0);
        store.insert("w", DenseArray::from_vec(vec![1.0, -2.0]));
        store.adam_step(1e-3, (0.9, 0.999), 1.0).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // Bias-corrected first step with grad 1.0 moves by ~lr.
        let mut store = ParamStore::new(0);
        store.insert("w", DenseArray::from_vec(vec![0.5]));
        store
            .accumulate_grad("w", &DenseArray::from_vec(vec![1.0]))
            .unwrap();
        store.adam_step(1e-3, (0.9, 0.999), 0.0).unwrap();
        let moved = 0.5 - store.get("w").unwrap().data()[0];
        assert!((moved - 1e-3).abs() < 1e-10, "moved {moved}");
    }

    #[test]
    fn clipping_scales_gradient() {
        // grad norm 10 with clip 1.0 -> effective gradient 10 * 0.1 = 1.0
        // entering the moment update.
        let mut a = ParamStore::new(0);
        a.insert("w", DenseArray::from_vec(vec![10.0]));
        a.accumulate_grad("w", &DenseArray::from_vec(vec![10.0])).unwrap();
        a.adam_step(1e-3, (0.9, 0.999), 1.0).unwrap();
        let m_clipped = a.iter().next().unwrap().1.m.data()[0];
        assert!((m_clipped - (1.0 - 0.9) * 1.0).abs() < 1e-12);

        let mut b = ParamStore::new(0);
        b.insert("w", DenseArray::from_vec(vec![10.0]));
        b.accumulate_grad("w", &DenseArray::from_vec(vec![10.0])).unwrap();
        b.adam_step(1e-3, (0.9, 0.999), 0.0).unwrap();
        let m_unclipped = b.iter().next().unwrap().1.m.data()[0];
        assert!((m_unclipped - (1.0 - 0.9) * 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new(0);
        store.insert("w", DenseArray::from_vec(vec![0.0]));
        store
            .accumulate_grad("w", &DenseArray::from_vec(vec![f64::NAN]))
            .unwrap();
        let err = store.adam_step(1e-3, (0.9, 0.999), 1.0).unwrap_err();
        assert!(err.to_string().contains("'w'"));
    }
}
