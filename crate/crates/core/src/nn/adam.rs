use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of a store, buffers included (their
/// moments stay zero).
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every trainable parameter from its
    /// accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), NnError> {
        if store.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "state tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (p, m) in store.iter_mut().zip(&self.m) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter {} has shape {:?}, moments {:?}",
                    p.name,
                    p.value.shape(),
                    m.shape()
                )));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data();
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.lift();
                let mn = beta1 * mi.lift() + (1.0 - beta1) * g;
                let vn = beta2 * vi.lift() + (1.0 - beta2) * g * g;
                *mi = T::lower(mn);
                *vi = T::lower(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = T::lower(w.lift() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::filled;

    fn store(values: &[(&[usize], f64, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, (shape, v, g)) in values.iter().enumerate() {
            let id = s.add(format!("p{i}"), filled(shape, *v), true);
            s.get_mut(id).grad.fill(*g);
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[(&[3], 0.7, 0.0)]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(adam.t, 1);
        assert!(s.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.7)));
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = store(&[(&[2], 1.0, 0.3), (&[2], 1.0, -300.0), (&[1], 0.0, 300.0)]);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&s, cfg);
        adam.step(&mut s).unwrap();
        let vals: Vec<Vec<f64>> = s.iter().map(|(_, p)| p.value.to_f64()).collect();
        assert!(vals[0].iter().all(|v| (v - (1.0 - cfg.lr)).abs() < 1e-6));
        assert!(vals[1].iter().all(|v| (v - (1.0 + cfg.lr)).abs() < 1e-6));
        // g and 1000 g give matching step sizes.
        assert!(((1.0 - vals[0][0]) - (0.0 - vals[2][0])).abs() < 1e-9);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("running", filled(&[2], 5.0), false);
        s.get_mut(id).grad.fill(1.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(id).to_f64(), vec![5.0, 5.0]);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let mut a = store(&[(&[2], 0.0, 1.0)]);
        let mut adam = AdamState::new(&a, AdamConfig::default());
        let mut b = store(&[(&[3], 0.0, 1.0)]);
        assert!(matches!(adam.step(&mut b), Err(NnError::ShapeMismatch(_))));
        let mut c = store(&[(&[2], 0.0, 1.0), (&[1], 0.0, 1.0)]);
        assert!(matches!(adam.step(&mut c), Err(NnError::ShapeMismatch(_))));
        assert_eq!(adam.t, 0);
        adam.step(&mut a).unwrap();
    }
}
