//! Adam with bias correction, and global-norm gradient clipping.

use std::collections::BTreeMap;

use finenet_core::error::{Error, Result};
use finenet_core::nn::ParamStore;
use finenet_core::Tensor;

/// First and second moment estimates per parameter and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, state: AdamState::default() }
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name).ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient for {name} has shape {}, parameter {}", g.shape(), p.shape())));
            }
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over all gradients together.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm` and returns
/// the norm before clipping. `max_norm = 0` leaves them untouched.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use finenet_core::nn::Init;
    use finenet_core::Shape;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut store = ParamStore::new(0);
        store.register("w", Shape::new(1, 1, 1, 2), 1, Init::Constant(1.0));
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.5, -2.0]).unwrap())]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut store, &grads, 0.1).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = BTreeMap::from([
            ("a".to_string(), Tensor::full(Shape::new(1, 1, 1, 4), 3.0)),
            ("b".to_string(), Tensor::full(Shape::new(1, 1, 1, 1), 4.0)),
        ]);
        let before = clip_global_norm(&mut grads, 2.0);
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        assert!((global_norm(&grads) - 2.0).abs() < 1e-12);
        let kept = clip_global_norm(&mut grads, 10.0);
        assert!((kept - 2.0).abs() < 1e-12);
    }
}
