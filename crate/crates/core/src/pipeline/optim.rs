use ndarray::{Array2, Zip};

use crate::params::ParamStore;
use crate::real::Real;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Array2<F>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (ib1, ib2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(self.eps);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { F::lit(1.0 - lr * self.weight_decay) } else { F::one() };
            Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + ib1 * g;
                    *v = b2 * *v + ib2 * g * g;
                    *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Array2::from_elem((1, 2), 1.0), false);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.0, 0.0);
        let g = Array2::from_shape_vec((1, 2), vec![0.3, -2.0]).unwrap();
        opt.step(&mut store, &[g], 0.1);
        let w = store.by_name("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-12);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn decay_applies_only_to_flagged_params() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Array2::from_elem((1, 1), 2.0), true);
        store.add("b", Array2::from_elem((1, 1), 2.0), false);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.5);
        let zero = Array2::zeros((1, 1));
        opt.step(&mut store, &[zero.clone(), zero], 0.1);
        assert!((store.by_name("w").unwrap()[[0, 0]] - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(store.by_name("b").unwrap()[[0, 0]], 2.0);
    }
}
