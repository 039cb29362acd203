//! Adam with global-norm gradient clipping.

use ndarray::{Array2, Zip};

use super::tape::{Grads, ParamSet};

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to this global norm when they exceed it.
    pub clip_norm: Option<f64>,
    steps: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter that has a gradient and returns the global
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Grads) -> f64 {
        assert_eq!(grads.len(), params.len());
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let norm = global_norm(&grads);
        if let Some(limit) = self.clip_norm {
            if norm > limit {
                let scale = limit / norm;
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            Zip::from(params.value_mut(i)).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        norm
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        ps.push("x", array![[1.0, -2.0]]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut ps, vec![Some(array![[0.5, -3.0]])]);
        // bias-corrected first step is lr * sign(g)
        let x = ps.value(0);
        assert!((x[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((x[[0, 1]] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut ps = ParamSet::new();
        ps.push("x", array![[0.0]]);
        let mut opt = Adam::new(0.1);
        let norm = opt.step(&mut ps, vec![Some(array![[30.0]])]);
        assert_eq!(norm, 30.0);
        assert_eq!(global_norm(&vec![Some(array![[3.0, 4.0]])]), 5.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("x", array![[3.0, -1.0]]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = ps.value(0).mapv(|x| 2.0 * x);
            opt.step(&mut ps, vec![Some(g)]);
        }
        assert!(ps.value(0).iter().all(|x| x.abs() < 1e-3));
    }
}
