//! Adaptive moment optimizer (Adam) over a [`ParamSet`].

use crate::params::{GradBuffer, ParamSet};
use crate::real::Real;

/// Hyperparameters; defaults are the standard ones.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state: first/second moment per parameter scalar, bias-corrected.
pub struct Adam<R: Real> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<R>) -> Self {
        let m = params.iter().map(|(_, p)| vec![R::ZERO; p.value.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![R::ZERO; p.value.len()]).collect();
        Self { cfg, t: 0, m, v }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update from accumulated gradients (caller scales them).
    pub fn step(&mut self, params: &mut ParamSet<R>, grads: &GradBuffer<R>) {
        self.t += 1;
        let b1 = R::from_f64(self.cfg.beta1);
        let b2 = R::from_f64(self.cfg.beta2);
        let one_m_b1 = R::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = R::from_f64(1.0 - self.cfg.beta2);
        let eps = R::from_f64(self.cfg.eps);
        // Bias-corrected step size folded into the learning rate.
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let alpha = R::from_f64(self.cfg.lr * bc2.sqrt() / bc1);

        for (pid, g) in grads.iter() {
            let m = &mut self.m[pid.index()];
            let v = &mut self.v[pid.index()];
            let p = params.get_mut(pid).data_mut();
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                p[i] -= alpha * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Binding, Graph};
    use crate::tensor::Tensor;

    /// Minimising |x - c|^2 with Adam lands within 1e-6 of c.
    #[test]
    fn adam_converges_on_quadratic() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let x = ps.add("x", Tensor::from_vec(vec![5.0, -3.0]));
        let target = [1.0, 2.0];
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &ps);
        let mut grads = GradBuffer::zeros_like(&ps);
        for _ in 0..2000 {
            let mut g: Graph<f64> = Graph::new();
            let mut bind = Binding::new(&ps);
            let xn = bind.node(&mut g, &ps, x);
            let c = g.input(Tensor::from_vec(target.to_vec()));
            let d = g.sub(xn, c);
            let dd = g.mul(d, d);
            let loss = g.sum(dd);
            g.backward(loss).unwrap();
            grads.zero();
            bind.accumulate_grads(&g, &mut grads);
            adam.step(&mut ps, &grads);
            if g.value(loss).item() < 1e-14 {
                break;
            }
        }
        let xv = ps.get(x).data();
        assert!((xv[0] - target[0]).abs() < 1e-6, "x0 = {}", xv[0]);
        assert!((xv[1] - target[1]).abs() < 1e-6, "x1 = {}", xv[1]);
    }
}
