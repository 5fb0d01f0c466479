use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let shapes = || params.tensors().iter().map(|t| vec![0.0; t.data.len()]);
        Self {
            cfg,
            step: 0,
            m: shapes().collect(),
            v: shapes().collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (ti, t) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads.data[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..t.data.len() {
                let gi = g[i].to_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut p = t.data[i].to_f64();
                p -= c.lr * c.weight_decay * p;
                p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                t.data[i] = T::from_f64(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("x", vec![2], vec![3.0, -2.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let mut g = p.zero_grads();
            for (gi, &xi) in g.get_mut(id).iter_mut().zip(p.get(id)) {
                *gi = 2.0 * xi;
            }
            opt.step(&mut p, &g);
        }
        assert!(p.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = ParamStore::<f64>::new();
        p.add("x", vec![1], vec![1.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.5,
                ..Default::default()
            },
            &p,
        );
        let g = p.zero_grads();
        opt.step(&mut p, &g);
        assert!((p.tensors()[0].data[0] - 0.95).abs() < 1e-12);
    }
}
