//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`:
    /// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pi);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn store(v: f64) -> ParamStore {
        [("w".to_string(), Tensor::new(&[1], vec![v]).unwrap())]
            .into_iter()
            .collect()
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::new(&[1], vec![g]).unwrap())]
            .into_iter()
            .collect()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias correction makes m̂/√v̂ = sign(g) on the first step.
        let mut s = store(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        opt.step(&mut s, &grad(0.37)).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 * 0.37 / (0.37 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = store(2.0);
        let mut opt = AdamW::new(cfg(0.01));
        opt.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 2.0 - 0.1 * 0.01 * 2.0);
    }

    #[test]
    fn two_step_oracle() {
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.1, 1e-8);
        let gs = [0.5, -0.25];
        let (mut p, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for (k, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (k + 1) as i32;
            p -= lr * ((m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps));
        }
        let mut s = store(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        for g in gs {
            opt.step(&mut s, &grad(g)).unwrap();
        }
        assert!((s.get("w").unwrap().data()[0] - p).abs() < 1e-14);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut s = store(3.0);
        let mut opt = AdamW::new(cfg(0.0));
        for _ in 0..500 {
            let w = s.get("w").unwrap().data()[0];
            opt.step(&mut s, &grad(2.0 * (w - 1.0))).unwrap();
        }
        assert!((s.get("w").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_unknown_and_misshapen() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        let bad: BTreeMap<_, _> = [("x".to_string(), Tensor::zeros(&[1]))].into_iter().collect();
        assert!(matches!(opt.step(&mut s, &bad), Err(Error::Config(_))));
        let bad: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(matches!(opt.step(&mut s, &bad), Err(Error::Dimension(_))));
    }
}
