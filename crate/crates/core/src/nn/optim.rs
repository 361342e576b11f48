use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

/// Adam with bias correction; moments are kept only for the parameters it is
/// handed gradients for.
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Vec<T>>) {
        self.step += 1;
        let c = self.cfg;
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                let gi = g[i].as_f64() * clip;
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let upd = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p.data[i] = T::from_f64(p.data[i].as_f64() - upd);
            }
        }
    }
}

/// Exponential moving average of parameters.
pub struct Ema<T> {
    pub decay: f64,
    pub params: ParamSet<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(params: &ParamSet<T>, decay: f64) -> Self {
        Ema {
            decay,
            params: params.clone(),
        }
    }

    pub fn update(&mut self, current: &ParamSet<T>) {
        let d = self.decay;
        for (name, e) in self.params.iter_mut() {
            let p = current.expect(name);
            for (ev, &pv) in e.data.iter_mut().zip(&p.data) {
                *ev = T::from_f64(d * ev.as_f64() + (1.0 - d) * pv.as_f64());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("x", Tensor { shape: vec![2], data: vec![3.0, -2.0] });
        let mut opt = Adam::new(AdamConfig { lr: 0.05, clip: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let x = &ps.expect("x").data;
            let g: BTreeMap<_, _> = [("x".to_string(), vec![2.0 * x[0], 2.0 * (x[1] - 1.0)])].into();
            opt.update(&mut ps, &g);
        }
        let x = &ps.expect("x").data;
        assert!(x[0].abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn ema_is_convex_combination() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor { shape: vec![1], data: vec![0.0] });
        let mut ema = Ema::new(&ps, 0.9);
        let mut lo: f64 = 0.0;
        let mut hi: f64 = 0.0;
        for i in 0..50 {
            let v = ((i * 37) % 11) as f64 - 5.0;
            ps.get_mut("w").unwrap().data[0] = v;
            lo = lo.min(v);
            hi = hi.max(v);
            ema.update(&ps);
            let e = ema.params.expect("w").data[0];
            assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
        }
    }
}
