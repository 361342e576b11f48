//! Shared optimisation loop: Adam, EMA with warm-up, smoothed loss curve and
//! periodic checkpoint callbacks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig, Ema};
use super::tensor::ParamSet;
use crate::error::{Error, Result};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    /// Checkpoint callback period in steps; 0 disables it.
    pub checkpoint_every: usize,
    /// Smoothing factor of the `ema_loss` column.
    pub loss_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 16,
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            checkpoint_every: 0,
            loss_smoothing: 0.98,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
}

pub type Gradients = BTreeMap<String, Vec<f32>>;

/// Decay used at a given update: ramps up from 0.1 so the average is not
/// anchored to the initial weights.
pub fn ema_decay_at(decay: f64, step: usize) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// Runs `tc.steps` updates. `loss_fn(params, step, rs)` returns the batch loss
/// and gradients for the parameters being optimised; `rs` is a fresh per-step
/// stream derived from `rs_root`.
pub fn fit(
    params: &mut ParamSet<f32>,
    ema: &mut Ema<f32>,
    tc: &TrainConfig,
    rs_root: &RandomStream,
    mut loss_fn: impl FnMut(&ParamSet<f32>, usize, &mut RandomStream) -> Result<(f64, Gradients)>,
    mut on_checkpoint: impl FnMut(usize, &ParamSet<f32>, &Ema<f32>) -> Result<()>,
) -> Result<Vec<CurvePoint>> {
    let mut opt = Adam::new(tc.adam);
    let mut curve = Vec::with_capacity(tc.steps);
    let mut smooth = f64::NAN;
    for step in 0..tc.steps {
        let mut rs = rs_root.child_idx("step", step as u64);
        let (loss, grads) = loss_fn(params, step, &mut rs)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step} ({loss})")));
        }
        opt.update(params, &grads);
        params.ensure_finite()?;
        ema.decay = ema_decay_at(tc.ema_decay, step);
        ema.update(params);
        smooth = if smooth.is_nan() {
            loss
        } else {
            tc.loss_smoothing * smooth + (1.0 - tc.loss_smoothing) * loss
        };
        curve.push(CurvePoint {
            step: step + 1,
            loss,
            ema_loss: smooth,
        });
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
            on_checkpoint(step + 1, params, ema)?;
        }
    }
    ema.decay = tc.ema_decay;
    Ok(curve)
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("step,loss,ema_loss\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.step, p.loss, p.ema_loss));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn quad(ps: &ParamSet<f32>) -> (f64, Gradients) {
        let x = &ps.expect("x").data;
        let l = x.iter().map(|&v| (v as f64 - 1.0).powi(2)).sum();
        (l, [("x".to_string(), x.iter().map(|&v| 2.0 * (v - 1.0)).collect())].into())
    }

    #[test]
    fn zero_steps_is_noop() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor { shape: vec![2], data: vec![0.5f32, -0.5] });
        let before = ps.clone();
        let mut ema = Ema::new(&ps, 0.999);
        let tc = TrainConfig { steps: 0, ..Default::default() };
        let curve = fit(&mut ps, &mut ema, &tc, &RandomStream::new(0), |p, _, _| Ok(quad(p)), |_, _, _| Ok(())).unwrap();
        assert!(curve.is_empty());
        assert_eq!(ps.content_hash(), before.content_hash());
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor { shape: vec![1], data: vec![0.0f32] });
        let mut ema = Ema::new(&ps, 0.999);
        let tc = TrainConfig { steps: 5, ..Default::default() };
        let r = fit(&mut ps, &mut ema, &tc, &RandomStream::new(0), |_, s, _| {
            Ok((if s == 2 { f64::NAN } else { 1.0 }, [("x".to_string(), vec![0.1])].into()))
        }, |_, _, _| Ok(()));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoints_fire_on_period_and_ema_stays_in_hull() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor { shape: vec![3], data: vec![3.0f32, -2.0, 0.0] });
        let mut ema = Ema::new(&ps, 0.999);
        let tc = TrainConfig {
            steps: 30,
            checkpoint_every: 10,
            adam: AdamConfig { lr: 0.1, ..Default::default() },
            ..Default::default()
        };
        let mut lo = ps.expect("x").data.clone();
        let mut hi = lo.clone();
        let mut fired = vec![];
        let curve = fit(
            &mut ps,
            &mut ema,
            &tc,
            &RandomStream::new(0),
            |p, _, _| {
                for (i, &v) in p.expect("x").data.iter().enumerate() {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
                Ok(quad(p))
            },
            |s, _, _| {
                fired.push(s);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(fired, vec![10, 20, 30]);
        assert_eq!(curve.len(), 30);
        assert!(curve.last().unwrap().loss < curve[0].loss);
        let x = &ps.expect("x").data;
        for (i, &e) in ema.params.expect("x").data.iter().enumerate() {
            let (l, h) = (lo[i].min(x[i]), hi[i].max(x[i]));
            assert!(e >= l - 1e-6 && e <= h + 1e-6);
        }
    }

    #[test]
    fn warmup_decay_reaches_target() {
        assert!((ema_decay_at(0.999, 0) - 0.1).abs() < 1e-12);
        assert_eq!(ema_decay_at(0.999, 1_000_000), 0.999);
    }
}
