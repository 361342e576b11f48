//! Distribution metrics (Fréchet distance, FSD, toy FID), instance metrics
//! (Dice, AJI) and controllability statistics.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::conditioning::Bucket;
use crate::dataset::nucleus_proportion;
use crate::error::{ensure, Result};
use crate::field::Field;
use crate::grid::{connected_components, InstanceGrid, LabelGrid};
use crate::nn::{kaiming_uniform, Graph, ParamSet, Tensor};
use crate::rng::RandomStream;

/// Ridge added to fitted covariances.
pub const RIDGE: f64 = 1e-6;
/// Violation mass tolerated by [`class_consistency`].
pub const VIOLATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance plus `ridge·I`.
    pub fn fit(samples: &[Vec<f64>], ridge: f64) -> Result<Self> {
        ensure!(samples.len() >= 2, Invalid, "need at least 2 samples, got {}", samples.len());
        let d = samples[0].len();
        ensure!(samples.iter().all(|s| s.len() == d), Shape, "ragged feature vectors");
        ensure!(
            samples.iter().flatten().all(|v| v.is_finite()),
            NonFinite,
            "feature vector"
        );
        // Fixed accumulation order makes the summary exactly order-invariant.
        let mut sorted: Vec<&Vec<f64>> = samples.iter().collect();
        sorted.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let samples = sorted;
        let n = samples.len();
        let mut mean = DVector::zeros(d);
        for s in &samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in &samples {
            let x = DVector::from_column_slice(s) - &mean;
            cov += &x * x.transpose();
        }
        cov /= (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        Ok(GaussianSummary { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    ensure!(a.dim() == b.dim(), Shape, "dimension {} vs {}", a.dim(), b.dim());
    for s in [a, b] {
        ensure!(
            s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite()),
            NonFinite,
            "Gaussian summary"
        );
    }
    let s1 = psd_sqrt(&a.cov);
    let m = &s1 * &b.cov * &s1;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// FSD descriptor: per-class pixel fractions (classes 1..K) and the number of
/// same-class connected regions divided by 100.
pub fn label_descriptor(label: &LabelGrid, k: usize) -> Vec<f64> {
    let n = label.data().len() as f64;
    let mut d = vec![0.0; k];
    for &l in label.data() {
        if l > 0 && (l as usize) < k {
            d[l as usize - 1] += 1.0 / n;
        }
    }
    let (_, count) = connected_components(label, |v| v > 0, |a, b| a == b);
    d[k - 1] = count as f64 / 100.0;
    d
}

pub fn fsd(a: &[LabelGrid], b: &[LabelGrid], k: usize) -> Result<f64> {
    let need = k + 2;
    ensure!(
        a.len() >= need && b.len() >= need,
        Invalid,
        "FSD needs at least {need} labels per side, got {} and {}",
        a.len(),
        b.len()
    );
    let fa: Vec<Vec<f64>> = a.iter().map(|l| label_descriptor(l, k)).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(|l| label_descriptor(l, k)).collect();
    frechet_distance(&GaussianSummary::fit(&fa, RIDGE)?, &GaussianSummary::fit(&fb, RIDGE)?)
}

/// Fixed random convolutional feature extractor for [`toy_fid`].
pub struct ToyFeatures {
    params: ParamSet<f32>,
}

pub const TOY_FEATURE_DIM: usize = 64;
const TOY_FEATURE_SEED: u64 = 0x7F1D_2024;

impl Default for ToyFeatures {
    fn default() -> Self {
        let mut rs = RandomStream::new(TOY_FEATURE_SEED);
        let mut params = ParamSet::new();
        for (i, (cin, cout)) in [(3, 16), (16, 32), (32, TOY_FEATURE_DIM)].into_iter().enumerate() {
            params.insert(format!("c{i}.w"), kaiming_uniform(&[cout, cin, 3, 3], cin * 9, &mut rs));
            params.insert(format!("c{i}.b"), kaiming_uniform(&[cout], cin * 9, &mut rs));
        }
        ToyFeatures { params }
    }
}

impl ToyFeatures {
    /// Pooled features of `[H, W, 3]` images.
    pub fn features(&self, images: &[Field]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let s = chunk[0].shape().to_vec();
            ensure!(s.len() == 3 && s[2] == 3, Shape, "images must be [H, W, 3], got {:?}", s);
            let (h, w) = (s[0], s[1]);
            let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
            for img in chunk {
                ensure!(img.shape() == s.as_slice(), Shape, "mixed image sizes");
                for c in 0..3 {
                    data.extend(img.rows().map(|px| px[c] * 2.0 - 1.0));
                }
            }
            let mut g = Graph::<f32>::inference();
            g.bind(&self.params, "", false);
            let mut x = g.constant(Tensor {
                shape: vec![chunk.len(), 3, h, w],
                data,
            });
            for i in 0..3 {
                let (wt, b) = (g.p(&format!("c{i}.w")), g.p(&format!("c{i}.b")));
                x = g.conv2d(x, wt, Some(b), 2, 1);
                x = g.silu(x);
            }
            let sh = g.shape(x).to_vec();
            let hw = sh[2] * sh[3];
            let v = g.value(x);
            for n in 0..sh[0] {
                out.push(
                    (0..sh[1])
                        .map(|c| {
                            let o = (n * sh[1] + c) * hw;
                            v[o..o + hw].iter().map(|&z| z as f64).sum::<f64>() / hw as f64
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

pub fn toy_fid(a: &[Field], b: &[Field]) -> Result<f64> {
    let need = TOY_FEATURE_DIM + 2;
    ensure!(
        a.len() >= need && b.len() >= need,
        Invalid,
        "toy FID needs at least {need} images per side, got {} and {}",
        a.len(),
        b.len()
    );
    let fx = ToyFeatures::default();
    let sa = GaussianSummary::fit(&fx.features(a)?, RIDGE)?;
    let sb = GaussianSummary::fit(&fx.features(b)?, RIDGE)?;
    frechet_distance(&sa, &sb)
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    ensure!(a.len() == b.len(), Shape, "mask sizes {} vs {}", a.len(), b.len());
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

pub fn foreground<T: Copy + Default + PartialEq>(g: &crate::grid::Grid<T>) -> Vec<bool> {
    g.data().iter().map(|&v| v != T::default()).collect()
}

/// Aggregated Jaccard index with greedy one-to-one matching.
pub fn aji(gt: &InstanceGrid, pred: &InstanceGrid) -> Result<f64> {
    ensure!(gt.same_dims(pred), Shape, "grid sizes differ");
    let ng = gt.data().iter().copied().max().unwrap_or(0) as usize;
    let np = pred.data().iter().copied().max().unwrap_or(0) as usize;
    let mut area_g = vec![0usize; ng + 1];
    let mut area_p = vec![0usize; np + 1];
    let mut inter = vec![vec![0usize; np + 1]; ng + 1];
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        area_g[g as usize] += 1;
        area_p[p as usize] += 1;
        inter[g as usize][p as usize] += 1;
    }
    let gts: Vec<usize> = (1..=ng).filter(|&i| area_g[i] > 0).collect();
    let preds: Vec<usize> = (1..=np).filter(|&i| area_p[i] > 0).collect();
    if gts.is_empty() && preds.is_empty() {
        return Ok(1.0);
    }
    if gts.is_empty() || preds.is_empty() {
        return Ok(0.0);
    }
    let mut used = vec![false; np + 1];
    let (mut c, mut u) = (0usize, 0usize);
    for &g in &gts {
        let mut best: Option<(f64, usize)> = None;
        for &p in &preds {
            if used[p] || inter[g][p] == 0 {
                continue;
            }
            let iou = inter[g][p] as f64 / (area_g[g] + area_p[p] - inter[g][p]) as f64;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, p));
            }
        }
        match best {
            Some((_, p)) => {
                used[p] = true;
                c += inter[g][p];
                u += area_g[g] + area_p[p] - inter[g][p];
            }
            None => u += area_g[g],
        }
    }
    u += preds.iter().filter(|&&p| !used[p]).map(|&p| area_p[p]).sum::<usize>();
    Ok(c as f64 / u as f64)
}

/// Fraction of labels whose out-of-set nucleus mass is at most `tolerance`.
pub fn class_consistency(labels: &[LabelGrid], allowed: &BTreeSet<u8>, tolerance: f64) -> Result<f64> {
    ensure!(!allowed.is_empty(), Invalid, "class set must be non-empty");
    ensure!(!labels.is_empty(), Invalid, "no labels");
    let ok = labels
        .iter()
        .filter(|l| {
            let nuc = l.count_nonzero();
            let bad = l.data().iter().filter(|&&v| v > 0 && !allowed.contains(&v)).count();
            bad as f64 / nuc.max(1) as f64 <= tolerance
        })
        .count();
    Ok(ok as f64 / labels.len() as f64)
}

/// Fraction of labels whose measured proportion falls in the requested bucket.
pub fn proportion_accuracy(labels: &[LabelGrid], buckets: &[Bucket]) -> Result<f64> {
    ensure!(labels.len() == buckets.len(), Shape, "{} labels vs {} buckets", labels.len(), buckets.len());
    ensure!(!labels.is_empty(), Invalid, "no labels");
    let hits = labels
        .iter()
        .zip(buckets)
        .filter(|(l, b)| Bucket::of(nucleus_proportion(l) as f64) == **b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Normalized bucket histogram of measured proportions.
pub fn bucket_histogram(labels: &[LabelGrid]) -> [f64; 5] {
    let mut h = [0.0; 5];
    for l in labels {
        h[Bucket::of(nucleus_proportion(l) as f64).index()] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    h.map(|v| v / n)
}

/// `KL(p ‖ q)` with both sides floored at `floor` and renormalized.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    ensure!(p.len() == q.len() && !p.is_empty(), Shape, "histogram sizes {} vs {}", p.len(), q.len());
    let fix = |v: &[f64]| {
        let f: Vec<f64> = v.iter().map(|&x| x.max(floor)).collect();
        let s: f64 = f.iter().sum();
        f.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p, q) = (fix(p), fix(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum())
}

/// Summary written by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fsd: Option<f64>,
    pub toy_fid: Option<f64>,
    pub class_consistency: Option<f64>,
    pub proportion_accuracy: Option<f64>,
    pub watershed_aji: Option<f64>,
    pub watershed_dice: Option<f64>,
    pub real_count: usize,
    pub synth_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mean: &[f64], cov: &[f64]) -> GaussianSummary {
        let d = mean.len();
        GaussianSummary {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
            count: 10,
        }
    }

    #[test]
    fn frechet_hand_cases() {
        let a = summary(&[0.0], &[1.0]);
        let b = summary(&[1.0], &[1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-10);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        // 1-D: (μ₁−μ₂)² + (σ₁−σ₂)².
        let c = summary(&[2.0], &[4.0]);
        assert!((frechet_distance(&a, &c).unwrap() - 5.0).abs() < 1e-10);
        assert!(frechet_distance(&a, &summary(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn dice_cases() {
        let a = [true, true, true, true, false, false];
        let b = [false, false, true, true, true, true];
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
    }

    #[test]
    fn aji_cases() {
        let g = InstanceGrid::from_vec(2, 2, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(aji(&g, &g).unwrap(), 1.0);
        let empty = InstanceGrid::new(2, 2);
        assert_eq!(aji(&g, &empty).unwrap(), 0.0);
        assert_eq!(aji(&empty, &g).unwrap(), 0.0);
        assert_eq!(aji(&empty, &empty).unwrap(), 1.0);
        // Merged prediction: gt1 matches (C=2, U=3), gt2 unmatched (U+=1).
        let merged = InstanceGrid::from_vec(2, 2, vec![1, 1, 0, 1]).unwrap();
        assert!((aji(&g, &merged).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn consistency_and_accuracy_fixtures() {
        let only = |v: u8| LabelGrid::from_vec(2, 5, vec![v, v, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let allowed: BTreeSet<u8> = [1, 2].into();
        assert_eq!(class_consistency(&[only(1), only(2)], &allowed, 0.02).unwrap(), 1.0);
        assert_eq!(class_consistency(&[only(3)], &allowed, 0.02).unwrap(), 0.0);
        let mixed = LabelGrid::from_vec(1, 4, vec![1, 3, 1, 1]).unwrap();
        let set = [only(1), only(3), mixed, only(0)];
        assert_eq!(class_consistency(&set, &allowed, 0.02).unwrap(), 0.5);
        assert_eq!(class_consistency(&set, &allowed, 0.3).unwrap(), 0.75);
        // only(v) has proportion 0.2 → medium.
        let labels = [only(1), only(2), only(0)];
        assert_eq!(
            proportion_accuracy(&labels, &[Bucket::Medium, Bucket::Medium, Bucket::VeryLow]).unwrap(),
            1.0
        );
        assert_eq!(
            proportion_accuracy(&labels, &[Bucket::High, Bucket::Low, Bucket::Low]).unwrap(),
            0.0
        );
        assert!(
            (proportion_accuracy(&labels, &[Bucket::Medium, Bucket::Low, Bucket::Low]).unwrap() - 1.0 / 3.0).abs()
                < 1e-12
        );
    }

    #[test]
    fn kl_basics() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5], 1e-6).unwrap(), 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 1e-6).unwrap() > 0.6);
    }
}
