//! Procedural pathology-like tiles: tinted low-frequency background with
//! filled elliptical nuclei whose size, shape and colour depend on the class.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::{render_prompt, Bucket, Prompt};
use crate::dataset::{nucleus_proportion, write_dataset, LabeledSample, SampleMeta, Vocabulary};
use crate::error::{ensure, Result};
use crate::field::Field;
use crate::grid::{connected_components, Grid, InstanceGrid, LabelGrid};
use crate::rng::RandomStream;

/// Largest accepted target proportion.
pub const MAX_PROPORTION: f64 = 0.6;
/// Allowed gap between target and achieved proportion before flagging.
pub const PROPORTION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub tissue: usize,
    pub staining: usize,
    pub target_proportion: f64,
    pub classes: BTreeSet<u8>,
    pub cluster_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            h: 32,
            w: 32,
            k: 4,
            tissue: 0,
            staining: 0,
            target_proportion: 0.2,
            classes: [1, 2, 3].into(),
            cluster_prob: 0.3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        ensure!(self.k >= 2, Invalid, "K must be at least 2");
        ensure!(self.k == vocab.k(), Invalid, "K={} but vocabulary has {} classes", self.k, vocab.k());
        ensure!(self.h >= 4 && self.w >= 4, Invalid, "tile {}x{} too small", self.h, self.w);
        ensure!(self.tissue < vocab.tissues.len(), Invalid, "tissue index {}", self.tissue);
        ensure!(self.staining < vocab.stainings.len(), Invalid, "staining index {}", self.staining);
        ensure!(
            (0.0..=MAX_PROPORTION).contains(&self.target_proportion),
            Invalid,
            "target proportion {} outside [0, {MAX_PROPORTION}]",
            self.target_proportion
        );
        ensure!((0.0..=1.0).contains(&self.cluster_prob), Invalid, "cluster probability outside [0, 1]");
        for &c in &self.classes {
            ensure!(c >= 1 && (c as usize) < self.k, Invalid, "class {c} outside 1..{}", self.k);
        }
        Ok(())
    }
}

/// Size and shape prior of one nucleus class: semi-axis ranges in pixels.
#[derive(Debug, Clone, Copy)]
struct ShapePrior {
    major: (f64, f64),
    minor: (f64, f64),
}

fn shape_prior(class: u8) -> ShapePrior {
    match (class - 1) % 3 {
        0 => ShapePrior {
            major: (2.0, 2.6),
            minor: (1.9, 2.5),
        },
        1 => ShapePrior {
            major: (4.0, 5.2),
            minor: (2.0, 2.6),
        },
        _ => ShapePrior {
            major: (3.0, 3.6),
            minor: (2.6, 3.2),
        },
    }
}

/// Mean background colour per staining.
fn background_rgb(staining: usize) -> [f64; 3] {
    if staining % 2 == 0 {
        [0.92, 0.76, 0.84]
    } else {
        [0.88, 0.86, 0.80]
    }
}

/// Nucleus colour per class and staining.
pub fn class_rgb(class: u8, staining: usize) -> [f64; 3] {
    let he = [[0.30, 0.16, 0.50], [0.52, 0.28, 0.62], [0.22, 0.30, 0.46]];
    let ihc = [[0.48, 0.30, 0.18], [0.30, 0.36, 0.62], [0.60, 0.46, 0.30]];
    let base = if staining % 2 == 0 { he } else { ihc };
    let i = (class as usize - 1) % 3;
    let shift = ((class as usize - 1) / 3) as f64 * 0.07;
    [base[i][0] + shift, base[i][1], (base[i][2] - shift).max(0.0)]
}

/// Heuristic nucleus-colour detector: nuclei are far darker than any background.
pub fn is_nucleus_colored(rgb: [f32; 3]) -> bool {
    (rgb[0] + rgb[1] + rgb[2]) / 3.0 < 0.6
}

fn background(cfg: &GenConfig, rs: &mut RandomStream) -> Vec<[f64; 3]> {
    let base = background_rgb(cfg.staining);
    let (h, w) = (cfg.h, cfg.w);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let ang = rs.uniform_range(0.0, std::f64::consts::PI);
            let freq = rs.uniform_range(0.08, 0.25);
            let phase = rs.uniform_range(0.0, std::f64::consts::TAU);
            let tint = [rs.uniform_range(0.5, 1.0), rs.uniform_range(0.5, 1.0), rs.uniform_range(0.5, 1.0)];
            (ang, freq, phase, tint)
        })
        .collect();
    let stromal_angle = rs.uniform_range(0.0, std::f64::consts::PI);
    let gland = (rs.uniform_range(0.0, h as f64), rs.uniform_range(0.0, w as f64), rs.uniform_range(5.0, 10.0));
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64, c as f64);
            let mut px = base;
            for &(ang, freq, phase, tint) in &waves {
                let v = 0.025 * ((x * ang.cos() + y * ang.sin()) * freq + phase).sin();
                for ch in 0..3 {
                    px[ch] += v * tint[ch];
                }
            }
            if cfg.tissue % 2 == 0 {
                // A pale gland lumen.
                let d = ((y - gland.0).powi(2) + (x - gland.1).powi(2)).sqrt();
                let lumen = (1.0 - (d / gland.2)).max(0.0) * 0.05;
                px.iter_mut().for_each(|v| *v += lumen);
            } else {
                // Fibre streaks.
                let s = 0.03 * ((x * stromal_angle.cos() + y * stromal_angle.sin()) * 0.9).sin();
                px[0] += s;
                px[2] += s;
            }
            for v in px.iter_mut() {
                *v += rs.uniform_range(-0.015, 0.015);
            }
            out.push(px);
        }
    }
    out
}

fn rasterize(h: usize, w: usize, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> Vec<usize> {
    let (ct, st) = (theta.cos(), theta.sin());
    let rmax = a.max(b).ceil() as isize + 1;
    let mut pix = Vec::new();
    for r in (cy.round() as isize - rmax)..=(cy.round() as isize + rmax) {
        for c in (cx.round() as isize - rmax)..=(cx.round() as isize + rmax) {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                continue;
            }
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let u = (dx * ct + dy * st) / a;
            let v = (-dx * st + dy * ct) / b;
            if u * u + v * v <= 1.0 {
                pix.push(r as usize * w + c as usize);
            }
        }
    }
    largest_component(h, w, pix)
}

/// Keeps the largest 4-connected part of a pixel set.
fn largest_component(h: usize, w: usize, pix: Vec<usize>) -> Vec<usize> {
    if pix.len() <= 1 {
        return pix;
    }
    let mut mask = Grid::<u8>::new(h, w);
    for &p in &pix {
        mask.data_mut()[p] = 1;
    }
    let (cc, n) = connected_components(&mask, |v| v > 0, |a, b| a == b);
    if n <= 1 {
        return pix;
    }
    let mut sizes = vec![0usize; n as usize + 1];
    for &p in &pix {
        sizes[cc.data()[p] as usize] += 1;
    }
    let best = (1..=n as usize).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap() as u32;
    pix.into_iter().filter(|&p| cc.data()[p] == best).collect()
}

struct Canvas {
    h: usize,
    w: usize,
    inst: Vec<u32>,
    count: usize,
}

impl Canvas {
    fn free(&self, pix: &[usize]) -> bool {
        pix.iter().all(|&p| self.inst[p] == 0)
    }

    fn neighbours(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = ((p / self.w) as isize, (p % self.w) as isize);
        (-1..=1isize).flat_map(move |dr| {
            (-1..=1isize).filter_map(move |dc| {
                let (rr, cc) = (r + dr, c + dc);
                (rr >= 0 && cc >= 0 && rr < self.h as isize && cc < self.w as isize && (dr, dc) != (0, 0))
                    .then(|| rr as usize * self.w + cc as usize)
            })
        })
    }

    /// No pixel of `pix` is in the 8-neighbourhood of an existing nucleus.
    fn isolated(&self, pix: &[usize]) -> bool {
        self.free(pix) && pix.iter().all(|&p| self.neighbours(p).all(|q| self.inst[q] == 0))
    }

    fn touches(&self, pix: &[usize], id: u32) -> bool {
        pix.iter().any(|&p| self.neighbours(p).any(|q| self.inst[q] == id))
    }
}

struct Nucleus {
    id: u32,
    cy: f64,
    cx: f64,
}

/// One tile. Never fails on an unreachable proportion; the shortfall is
/// recorded in the metadata instead.
pub fn generate_sample(cfg: &GenConfig, vocab: &Vocabulary, rs: &mut RandomStream) -> Result<LabeledSample> {
    cfg.validate(vocab)?;
    let (h, w) = (cfg.h, cfg.w);
    let mut canvas = Canvas {
        h,
        w,
        inst: vec![0; h * w],
        count: 0,
    };
    let mut labels = vec![0u8; h * w];
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut placed: Vec<Nucleus> = Vec::new();
    let classes: Vec<u8> = cfg.classes.iter().copied().collect();
    let target = (cfg.target_proportion * (h * w) as f64).round() as isize;
    let mut attempts = 0;
    while !classes.is_empty() && attempts < 600 {
        attempts += 1;
        let deficit = target - canvas.count as isize;
        if deficit <= 2 {
            break;
        }
        let class = classes[rs.int_inclusive(0, classes.len() - 1)];
        let prior = shape_prior(class);
        let a = rs.uniform_range(prior.major.0, prior.major.1);
        let b = rs.uniform_range(prior.minor.0, prior.minor.1);
        let theta = rs.uniform_range(0.0, std::f64::consts::PI);
        let cluster = !placed.is_empty() && rs.bernoulli(cfg.cluster_prob);
        let candidate = if cluster {
            let anchor = &placed[rs.int_inclusive(0, placed.len() - 1)];
            let dir = rs.uniform_range(0.0, std::f64::consts::TAU);
            let (uy, ux) = (dir.sin(), dir.cos());
            let mut found = None;
            let mut d = 0.5;
            while d < 14.0 {
                let (cy, cx) = (anchor.cy + uy * d, anchor.cx + ux * d);
                let pix = rasterize(h, w, cy, cx, a, b, theta);
                if pix.len() >= 3 && canvas.free(&pix) && canvas.touches(&pix, anchor.id) {
                    found = Some((pix, cy, cx));
                    break;
                }
                d += 0.5;
            }
            found
        } else {
            let cy = rs.uniform_range(0.0, h as f64 - 1.0);
            let cx = rs.uniform_range(0.0, w as f64 - 1.0);
            let pix = rasterize(h, w, cy, cx, a, b, theta);
            (pix.len() >= 3 && canvas.isolated(&pix)).then_some((pix, cy, cx))
        };
        let Some((pix, cy, cx)) = candidate else { continue };
        let after = deficit - pix.len() as isize;
        if after.abs() >= deficit.abs() {
            continue;
        }
        let id = placed.len() as u32 + 1;
        let mut col = class_rgb(class, cfg.staining);
        for v in col.iter_mut() {
            *v += rs.uniform_range(-0.03, 0.03);
        }
        for &p in &pix {
            canvas.inst[p] = id;
            labels[p] = class;
        }
        canvas.count += pix.len();
        colors.push(col);
        placed.push(Nucleus { id, cy, cx });
    }
    let mut pixels = background(cfg, rs);
    for (p, px) in pixels.iter_mut().enumerate() {
        let id = canvas.inst[p];
        if id > 0 {
            let col = colors[id as usize - 1];
            for ch in 0..3 {
                px[ch] = col[ch] + rs.uniform_range(-0.02, 0.02);
            }
        }
    }
    let image = Field::new(
        vec![h, w, 3],
        pixels.iter().flat_map(|p| p.iter().map(|&v| v.clamp(0.0, 1.0) as f32)).collect(),
    )?;
    let label = LabelGrid::from_vec(h, w, labels)?;
    let instance = InstanceGrid::from_vec(h, w, canvas.inst)?;
    let proportion = nucleus_proportion(&label);
    let present: BTreeSet<u8> = label.data().iter().copied().filter(|&v| v > 0).collect();
    let prompt = Prompt {
        tissue: cfg.tissue,
        bucket: Bucket::of(proportion as f64),
        classes: present.clone(),
        staining: Some(cfg.staining),
    };
    let meta = SampleMeta {
        tissue: vocab.tissues[cfg.tissue].clone(),
        staining: vocab.stainings[cfg.staining].clone(),
        proportion,
        classes: present.into_iter().collect(),
        prompt: render_prompt(&prompt, vocab)?,
        shortfall: (proportion as f64 - cfg.target_proportion).abs() > PROPORTION_TOLERANCE,
    };
    let s = LabeledSample {
        image,
        label,
        instance,
        meta,
    };
    s.validate(cfg.k)?;
    Ok(s)
}

/// Distribution over per-sample generator settings. Empty weight lists mean uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataMix {
    pub buckets: Vec<f64>,
    pub tissues: Vec<f64>,
    pub stainings: Vec<f64>,
    /// Candidate class sets; empty means every non-empty subset.
    pub class_sets: Vec<Vec<u8>>,
    pub cluster_prob: f64,
}

impl Default for DataMix {
    fn default() -> Self {
        DataMix {
            buckets: vec![],
            tissues: vec![],
            stainings: vec![],
            class_sets: vec![],
            cluster_prob: 0.3,
        }
    }
}

impl DataMix {
    pub fn bucket_weights(&self) -> Vec<f64> {
        normalized(&self.buckets, Bucket::ALL.len())
    }

    pub fn concentrated(bucket: Bucket) -> Self {
        let mut b = vec![0.0; 5];
        b[bucket.index()] = 1.0;
        DataMix {
            buckets: b,
            ..Default::default()
        }
    }

    fn class_set_choices(&self, k: usize) -> Vec<BTreeSet<u8>> {
        if self.class_sets.is_empty() {
            all_class_sets(k)
        } else {
            self.class_sets.iter().map(|s| s.iter().copied().collect()).collect()
        }
    }
}

/// Every non-empty subset of `1..K`, ordered by bitmask.
pub fn all_class_sets(k: usize) -> Vec<BTreeSet<u8>> {
    let n = k - 1;
    (1u32..(1 << n))
        .map(|m| (1..=n as u8).filter(|c| m & (1 << (c - 1)) != 0).collect())
        .collect()
}

fn normalized(w: &[f64], n: usize) -> Vec<f64> {
    if w.is_empty() {
        vec![1.0 / n as f64; n]
    } else {
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }
}

/// Target proportion drawn from the interior of a bucket so that the
/// achieved value lands inside it.
pub fn target_for_bucket(b: Bucket, rs: &mut RandomStream) -> f64 {
    let (lo, hi) = b.range();
    let hi = hi.min(0.5);
    let margin = 0.015;
    rs.uniform_range(lo + margin, hi - margin)
}

pub fn sample_config(template: &GenConfig, mix: &DataMix, vocab: &Vocabulary, rs: &mut RandomStream) -> Result<GenConfig> {
    let bw = mix.bucket_weights();
    let tw = normalized(&mix.tissues, vocab.tissues.len());
    let sw = normalized(&mix.stainings, vocab.stainings.len());
    ensure!(bw.len() == 5, Invalid, "bucket mix needs 5 weights");
    ensure!(tw.len() == vocab.tissues.len(), Invalid, "tissue mix length");
    ensure!(sw.len() == vocab.stainings.len(), Invalid, "staining mix length");
    let bucket = Bucket::ALL[rs.weighted_index(&bw)];
    let sets = mix.class_set_choices(template.k);
    ensure!(!sets.is_empty(), Invalid, "no class sets to choose from");
    Ok(GenConfig {
        tissue: rs.weighted_index(&tw),
        staining: rs.weighted_index(&sw),
        target_proportion: target_for_bucket(bucket, rs),
        classes: sets[rs.int_inclusive(0, sets.len() - 1)].clone(),
        cluster_prob: mix.cluster_prob,
        ..template.clone()
    })
}

/// `n` samples; sample `i` only depends on `rs.child_idx("sample", i)`.
pub fn generate_samples(
    template: &GenConfig,
    n: usize,
    mix: &DataMix,
    vocab: &Vocabulary,
    rs: &RandomStream,
) -> Result<Vec<LabeledSample>> {
    ensure!(n >= 1, Invalid, "need at least one sample");
    (0..n)
        .map(|i| {
            let mut s = rs.child_idx("sample", i as u64);
            let cfg = sample_config(template, mix, vocab, &mut s)?;
            generate_sample(&cfg, vocab, &mut s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub count: usize,
    /// Samples per proportion bucket, by achieved proportion.
    pub buckets: Vec<usize>,
    /// Samples containing each class (index 0 unused).
    pub classes: Vec<usize>,
    pub shortfalls: usize,
}

pub fn summarize(samples: &[LabeledSample], k: usize) -> DatasetSummary {
    let mut buckets = vec![0; 5];
    let mut classes = vec![0; k];
    for s in samples {
        buckets[Bucket::of(s.meta.proportion as f64).index()] += 1;
        for &c in &s.meta.classes {
            classes[c as usize] += 1;
        }
    }
    DatasetSummary {
        count: samples.len(),
        buckets,
        classes,
        shortfalls: samples.iter().filter(|s| s.meta.shortfall).count(),
    }
}

pub fn generate_dataset(
    template: &GenConfig,
    n: usize,
    mix: &DataMix,
    vocab: &Vocabulary,
    rs: &RandomStream,
    dir: &Path,
) -> Result<DatasetSummary> {
    let samples = generate_samples(template, n, mix, vocab, rs)?;
    write_dataset(&samples, vocab, dir)?;
    Ok(summarize(&samples, template.k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: f64, classes: &[u8], cluster: f64) -> GenConfig {
        GenConfig {
            target_proportion: p,
            classes: classes.iter().copied().collect(),
            cluster_prob: cluster,
            ..Default::default()
        }
    }

    #[test]
    fn zero_target_is_empty() {
        let v = Vocabulary::default();
        let s = generate_sample(&cfg(0.0, &[1, 2], 0.5), &v, &mut RandomStream::new(1)).unwrap();
        assert!(s.label.data().iter().all(|&l| l == 0));
        assert!(s.instance.data().iter().all(|&i| i == 0));
        assert_eq!(s.meta.proportion, 0.0);
        assert!(s.meta.prompt.contains("very low nuclei of types none"));
    }

    #[test]
    fn excluded_classes_never_appear() {
        let v = Vocabulary::default();
        for seed in 0..20 {
            let s = generate_sample(&cfg(0.3, &[1], 0.5), &v, &mut RandomStream::new(seed)).unwrap();
            assert!(s.label.data().iter().all(|&l| l <= 1));
            assert!(s.meta.proportion > 0.2);
        }
    }

    #[test]
    fn clustered_pairs_touch() {
        let v = Vocabulary::default();
        for seed in 0..10 {
            let s = generate_sample(&cfg(0.05, &[3], 1.0), &v, &mut RandomStream::new(seed)).unwrap();
            let (h, w) = s.instance.dims();
            let ids: BTreeSet<u32> = s.instance.data().iter().copied().filter(|&i| i > 0).collect();
            assert!(ids.len() >= 2, "seed {seed}: {} nuclei", ids.len());
            let mut touching = false;
            for r in 0..h {
                for c in 0..w {
                    let a = s.instance.get(r, c);
                    touching |= a > 0 && s.instance.neighbors8(r, c).any(|(rr, cc)| {
                        let b = s.instance.get(rr, cc);
                        b > 0 && b != a
                    });
                }
            }
            assert!(touching, "seed {seed}");
        }
    }

    #[test]
    fn colours_separate_from_background() {
        for st in 0..2 {
            let bg = background_rgb(st);
            for c in 1..=3u8 {
                let col = class_rgb(c, st);
                assert!((0..3).any(|i| (col[i] - bg[i]).abs() >= 0.1));
                let f = col.map(|v| v as f32);
                assert!(is_nucleus_colored(f));
            }
            assert!(!is_nucleus_colored(bg.map(|v| v as f32 - 0.08)));
        }
    }

    #[test]
    fn class_sets_enumerated() {
        let s = all_class_sets(4);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], [1].into());
        assert_eq!(s[6], [1, 2, 3].into());
    }

    #[test]
    fn invalid_configs_rejected() {
        let v = Vocabulary::default();
        assert!(generate_sample(&cfg(0.7, &[1], 0.0), &v, &mut RandomStream::new(0)).is_err());
        assert!(generate_sample(&cfg(0.1, &[4], 0.0), &v, &mut RandomStream::new(0)).is_err());
        assert!(generate_sample(&cfg(0.1, &[1], 1.5), &v, &mut RandomStream::new(0)).is_err());
    }
}
