//! Diffusion kernels checked against brute-force chain simulations.

use nucleosynth::kernels::*;
use nucleosynth::rng::draw_normal;
use nucleosynth::{Field, LabelGrid, RandomStream, Result};
use proptest::prelude::*;

/// Single-step transition matrix `(1−β) I + β/K`.
fn transition(beta: f64, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| (1.0 - beta) * (i == j) as u8 as f64 + beta / k as f64).collect())
        .collect()
}

fn row_times(v: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    (0..v.len()).map(|j| (0..v.len()).map(|i| v[i] * m[i][j]).sum()).collect()
}

/// Distribution of `y_t` given a distribution of `y_0`, by repeated matrix products.
fn chain_marginal(start: &[f64], sch: &Schedule, t: usize) -> Vec<f64> {
    let mut v = start.to_vec();
    for s in 1..=t {
        v = row_times(&v, &transition(sch.beta(s), start.len()));
    }
    v
}

#[test]
fn categorical_marginal_matches_matrix_power() {
    let k = 3;
    for t_max in 1..=6 {
        let sch = cosine_schedule(t_max, 0.008).unwrap();
        for y0 in 0..k {
            let mut e = vec![0.0; k];
            e[y0] = 1.0;
            for t in 1..=t_max {
                let oracle = chain_marginal(&e, &sch, t);
                let got = marginal_row(y0, sch.alpha_bar(t), k);
                for (a, b) in oracle.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-10, "T={t_max} t={t}: {oracle:?} vs {got:?}");
                }
            }
        }
    }
}

#[test]
fn categorical_posterior_matches_bayes_enumeration() {
    let k = 3;
    let mut rs = RandomStream::new(8);
    for t_max in 2..=6 {
        let sch = cosine_schedule(t_max, 0.008).unwrap();
        for t in 2..=t_max {
            let q = transition(sch.beta(t), k);
            for trial in 0..6 {
                // ŷ0: one-hot for the first three trials, random for the rest.
                let y0_hat: Vec<f64> = if trial < 3 {
                    (0..k).map(|i| (i == trial) as u8 as f64).collect()
                } else {
                    let w: Vec<f64> = (0..k).map(|_| rs.uniform() + 0.01).collect();
                    let s: f64 = w.iter().sum();
                    w.iter().map(|v| v / s).collect()
                };
                let prior = chain_marginal(&y0_hat, &sch, t - 1);
                for yt in 0..k {
                    let joint: Vec<f64> = (0..k).map(|prev| prior[prev] * q[prev][yt]).collect();
                    let z: f64 = joint.iter().sum();
                    let oracle: Vec<f64> = joint.iter().map(|v| v / z).collect();
                    let yt_row: Vec<f64> = (0..k).map(|i| (i == yt) as u8 as f64).collect();
                    let mut got = vec![0.0; k];
                    posterior_row(&yt_row, &y0_hat, sch.alpha(t), sch.alpha_bar(t - 1), &mut got).unwrap();
                    for (a, b) in oracle.iter().zip(&got) {
                        assert!((a - b).abs() < 1e-10, "t={t} yt={yt}: {oracle:?} vs {got:?}");
                    }
                }
            }
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[test]
fn gaussian_marginal_matches_simulated_chain() {
    let sch = default_gaussian_schedule();
    let n = 10_000;
    let x0 = 0.7f64;
    let mut rs = RandomStream::new(21);
    let checkpoints = [50usize, 300, 1000];
    let mut chain = vec![x0; n];
    let mut at: Vec<Vec<f64>> = Vec::new();
    for t in 1..=1000 {
        let b = sch.beta(t);
        for v in chain.iter_mut() {
            *v = (1.0 - b).sqrt() * *v + b.sqrt() * rs.normal();
        }
        if checkpoints.contains(&t) {
            at.push(chain.clone());
        }
    }
    let x0f = Field::filled(&[n], x0 as f32);
    for (i, &t) in checkpoints.iter().enumerate() {
        let eps = draw_normal(&mut rs, &[n]).unwrap();
        let direct: Vec<f64> = q_sample_gaussian(&x0f, t, &eps, &sch)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (mc, sc) = mean_std(&at[i]);
        let (md, sd) = mean_std(&direct);
        assert!((sc - sd).abs() / sd < 0.02, "t={t}: std {sc} vs {sd}");
        // Relative when the mean is sizeable, otherwise against the unit scale.
        let scale = md.abs().max(sd);
        assert!((mc - md).abs() / scale < 0.02, "t={t}: mean {mc} vs {md}");
    }
}

#[test]
fn ddim_eta_one_matches_ancestral() {
    // Data ~ N(0, s²) has the closed-form optimal noise predictor below.
    let s2 = 0.09f64;
    let sch = default_gaussian_schedule();
    let eps_opt = |x: &Field, t: usize| {
        let ab = sch.alpha_bar(t);
        let c = (1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab);
        x.map(|v| (c * v as f64) as f32).unwrap()
    };
    let n = 10_000;
    let mut rs = RandomStream::new(5);
    let mut xa = draw_normal(&mut rs, &[n]).unwrap();
    let mut xd = draw_normal(&mut rs, &[n]).unwrap();
    for t in (1..=1000).rev() {
        let ea = eps_opt(&xa, t);
        xa = ancestral_step(&xa, &ea, t, &sch, &mut rs).unwrap();
        let ed = eps_opt(&xd, t);
        xd = ddim_step(&xd, &ed, t, t - 1, &sch, 1.0, &mut rs).unwrap().x_prev;
    }
    let f = |x: &Field| mean_std(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let (_, sa) = f(&xa);
    let (_, sd) = f(&xd);
    assert!((sa - sd).abs() / sa < 0.03, "ancestral {sa} vs ddim {sd}");
    assert!((sa - s2.sqrt()).abs() / s2.sqrt() < 0.03, "ancestral {sa} vs target {}", s2.sqrt());
}

#[test]
fn forward_pair_terminal_statistics() {
    let (sg, sc) = (default_gaussian_schedule(), default_categorical_schedule());
    let (h, w, k) = (250, 400, 4);
    let x0 = Field::from_fn(&[h, w, 3], |i| if i % 5 == 0 { 1.0 } else { -1.0 }).unwrap();
    let lab = LabelGrid::from_vec(h, w, (0..h * w).map(|i| (i % 7 == 0) as u8 * 2).collect()).unwrap();
    let y0 = one_hot(&lab, k).unwrap();
    let mut rs = RandomStream::new(77);
    let (ps, _) = forward_pair(&x0, &y0, 1000, &mut rs, &sg, &sc).unwrap();
    let xv: Vec<f64> = ps.x.data().iter().map(|&v| v as f64).collect();
    let (m, s) = mean_std(&xv);
    assert!(m.abs() < 0.02 && (s - 1.0).abs() < 0.02, "mean {m}, std {s}");
    let mut hist = vec![0usize; k];
    for r in ps.y.rows() {
        assert_eq!(r.iter().sum::<f32>(), 1.0);
        hist[argmax_rows(&Field::new(vec![k], r.to_vec()).unwrap())[0]] += 1;
    }
    for c in hist {
        let frac = c as f64 / (h * w) as f64;
        assert!((frac - 0.25).abs() / 0.25 < 0.02, "class fraction {frac}");
    }
    let mut rs2 = RandomStream::new(77);
    let (again, _) = forward_pair(&x0, &y0, 1000, &mut rs2, &sg, &sc).unwrap();
    assert_eq!(again, ps);
}

#[test]
fn forward_pair_small_t_keeps_labels() {
    let (sg, sc) = (default_gaussian_schedule(), default_categorical_schedule());
    let lab = LabelGrid::from_vec(20, 20, (0..400).map(|i| (i % 4) as u8).collect()).unwrap();
    let y0 = one_hot(&lab, 4).unwrap();
    let x0 = Field::filled(&[20, 20, 3], 0.5);
    let mut rs = RandomStream::new(1);
    let (ps, _) = forward_pair(&x0, &y0, 1, &mut rs, &sg, &sc).unwrap();
    let kept = ps.y.data().iter().zip(y0.data()).filter(|(a, b)| **a == 1.0 && **b == 1.0).count();
    assert!(kept as f64 / 400.0 >= sc.alpha_bar(1) - 0.01);
    assert!(ps.x.data().iter().all(|v| (v - 0.5).abs() < 0.06));
}

/// Knows the answer: predicts the exact noise and the true labels.
struct Oracle {
    x0: Field,
    y0: LabelGrid,
    k: usize,
    sch: Schedule,
}

impl PairModel for Oracle {
    type Cond = u8;
    fn predict(&self, x: &Field, _y: &Field, t: usize, conds: &[Option<u8>]) -> Result<(Field, Field)> {
        let b = conds.len();
        let ab = self.sch.alpha_bar(t);
        let per = self.x0.len();
        let eps: Vec<f32> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - ab.sqrt() * self.x0.data()[i % per] as f64) / (1.0 - ab).sqrt()) as f32)
            .collect();
        let mut logits = Vec::with_capacity(b * self.y0.data().len() * self.k);
        for _ in 0..b {
            for &l in self.y0.data() {
                logits.extend((0..self.k).map(|c| if c == l as usize { 0.0 } else { -1e4 }));
            }
        }
        let (h, w) = self.y0.dims();
        Ok((
            Field::new(x.shape().to_vec(), eps)?,
            Field::new(vec![b, h, w, self.k], logits)?,
        ))
    }
}

fn oracle_model() -> Oracle {
    let (h, w, k) = (8, 8, 4);
    let x0 = Field::from_fn(&[h, w, 3], |i| ((i * 13) % 21) as f32 / 10.0 - 1.0).unwrap();
    let y0 = LabelGrid::from_vec(h, w, (0..h * w).map(|i| ((i / 5) % k) as u8).collect()).unwrap();
    Oracle {
        x0,
        y0,
        k,
        sch: default_gaussian_schedule(),
    }
}

fn run_sampler(m: &Oracle, stride: &[usize], guidance: f64, seed: u64) -> Vec<(Field, LabelGrid)> {
    let sc = default_categorical_schedule();
    let sampler = PairSampler {
        stride,
        sch_g: &m.sch,
        sch_c: &sc,
        guidance,
        h: 8,
        w: 8,
        k: m.k,
    };
    let root = RandomStream::new(seed);
    let mut streams: Vec<RandomStream> = (0..2).map(|i| root.child_idx("item", i)).collect();
    sampler.sample(m, &[Some(1), None], &mut streams).unwrap()
}

#[test]
fn sampler_recovers_the_oracle_pair() {
    let m = oracle_model();
    let full: Vec<usize> = (0..=1000).rev().collect();
    let short = ddim_stride(1000, 100);
    let a = run_sampler(&m, &short, 1.0, 3);
    let b = run_sampler(&m, &full, 1.0, 3);
    let g = run_sampler(&m, &short, 2.0, 3);
    for (x, y) in a.iter().chain(&b).chain(&g) {
        assert_eq!(y, &m.y0);
        for (p, q) in x.data().iter().zip(m.x0.data()) {
            assert!((p - q).abs() < 1e-4, "{p} vs {q}");
        }
    }
    assert_eq!(a, run_sampler(&m, &short, 1.0, 3));
}

#[test]
fn sampler_rejects_bad_strides() {
    let m = oracle_model();
    let sc = default_categorical_schedule();
    for stride in [vec![1000, 500], vec![900, 0], vec![1000, 1000, 0]] {
        let s = PairSampler {
            stride: &stride,
            sch_g: &m.sch,
            sch_c: &sc,
            guidance: 1.0,
            h: 8,
            w: 8,
            k: 4,
        };
        let mut streams = vec![RandomStream::new(0)];
        assert!(s.sample(&m, &[None], &mut streams).is_err());
    }
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum::<f64>() + 1e-9;
        w.iter().map(|v| (v + 1e-9 / w.len() as f64) / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn categorical_loss_is_non_negative(
        p in simplex(4), y0 in 0usize..4, yt in 0usize..4, t in 1usize..=1000,
    ) {
        let sch = default_categorical_schedule();
        let logits: Vec<f64> = p.iter().map(|v| v.max(1e-300).ln()).collect();
        let (kl, ce) = cat_pixel_loss(&logits, y0, yt, sch.alpha(t), sch.alpha_bar(t - 1), LAMBDA_AUX, None);
        prop_assert!(kl >= 0.0 && ce >= 0.0);
    }

    #[test]
    fn posterior_rows_stay_on_simplex(p in simplex(4), yt in 0usize..4, t in 1usize..=1000, jump in 1usize..50) {
        let sch = default_categorical_schedule();
        let yrow: Vec<f64> = (0..4).map(|i| (i == yt) as u8 as f64).collect();
        let tp = t.saturating_sub(jump);
        let ab_p = sch.alpha_bar(tp);
        let mut out = vec![0.0; 4];
        posterior_row(&yrow, &p, sch.alpha_bar(t) / ab_p, ab_p, &mut out).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        prop_assert!(out.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn schedules_are_monotone(t_max in 1usize..400, b1 in 1e-5f64..0.05, extra in 0.0f64..0.5, s in 1e-4f64..0.1) {
        let lin = linear_schedule(t_max, b1, b1 + extra).unwrap();
        let cos = cosine_schedule(t_max, s).unwrap();
        for sch in [lin, cos] {
            prop_assert!(sch.betas.iter().all(|&b| b > 0.0 && b < 1.0));
            prop_assert!(sch.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(sch.alpha_bar(1) < 1.0);
        }
    }
}
