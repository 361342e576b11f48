//! Self-checks run by `nucleosynth verify`. Each one compares a library
//! routine with an independent computation.

use nalgebra::{DMatrix, DVector};
use nucleosynth::conditioning::{Bucket, Prompt};
use nucleosynth::dataset::Vocabulary;
use nucleosynth::denoiser::gradient_check;
use nucleosynth::kernels::{cosine_schedule, default_gaussian_schedule, marginal_row, posterior_row, q_sample_gaussian};
use nucleosynth::metrics::{frechet_distance, GaussianSummary};
use nucleosynth::rng::draw_normal;
use nucleosynth::stage2::{controlled_forward, BaseConfig, BaseModel, ControlBranch, ControlConfig};
use nucleosynth::toydata::all_class_sets;
use nucleosynth::{Field, RandomStream};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn transition(beta: f64, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| (1.0 - beta) * (i == j) as u8 as f64 + beta / k as f64).collect())
        .collect()
}

fn propagate(start: &[f64], betas: &[f64]) -> Vec<f64> {
    let k = start.len();
    let mut v = start.to_vec();
    for &b in betas {
        let q = transition(b, k);
        v = (0..k).map(|j| (0..k).map(|i| v[i] * q[i][j]).sum()).collect();
    }
    v
}

/// Marginals and posteriors of the categorical chain against explicit
/// transition-matrix products and Bayes' rule, K = 3 and T ≤ 6.
pub fn categorical_kernels() -> Check {
    let k = 3;
    let mut worst = 0.0f64;
    let mut rs = RandomStream::new(11);
    for t_max in 1..=6 {
        let sch = cosine_schedule(t_max, 0.008).expect("valid schedule");
        let betas: Vec<f64> = (1..=t_max).map(|t| sch.beta(t)).collect();
        for t in 1..=t_max {
            for y0 in 0..k {
                let e: Vec<f64> = (0..k).map(|i| (i == y0) as u8 as f64).collect();
                let oracle = propagate(&e, &betas[..t]);
                let got = marginal_row(y0, sch.alpha_bar(t), k);
                for (a, b) in oracle.iter().zip(&got) {
                    worst = worst.max((a - b).abs());
                }
            }
            if t < 2 {
                continue;
            }
            let w: Vec<f64> = (0..k).map(|_| rs.uniform() + 0.05).collect();
            let s: f64 = w.iter().sum();
            let y0_hat: Vec<f64> = w.iter().map(|v| v / s).collect();
            let prior = propagate(&y0_hat, &betas[..t - 1]);
            let q = transition(betas[t - 1], k);
            for yt in 0..k {
                let joint: Vec<f64> = (0..k).map(|p| prior[p] * q[p][yt]).collect();
                let z: f64 = joint.iter().sum();
                let row: Vec<f64> = (0..k).map(|i| (i == yt) as u8 as f64).collect();
                let mut got = vec![0.0; k];
                if posterior_row(&row, &y0_hat, sch.alpha(t), sch.alpha_bar(t - 1), &mut got).is_err() {
                    return check("categorical kernels", false, "posterior_row failed".into());
                }
                for (a, b) in joint.iter().zip(&got) {
                    worst = worst.max((a / z - b).abs());
                }
            }
        }
    }
    check("categorical kernels", worst < 1e-10, format!("max abs diff {worst:.2e}"))
}

/// Closed-form Gaussian marginal against 10 000 simulated 1000-step chains.
pub fn gaussian_marginal(seed: u64) -> Check {
    let sch = default_gaussian_schedule();
    let (n, x0) = (10_000usize, 0.7f64);
    let mut rs = RandomStream::new(seed).child("chains");
    let mut chain = vec![x0; n];
    for t in 1..=sch.len() {
        let b = sch.beta(t);
        for v in chain.iter_mut() {
            *v = (1.0 - b).sqrt() * *v + b.sqrt() * rs.normal();
        }
    }
    let eps = draw_normal(&mut rs, &[n]).expect("shape");
    let direct: Vec<f64> = q_sample_gaussian(&Field::filled(&[n], x0 as f32), sch.len(), &eps, &sch)
        .expect("same shape")
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
    };
    let ((mc, sc), (md, sd)) = (stats(&chain), stats(&direct));
    let mean_err = (mc - md).abs() / md.abs().max(sd);
    let std_err = (sc - sd).abs() / sd;
    check(
        "gaussian marginal",
        mean_err < 0.02 && std_err < 0.02,
        format!("mean rel {mean_err:.4}, std rel {std_err:.4}"),
    )
}

pub fn gradients(seed: u64) -> Check {
    match gradient_check(seed) {
        Ok(g) => check(
            "denoiser gradients",
            g.max_rel_err < 1e-5,
            format!("{} params, max rel err {:.2e}", g.params, g.max_rel_err),
        ),
        Err(e) => check("denoiser gradients", false, e.to_string()),
    }
}

fn random_prompt(rs: &mut RandomStream, vocab: &Vocabulary) -> Prompt {
    let sets = all_class_sets(vocab.k());
    Prompt {
        tissue: rs.int_inclusive(0, vocab.tissues.len() - 1),
        bucket: Bucket::ALL[rs.int_inclusive(0, Bucket::ALL.len() - 1)],
        classes: sets[rs.int_inclusive(0, sets.len() - 1)].clone(),
        staining: Some(rs.int_inclusive(0, vocab.stainings.len() - 1)),
    }
}

/// A freshly initialised control branch leaves the base output bit-identical.
pub fn zero_init(seed: u64, probes: usize) -> Check {
    let run = || -> nucleosynth::Result<Option<String>> {
        let vocab = Vocabulary::default();
        let rs = RandomStream::new(seed).child("zero-init");
        let cfg = BaseConfig::new(&vocab, 4);
        let mut params = cfg.init(&mut rs.child("base"));
        // The stock init zeroes the output layer; perturb it so outputs are non-trivial.
        let out = params.get_mut("unet.out.w").expect("output layer");
        let noise = draw_normal(&mut rs.child("out"), &[out.data.len()])?;
        for (v, n) in out.data.iter_mut().zip(noise.data()) {
            *v = 0.05 * n;
        }
        let base = BaseModel {
            cfg,
            params,
            frozen: true,
            step: 0,
        };
        let branch = ControlBranch::init(ControlConfig::new(vocab.k()), &base, &mut rs.child("branch"));
        for i in 0..probes {
            let mut r = rs.child_idx("probe", i as u64);
            let z = draw_normal(&mut r, &[8, 8, 4])?;
            let cs = draw_normal(&mut r, &[32, 32, vocab.k() + 3])?;
            let t = r.int_inclusive(1, 1000);
            let p = random_prompt(&mut r, &vocab);
            let prompt = if r.bernoulli(0.2) { None } else { Some(&p) };
            let a = base.forward(&[&z], &[t], &[prompt])?;
            let b = controlled_forward(&base, &branch, &[&z], &[t], &[prompt], &[&cs])?;
            let same = a[0].data().iter().zip(b[0].data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same || a[0].data().iter().all(|&v| v == 0.0) {
                return Ok(Some(format!("probe {i} differs")));
            }
        }
        Ok(None)
    };
    match run() {
        Ok(None) => check("zero-init identity", true, format!("{probes} probes bit-exact")),
        Ok(Some(m)) => check("zero-init identity", false, m),
        Err(e) => check("zero-init identity", false, e.to_string()),
    }
}

/// Principal square root by the Denman–Beavers iteration.
fn db_sqrt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let (mut y, mut z) = (a.clone(), DMatrix::identity(n, n));
    for _ in 0..100 {
        let yi = y.clone().try_inverse()?;
        let zi = z.clone().try_inverse()?;
        let y2 = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        let done = (&y2 - &y).norm() < 1e-15 * y2.norm();
        y = y2;
        if done {
            break;
        }
    }
    Some(y)
}

/// Fréchet distance on 100 random 5-D pairs against the iterative square
/// root, plus the unit 1-D case.
pub fn frechet(seed: u64) -> Check {
    let mut rs = RandomStream::new(seed).child("frechet");
    let mut summary = |d: usize| {
        let b = DMatrix::from_fn(d, d, |_, _| rs.normal());
        GaussianSummary {
            mean: DVector::from_fn(d, |_, _| 2.0 * rs.normal()),
            cov: &b * b.transpose() + DMatrix::identity(d, d) * 0.1,
            count: 100,
        }
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b) = (summary(5), summary(5));
        let Some(root) = db_sqrt(&(&a.cov * &b.cov)) else {
            return check("frechet distance", false, "oracle iteration failed".into());
        };
        let oracle = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * root.trace();
        match frechet_distance(&a, &b) {
            Ok(v) => worst = worst.max((v - oracle).abs()),
            Err(e) => return check("frechet distance", false, e.to_string()),
        }
    }
    let unit = |m: f64| GaussianSummary {
        mean: DVector::from_element(1, m),
        cov: DMatrix::identity(1, 1),
        count: 2,
    };
    let one = frechet_distance(&unit(0.0), &unit(1.0)).unwrap_or(f64::NAN);
    check(
        "frechet distance",
        worst < 1e-8 && (one - 1.0).abs() < 1e-10,
        format!("max diff {worst:.2e}, unit case {one}"),
    )
}

pub fn all_checks(seed: u64) -> Vec<Check> {
    vec![
        categorical_kernels(),
        gaussian_marginal(seed),
        gradients(seed),
        zero_init(seed, 100),
        frechet(seed),
    ]
}

pub fn run_all(seed: u64) -> CliResult<()> {
    let checks = all_checks(seed);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        for c in [categorical_kernels(), frechet(3), zero_init(3, 5)] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn iterative_root_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = db_sqrt(&a).unwrap();
        assert!((&r * &r - &a).norm() < 1e-12);
    }
}
