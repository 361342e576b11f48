//! Closed-form diffusion math: noise schedules, the Gaussian chain with its
//! DDIM update, the categorical chain with its posterior and variational
//! loss, and the joint (structure map, label) pair process.
//!
//! Timesteps run `1..=T`; `alpha_bar(0) == 1` by convention.

use serde::{Deserialize, Serialize};

use crate::conditioning::guide;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::grid::LabelGrid;
use crate::rng::{draw_categorical, RandomStream};

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// Weight of the auxiliary cross-entropy in the categorical loss.
pub const LAMBDA_AUX: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    GaussianLinear,
    CategoricalCosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_variances: Vec<f64>,
}

impl Schedule {
    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
                }
            })
            .collect();
        Schedule {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn id(&self) -> String {
        match self.kind {
            ScheduleKind::GaussianLinear => format!(
                "gaussian-linear:T={}:{:e}:{:e}",
                self.len(),
                self.betas[0],
                self.betas[self.len() - 1]
            ),
            ScheduleKind::CategoricalCosine => format!("categorical-cosine:T={}", self.len()),
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.len(), Invalid, "timestep {t} outside 1..={}", self.len());
        Ok(())
    }
}

pub fn linear_schedule(t_max: usize, beta_1: f64, beta_t: f64) -> Result<Schedule> {
    ensure!(t_max >= 1, Invalid, "T must be at least 1");
    ensure!(
        beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0,
        Invalid,
        "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
    );
    let betas = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_1
            } else {
                beta_1 + (beta_t - beta_1) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    Ok(Schedule::from_betas(ScheduleKind::GaussianLinear, betas))
}

pub fn cosine_schedule(t_max: usize, s: f64) -> Result<Schedule> {
    ensure!(t_max >= 1, Invalid, "T must be at least 1");
    ensure!(s > 0.0, Invalid, "offset s must be positive");
    let f = |t: f64| {
        let v = ((t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
        v * v
    };
    let f0 = f(0.0);
    let betas = (1..=t_max)
        .map(|t| {
            let ab = f(t as f64) / f0;
            let ab_prev = f((t - 1) as f64) / f0;
            (1.0 - ab / ab_prev).clamp(1e-12, 0.999)
        })
        .collect();
    Ok(Schedule::from_betas(ScheduleKind::CategoricalCosine, betas))
}

/// Default Gaussian chain: linear, 1e-4 → 0.02 over 1000 steps.
pub fn default_gaussian_schedule() -> Schedule {
    linear_schedule(1000, 1e-4, 0.02).expect("valid constants")
}

/// Default categorical chain: cosine with s = 0.008 over 1000 steps.
pub fn default_categorical_schedule() -> Schedule {
    cosine_schedule(1000, 0.008).expect("valid constants")
}

/// Marginal sample `√ᾱ_t x0 + √(1−ᾱ_t) ε`.
pub fn q_sample_gaussian(x0: &Field, t: usize, eps: &Field, sch: &Schedule) -> Result<Field> {
    x0.ensure_same_shape(eps, "q_sample_gaussian")?;
    sch.check_t(t)?;
    let ab = sch.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `x̂0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`, unclipped.
pub fn predict_x0(x_t: &Field, eps_hat: &Field, alpha_bar_t: f64) -> Result<Field> {
    x_t.ensure_same_shape(eps_hat, "predict_x0")?;
    let (a, b) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    x_t.zip_map(eps_hat, |x, e| ((x as f64 - b * e as f64) / a) as f32)
}

/// Result of one DDIM update.
#[derive(Debug, Clone)]
pub struct DdimStep {
    pub x_prev: Field,
    /// Set when `1 − ᾱ_prev − σ²` went negative and was clamped to zero.
    pub clamped: bool,
}

/// One DDIM step from `t` to `t_prev` (`t_prev = 0` returns the clipped `x̂0`).
pub fn ddim_step(
    x_t: &Field,
    eps_hat: &Field,
    t: usize,
    t_prev: usize,
    sch: &Schedule,
    eta: f64,
    rs: &mut RandomStream,
) -> Result<DdimStep> {
    ddim_step_clipped(x_t, eps_hat, t, t_prev, sch, eta, Some(1.0), rs)
}

/// [`ddim_step`] with a configurable bound on `x̂0`; `None` leaves it
/// unclipped, as needed for latents that are not confined to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_clipped(
    x_t: &Field,
    eps_hat: &Field,
    t: usize,
    t_prev: usize,
    sch: &Schedule,
    eta: f64,
    clip: Option<f32>,
    rs: &mut RandomStream,
) -> Result<DdimStep> {
    sch.check_t(t)?;
    ensure!(t_prev < t, Invalid, "t_prev {t_prev} must be below t {t}");
    ensure!((0.0..=1.0).contains(&eta), Invalid, "eta {eta} outside [0, 1]");
    let ab_t = sch.alpha_bar(t);
    let ab_p = sch.alpha_bar(t_prev);
    let x0 = predict_x0(x_t, eps_hat, ab_t)?;
    let x0 = match clip {
        Some(c) => x0.map(|v| v.clamp(-c, c))?,
        None => x0,
    };
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).max(0.0).sqrt();
    let mut dir2 = 1.0 - ab_p - sigma * sigma;
    let clamped = dir2 < 0.0;
    if clamped {
        dir2 = 0.0;
    }
    let (a, d) = (ab_p.sqrt(), dir2.sqrt());
    let mut data: Vec<f32> = x0
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (a * x as f64 + d * e as f64) as f32)
        .collect();
    if sigma > 0.0 {
        for v in &mut data {
            *v += (sigma * rs.normal()) as f32;
        }
    }
    Ok(DdimStep {
        x_prev: Field::new(x_t.shape().to_vec(), data)?,
        clamped,
    })
}

/// Ancestral (DDPM) step with the fixed posterior variance `σ̃_t²`.
pub fn ancestral_step(x_t: &Field, eps_hat: &Field, t: usize, sch: &Schedule, rs: &mut RandomStream) -> Result<Field> {
    sch.check_t(t)?;
    let (a, ab, b) = (sch.alpha(t), sch.alpha_bar(t), sch.beta(t));
    let sd = sch.posterior_variances[t - 1].sqrt();
    let coef = b / (1.0 - ab).sqrt();
    Field::new(
        x_t.shape().to_vec(),
        x_t.data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| {
                let mean = (x as f64 - coef * e as f64) / a.sqrt();
                (mean + if t > 1 { sd * rs.normal() } else { 0.0 }) as f32
            })
            .collect(),
    )
}

pub fn eps_mse_loss(eps: &Field, eps_hat: &Field) -> Result<f32> {
    eps.ensure_same_shape(eps_hat, "eps_mse_loss")?;
    ensure!(!eps.is_empty(), Invalid, "empty field");
    let s: f64 = eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((s / eps.len() as f64) as f32)
}

/// Index of the single 1 in a one-hot row.
fn one_hot_index(row: &[f32]) -> Result<usize> {
    let mut idx = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            ensure!(idx.is_none(), Invalid, "row {:?} is not one-hot", row);
            idx = Some(i);
        } else {
            ensure!(v == 0.0, Invalid, "row {:?} is not one-hot", row);
        }
    }
    idx.ok_or_else(|| Error::Invalid(format!("row {row:?} is not one-hot")))
}

pub fn one_hot(label: &LabelGrid, k: usize) -> Result<Field> {
    let (h, w) = label.dims();
    let mut data = vec![0.0f32; h * w * k];
    for (i, &l) in label.data().iter().enumerate() {
        ensure!((l as usize) < k, Invalid, "label {l} >= K={k}");
        data[i * k + l as usize] = 1.0;
    }
    Field::new(vec![h, w, k], data)
}

/// Per-pixel argmax over the trailing axis (ties → lowest index).
pub fn argmax_rows(probs: &Field) -> Vec<usize> {
    probs
        .rows()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Marginal row `ᾱ·onehot(y0) + (1 − ᾱ)/K` in double precision.
pub fn marginal_row(y0: usize, alpha_bar: f64, k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| alpha_bar * if i == y0 { 1.0 } else { 0.0 } + (1.0 - alpha_bar) / k as f64)
        .collect()
}

/// `ᾱ_t y0 + (1 − ᾱ_t) / K`, row-wise.
pub fn q_marginal_cat(y0: &Field, t: usize, sch: &Schedule) -> Result<Field> {
    sch.check_t(t)?;
    let k = y0.last_dim();
    let ab = sch.alpha_bar(t);
    let u = (1.0 - ab) / k as f64;
    for r in y0.rows() {
        one_hot_index(r)?;
    }
    y0.map(|v| (ab * v as f64 + u) as f32)
}

/// Posterior `θ ∝ [a·y_t + (1−a)/K] ⊙ [ᾱ_prev·ŷ0 + (1−ᾱ_prev)/K]` for one
/// pixel, where `a = ᾱ_t / ᾱ_prev` is the (possibly strided) step factor.
pub fn posterior_row(yt: &[f64], y0_hat: &[f64], step_alpha: f64, ab_prev: f64, out: &mut [f64]) -> Result<()> {
    let k = yt.len() as f64;
    let mut z = 0.0;
    for i in 0..yt.len() {
        let f = step_alpha * yt[i] + (1.0 - step_alpha) / k;
        let a = ab_prev * y0_hat[i] + (1.0 - ab_prev) / k;
        out[i] = f * a;
        z += out[i];
    }
    ensure!(z > 0.0 && z.is_finite(), Invalid, "posterior row has zero mass");
    out.iter_mut().for_each(|v| *v /= z);
    Ok(())
}

fn posterior_field(y_t: &Field, y0_hat: &Field, step_alpha: f64, ab_prev: f64) -> Result<Field> {
    y_t.ensure_same_shape(y0_hat, "posterior_cat")?;
    let k = y_t.last_dim();
    let mut out = Vec::with_capacity(y_t.len());
    let mut buf = vec![0.0f64; k];
    for (yr, pr) in y_t.rows().zip(y0_hat.rows()) {
        let yr: Vec<f64> = yr.iter().map(|&v| v as f64).collect();
        let pr: Vec<f64> = pr.iter().map(|&v| v as f64).collect();
        posterior_row(&yr, &pr, step_alpha, ab_prev, &mut buf)?;
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Field::new(y_t.shape().to_vec(), out)
}

/// One-step posterior `q(y_{t−1} | y_t, ŷ0)`.
pub fn posterior_cat(y_t: &Field, y0_hat: &Field, t: usize, sch: &Schedule) -> Result<Field> {
    sch.check_t(t)?;
    posterior_field(y_t, y0_hat, sch.alpha(t), sch.alpha_bar(t - 1))
}

/// Posterior for a jump `t → t_prev` on a strided grid.
pub fn posterior_cat_strided(y_t: &Field, y0_hat: &Field, t: usize, t_prev: usize, sch: &Schedule) -> Result<Field> {
    sch.check_t(t)?;
    ensure!(t_prev < t, Invalid, "t_prev {t_prev} must be below t {t}");
    let ab_p = sch.alpha_bar(t_prev);
    posterior_field(y_t, y0_hat, sch.alpha_bar(t) / ab_p, ab_p)
}

/// Per-pixel categorical terms and the gradient of
/// `kl + λ_aux·ce` with respect to the logits.
///
/// `kl` is `KL(q(y_{t−1}|y_t,y0) ‖ θ(y_t, softmax(logits)))`; at `t = 1`
/// (`ab_prev = 1`) the true posterior is the one-hot `y0` and the term
/// reduces to `−log θ[y0]`. `ce` is `−log softmax(logits)[y0]`.
pub fn cat_pixel_loss(
    logits: &[f64],
    y0: usize,
    yt: usize,
    step_alpha: f64,
    ab_prev: f64,
    lambda_aux: f64,
    grad: Option<&mut [f64]>,
) -> (f64, f64) {
    let k = logits.len();
    let kf = k as f64;
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let zs: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= zs);
    cat_terms_from_probs(&p, y0, yt, step_alpha, ab_prev, lambda_aux, grad, kf)
}

#[allow(clippy::too_many_arguments)]
fn cat_terms_from_probs(
    p: &[f64],
    y0: usize,
    yt: usize,
    step_alpha: f64,
    ab_prev: f64,
    lambda_aux: f64,
    grad: Option<&mut [f64]>,
    kf: f64,
) -> (f64, f64) {
    let k = p.len();
    let c = (1.0 - ab_prev) / kf;
    let f: Vec<f64> = (0..k)
        .map(|i| step_alpha * if i == yt { 1.0 } else { 0.0 } + (1.0 - step_alpha) / kf)
        .collect();
    // True posterior from the one-hot y0.
    let mut q: Vec<f64> = (0..k)
        .map(|i| f[i] * (ab_prev * if i == y0 { 1.0 } else { 0.0 } + c))
        .collect();
    let zq: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= zq);
    let a: Vec<f64> = p.iter().map(|&pi| ab_prev * pi + c).collect();
    let s: f64 = (0..k).map(|i| f[i] * a[i]).sum();
    let mut kl = 0.0;
    for i in 0..k {
        if q[i] > 0.0 {
            let theta = f[i] * a[i] / s;
            kl += q[i] * (q[i].max(LOG_FLOOR).ln() - theta.max(LOG_FLOOR).ln());
        }
    }
    let ce = -p[y0].max(LOG_FLOOR).ln();
    if let Some(g) = grad {
        // u_j = p_j ∂kl/∂p_j, written so that p_j / a_j never divides by zero.
        let u: Vec<f64> = (0..k)
            .map(|j| {
                let r = if a[j] > 0.0 { p[j] / a[j] } else { 1.0 / ab_prev };
                ab_prev * (-q[j] * r + p[j] * f[j] / s)
            })
            .collect();
        let su: f64 = u.iter().sum();
        for j in 0..k {
            let onehot = if j == y0 { 1.0 } else { 0.0 };
            g[j] = u[j] - p[j] * su + lambda_aux * (p[j] - onehot);
        }
    }
    (kl.max(0.0), ce)
}

/// Loss components of the categorical chain, averaged over pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatLoss {
    pub kl: f64,
    pub ce: f64,
    pub total: f64,
}

/// Categorical variational bound term plus `λ_aux`-weighted cross-entropy.
pub fn vlb_cat_loss(y0: &Field, y_t: &Field, y0_hat: &Field, t: usize, sch: &Schedule, lambda_aux: f64) -> Result<CatLoss> {
    y0.ensure_same_shape(y_t, "vlb_cat_loss")?;
    y0.ensure_same_shape(y0_hat, "vlb_cat_loss")?;
    sch.check_t(t)?;
    let k = y0.last_dim();
    let n = y0.len() / k;
    let (mut kl, mut ce) = (0.0, 0.0);
    for ((r0, rt), rp) in y0.rows().zip(y_t.rows()).zip(y0_hat.rows()) {
        let p: Vec<f64> = rp.iter().map(|&v| v as f64).collect();
        let (a, b) = cat_terms_from_probs(
            &p,
            one_hot_index(r0)?,
            one_hot_index(rt)?,
            sch.alpha(t),
            sch.alpha_bar(t - 1),
            lambda_aux,
            None,
            k as f64,
        );
        kl += a;
        ce += b;
    }
    let (kl, ce) = (kl / n as f64, ce / n as f64);
    Ok(CatLoss {
        kl,
        ce,
        total: kl + lambda_aux * ce,
    })
}

/// Joint diffusion state: structure channels `x` and categorical channels `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    /// `[H, W, 3]`.
    pub x: Field,
    /// `[H, W, K]`, rows on the simplex.
    pub y: Field,
    pub t: usize,
}

/// Noised pair at `t`, plus the Gaussian noise that was used.
pub fn forward_pair(
    x0: &Field,
    y0: &Field,
    t: usize,
    rs: &mut RandomStream,
    sch_g: &Schedule,
    sch_c: &Schedule,
) -> Result<(PairState, Field)> {
    let (xs, ys) = (x0.shape(), y0.shape());
    ensure!(
        xs.len() == 3 && ys.len() == 3 && xs[..2] == ys[..2],
        Shape,
        "x0 {:?} and y0 {:?} are not aligned",
        xs,
        ys
    );
    let eps = crate::rng::draw_normal(rs, xs)?;
    let x = q_sample_gaussian(x0, t, &eps, sch_g)?;
    let probs = q_marginal_cat(y0, t, sch_c)?;
    let k = y0.last_dim();
    let mut y = vec![0.0f32; y0.len()];
    for (i, r) in probs.rows().enumerate() {
        y[i * k + draw_categorical(rs, r).or_else(|_| renormalized_draw(rs, r))?] = 1.0;
    }
    Ok((
        PairState {
            x,
            y: Field::new(ys.to_vec(), y)?,
            t,
        },
        eps,
    ))
}

fn renormalized_draw(rs: &mut RandomStream, row: &[f32]) -> Result<usize> {
    let w: Vec<f64> = row.iter().map(|&v| v.max(0.0) as f64).collect();
    ensure!(w.iter().sum::<f64>() > 0.0, Invalid, "all-zero probability row");
    Ok(rs.weighted_index(&w))
}

/// Strictly decreasing timestep list from `T` to 0 with `steps` jumps.
pub fn ddim_stride(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_max);
    let mut out: Vec<usize> = (0..=steps)
        .rev()
        .map(|i| ((t_max as f64) * i as f64 / steps as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Anything that predicts `(ε̂, ŷ0 logits)` for a batch of pair states.
pub trait PairModel {
    type Cond: Clone;
    /// `x: [B, H, W, 3]`, `y: [B, H, W, K]`; `conds[i] = None` requests the
    /// unconditional output. Returns `ε̂: [B, H, W, 3]` and logits `[B, H, W, K]`.
    fn predict(&self, x: &Field, y: &Field, t: usize, conds: &[Option<Self::Cond>]) -> Result<(Field, Field)>;
}

/// Sampler settings.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    pub stride: &'a [usize],
    pub sch_g: &'a Schedule,
    pub sch_c: &'a Schedule,
    pub guidance: f64,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

fn stack(fields: &[Field]) -> Result<Field> {
    let mut shape = vec![fields.len()];
    shape.extend_from_slice(fields[0].shape());
    let mut data = Vec::with_capacity(fields.len() * fields[0].len());
    for f in fields {
        data.extend_from_slice(f.data());
    }
    Field::new(shape, data)
}

fn unstack(f: &Field, n: usize) -> Result<Vec<Field>> {
    let per = f.len() / n;
    let shape = f.shape()[1..].to_vec();
    (0..n)
        .map(|i| Field::new(shape.clone(), f.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

pub fn softmax_rows(logits: &Field) -> Result<Field> {
    let k = logits.last_dim();
    let mut out = Vec::with_capacity(logits.len());
    for r in logits.rows() {
        let mx = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = r.iter().map(|&v| ((v - mx) as f64).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|&v| (v / z) as f32));
    }
    let _ = k;
    Field::new(logits.shape().to_vec(), out)
}

impl PairSampler<'_> {
    /// Samples one pair per entry of `conds`; item `i` draws only from `streams[i]`.
    pub fn sample<M: PairModel>(
        &self,
        model: &M,
        conds: &[Option<M::Cond>],
        streams: &mut [RandomStream],
    ) -> Result<Vec<(Field, LabelGrid)>> {
        let n = conds.len();
        ensure!(streams.len() == n, Invalid, "one stream per sample required");
        ensure!(n > 0, Invalid, "nothing to sample");
        let st = self.stride;
        ensure!(
            st.len() >= 2 && st[0] == self.sch_g.len() && *st.last().unwrap() == 0,
            Invalid,
            "stride must run from T to 0"
        );
        ensure!(st.windows(2).all(|w| w[0] > w[1]), Invalid, "stride must be strictly decreasing");
        let (h, w, k) = (self.h, self.w, self.k);
        let uniform = vec![1.0 / k as f32; k];
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for rs in streams.iter_mut() {
            xs.push(crate::rng::draw_normal(rs, &[h, w, 3])?);
            let mut y = vec![0.0f32; h * w * k];
            for p in 0..h * w {
                y[p * k + draw_categorical(rs, &uniform).or_else(|_| renormalized_draw(rs, &uniform))?] = 1.0;
            }
            ys.push(Field::new(vec![h, w, k], y)?);
        }
        let guided = self.guidance != 1.0;
        let mut final_probs: Vec<Field> = Vec::new();
        for win in st.windows(2) {
            let (t, t_prev) = (win[0], win[1]);
            let (eps, logits) = if guided {
                let mut all_conds: Vec<Option<M::Cond>> = conds.to_vec();
                all_conds.extend(std::iter::repeat(None).take(n));
                let xb = stack(&[xs.clone(), xs.clone()].concat())?;
                let yb = stack(&[ys.clone(), ys.clone()].concat())?;
                let (e, l) = model.predict(&xb, &yb, t, &all_conds)?;
                let (ec, eu) = split_half(&e)?;
                let (lc, lu) = split_half(&l)?;
                (guide(&ec, &eu, self.guidance)?, guide(&lc, &lu, self.guidance)?)
            } else {
                model.predict(&stack(&xs)?, &stack(&ys)?, t, conds)?
            };
            ensure!(
                eps.shape() == [n, h, w, 3] && logits.shape() == [n, h, w, k],
                Shape,
                "model returned {:?} / {:?}",
                eps.shape(),
                logits.shape()
            );
            let eps = unstack(&eps, n)?;
            let probs = unstack(&softmax_rows(&logits)?, n)?;
            for i in 0..n {
                xs[i] = ddim_step(&xs[i], &eps[i], t, t_prev, self.sch_g, 0.0, &mut streams[i])?.x_prev;
                if t_prev > 0 {
                    let post = posterior_cat_strided(&ys[i], &probs[i], t, t_prev, self.sch_c)?;
                    let mut y = vec![0.0f32; h * w * k];
                    for (p, r) in post.rows().enumerate() {
                        let idx = draw_categorical(&mut streams[i], r).or_else(|_| renormalized_draw(&mut streams[i], r))?;
                        y[p * k + idx] = 1.0;
                    }
                    ys[i] = Field::new(vec![h, w, k], y)?;
                }
            }
            final_probs = probs;
        }
        xs.into_iter()
            .zip(final_probs)
            .map(|(x, p)| {
                let lab: Vec<u8> = argmax_rows(&p).into_iter().map(|v| v as u8).collect();
                Ok((x.map(|v| v.clamp(-1.0, 1.0))?, LabelGrid::from_vec(h, w, lab)?))
            })
            .collect()
    }
}

fn split_half(f: &Field) -> Result<(Field, Field)> {
    let n = f.shape()[0] / 2;
    let half = f.len() / 2;
    let mut shape = f.shape().to_vec();
    shape[0] = n;
    Ok((
        Field::new(shape.clone(), f.data()[..half].to_vec())?,
        Field::new(shape, f.data()[half..].to_vec())?,
    ))
}
