//! Stage-1 joint denoiser: a conditional U-Net over the packed
//! (structure map, embedded label) pair that predicts the Gaussian noise and
//! the clean-label logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_json, Checkpoint, CheckpointMeta};
use crate::conditioning::{parse_prompt, Prompt, PromptTables, EMBED_WIDTH};
use crate::dataset::{LabeledSample, Vocabulary};
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::geometry::make_structure_map;
use crate::grid::LabelGrid;
use crate::kernels::{cat_pixel_loss, ddim_stride, forward_pair, one_hot, PairModel, PairSampler, PairState, Schedule};
use crate::nn::{
    fit, nchw_to_nhwc, nhwc_to_nchw, normal_init, CurvePoint, Ema, Graph, ParamSet, Real, TrainConfig, UNet,
    UNetConfig, Var,
};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub unet: UNetConfig,
    pub tables: PromptTables,
    /// Number of classes including background.
    pub k: usize,
    pub lambda_cat: f64,
    pub lambda_aux: f64,
    /// Probability of replacing an item's prompt by the null embedding.
    pub p_drop: f64,
}

impl Stage1Config {
    pub fn standard(vocab: &Vocabulary) -> Self {
        Self::with_width(vocab, 32)
    }

    pub fn with_width(vocab: &Vocabulary, width: usize) -> Self {
        let k = vocab.k();
        Stage1Config {
            unet: UNetConfig {
                in_ch: 6,
                out_ch: 3 + k,
                width,
                depth: 2,
                blocks: 2,
                emb_width: EMBED_WIDTH,
                groups: 8,
                cond_width: EMBED_WIDTH,
            },
            tables: PromptTables::new(vocab),
            k,
            lambda_cat: 1.0,
            lambda_aux: crate::kernels::LAMBDA_AUX,
            p_drop: 0.1,
        }
    }

    /// Few-thousand-parameter network used for finite-difference checks.
    pub fn tiny(vocab: &Vocabulary) -> Self {
        let k = vocab.k();
        Stage1Config {
            unet: UNetConfig {
                in_ch: 6,
                out_ch: 3 + k,
                width: 4,
                depth: 1,
                blocks: 1,
                emb_width: 8,
                groups: 2,
                cond_width: 8,
            },
            tables: PromptTables::with_width(vocab, 8),
            ..Self::with_width(vocab, 4)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 2, Invalid, "need at least two classes, got K={}", self.k);
        ensure!(
            self.unet.in_ch == 6 && self.unet.out_ch == 3 + self.k,
            Invalid,
            "network channels {}→{} do not match K={}",
            self.unet.in_ch,
            self.unet.out_ch,
            self.k
        );
        ensure!(self.unet.cond_width == self.tables.width, Invalid, "prompt width mismatch");
        ensure!((0.0..=1.0).contains(&self.p_drop), Invalid, "p_drop {} outside [0, 1]", self.p_drop);
        Ok(())
    }

    /// Parameters: `unet.*`, `prompt.*` and the `label_embed` matrix `[K, 3]`.
    pub fn init<T: Real>(&self, rs: &mut RandomStream) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        ps.absorb("unet.", self.unet.init(&mut rs.child("unet")));
        ps.absorb("prompt.", self.tables.init(&mut rs.child("prompt")));
        ps.insert("label_embed", normal_init(&[self.k, 3], 1.0, &mut rs.child("label_embed")));
        ps
    }

    pub fn param_count(&self) -> usize {
        let w = self.tables.width;
        self.unet.param_count() + self.tables.rows() * w + w * w + 2 * w + self.k * 3
    }
}

/// Channels 0–2: `x`; channels 3–5: `y · E` per pixel.
pub fn pack_input(ps: &PairState, e: &Field) -> Result<Field> {
    let (xs, ys) = (ps.x.shape(), ps.y.shape());
    ensure!(
        xs.len() == 3 && ys.len() == 3 && xs[..2] == ys[..2] && xs[2] == 3,
        Shape,
        "pair {:?} / {:?} is not aligned",
        xs,
        ys
    );
    let k = ys[2];
    ensure!(e.shape() == [k, 3], Shape, "label embedding {:?}, expected [{k}, 3]", e.shape());
    let ed = e.data();
    let mut out = Vec::with_capacity(xs[0] * xs[1] * 6);
    for (xr, yr) in ps.x.rows().zip(ps.y.rows()) {
        out.extend_from_slice(xr);
        for c in 0..3 {
            out.push(yr.iter().enumerate().map(|(j, &y)| y * ed[j * 3 + c]).sum());
        }
    }
    Field::new(vec![xs[0], xs[1], 6], out)
}

fn stack_rows(fields: &[&Field]) -> Vec<f32> {
    fields.iter().flat_map(|f| f.data().iter().copied()).collect()
}

/// Builds the network on `[B, H, W, 3]` noisy structure maps and
/// `[B, H, W, K]` noisy labels. Output `[B, 3 + K, H, W]`.
fn forward_graph<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &Stage1Config,
    xs: &[&Field],
    ys: &[&Field],
    ts: &[usize],
    prompts: &[Option<&Prompt>],
) -> Result<Var> {
    let b = xs.len();
    ensure!(b > 0 && ys.len() == b && ts.len() == b && prompts.len() == b, Invalid, "ragged batch");
    let s = xs[0].shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "structure map {:?}", s);
    let (h, w) = (s[0], s[1]);
    for (x, y) in xs.iter().zip(ys) {
        ensure!(x.shape() == s && y.shape() == [h, w, cfg.k], Shape, "batch item {:?} / {:?}", x.shape(), y.shape());
    }
    let x = g.constant(nhwc_to_nchw(&stack_rows(xs), b, h, w, 3));
    let y = g.constant(nhwc_to_nchw(&stack_rows(ys), b, h, w, cfg.k));
    let e = g.p("label_embed");
    let ye = g.channel_mix(y, e);
    let inp = g.concat(x, ye);
    let c = cfg.tables.embed(g, "prompt.", prompts)?;
    UNet::new(&cfg.unet, "unet.").forward(g, inp, ts, Some(c))
}

/// Inference pass on single unbatched arrays: returns `ε̂ [H, W, 3]` and
/// logits `[H, W, K]`.
pub fn forward(
    cfg: &Stage1Config,
    params: &ParamSet<f32>,
    state: &PairState,
    prompt: Option<&Prompt>,
) -> Result<(Field, Field)> {
    let (e, l) = Stage1Model { cfg, params }.run(&[&state.x], &[&state.y], state.t, &[prompt])?;
    let s = state.x.shape();
    Ok((e.reshape(&[s[0], s[1], 3])?, l.reshape(&[s[0], s[1], cfg.k])?))
}

/// Stage-1 network bound to parameters, usable by the joint sampler.
pub struct Stage1Model<'a> {
    pub cfg: &'a Stage1Config,
    pub params: &'a ParamSet<f32>,
}

impl Stage1Model<'_> {
    fn run(&self, xs: &[&Field], ys: &[&Field], t: usize, prompts: &[Option<&Prompt>]) -> Result<(Field, Field)> {
        let mut g = Graph::inference();
        g.bind(self.params, "", false);
        let ts = vec![t; xs.len()];
        let out = forward_graph(&mut g, self.cfg, xs, ys, &ts, prompts)?;
        let shape = g.shape(out).to_vec();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let v = g.value(out);
        Ok((
            Field::new(vec![b, h, w, 3], nchw_to_nhwc(v, &shape, 0, 3))?,
            Field::new(vec![b, h, w, self.cfg.k], nchw_to_nhwc(v, &shape, 3, self.cfg.k))?,
        ))
    }
}

fn unstack(f: &Field) -> Result<Vec<Field>> {
    let s = f.shape();
    let per = f.len() / s[0];
    (0..s[0])
        .map(|i| Field::new(s[1..].to_vec(), f.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

impl PairModel for Stage1Model<'_> {
    type Cond = Prompt;

    fn predict(&self, x: &Field, y: &Field, t: usize, conds: &[Option<Prompt>]) -> Result<(Field, Field)> {
        let xs = unstack(x)?;
        let ys = unstack(y)?;
        let xr: Vec<&Field> = xs.iter().collect();
        let yr: Vec<&Field> = ys.iter().collect();
        let pr: Vec<Option<&Prompt>> = conds.iter().map(|c| c.as_ref()).collect();
        self.run(&xr, &yr, t, &pr)
    }
}

/// One training example: structure map, one-hot label and its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: Field,
    pub y0: Field,
    pub prompt: Prompt,
}

impl TrainItem {
    /// Stage-1 prompts carry no staining tag.
    pub fn from_sample(s: &LabeledSample, vocab: &Vocabulary) -> Result<Self> {
        let mut prompt = parse_prompt(&s.meta.prompt, vocab)?;
        prompt.staining = None;
        Ok(TrainItem {
            x0: make_structure_map(&s.label, &s.instance)?,
            y0: one_hot(&s.label, vocab.k())?,
            prompt,
        })
    }
}

/// Random quantities drawn for one item of a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub state: PairState,
    pub eps: Field,
    pub drop_prompt: bool,
}

pub fn draw(
    item: &TrainItem,
    cfg: &Stage1Config,
    rs: &mut RandomStream,
    sch_g: &Schedule,
    sch_c: &Schedule,
) -> Result<Draw> {
    let t = rs.int_inclusive(1, sch_g.len());
    let drop_prompt = rs.bernoulli(cfg.p_drop);
    let (state, eps) = forward_pair(&item.x0, &item.y0, t, rs, sch_g, sch_c)?;
    Ok(Draw {
        state,
        eps,
        drop_prompt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub eps_mse: f64,
    /// Categorical bound plus auxiliary cross-entropy, before `λ_cat`.
    pub cat: f64,
}

fn one_hot_index(row: &[f32]) -> Result<usize> {
    let mut idx = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 && idx.is_none() {
            idx = Some(i);
        } else {
            ensure!(v == 0.0, Invalid, "label row {:?} is not one-hot", row);
        }
    }
    idx.ok_or_else(|| Error::Invalid(format!("label row {row:?} is not one-hot")))
}

/// Batch loss from raw network outputs `[B, 3+K, H, W]` and, optionally,
/// its gradient with respect to those outputs.
fn output_loss<T: Real>(
    out: &[T],
    shape: &[usize],
    items: &[(&Field, &Field, &Field, usize)],
    cfg: &Stage1Config,
    sch_c: &Schedule,
    want_grad: bool,
) -> Result<(LossParts, Vec<T>)> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (k, hw) = (cfg.k, h * w);
    ensure!(c == 3 + k && items.len() == b, Shape, "output {:?} for {} items", shape, items.len());
    let mut grad = if want_grad { vec![T::zero(); out.len()] } else { Vec::new() };
    let (mut eps_sum, mut cat_sum) = (0.0, 0.0);
    let at = |n: usize, ch: usize, p: usize| (n * c + ch) * hw + p;
    let mut logits = vec![0.0; k];
    let mut g = vec![0.0; k];
    for (n, &(eps, y0, yt, t)) in items.iter().enumerate() {
        let (alpha, ab_prev) = (sch_c.alpha(t), sch_c.alpha_bar(t - 1));
        let mut e_item = 0.0;
        let mut c_item = 0.0;
        for p in 0..hw {
            for ch in 0..3 {
                let d = out[at(n, ch, p)].as_f64() - eps.data()[p * 3 + ch] as f64;
                e_item += d * d;
                if want_grad {
                    grad[at(n, ch, p)] = T::from_f64(2.0 * d / (3 * hw * b) as f64);
                }
            }
            for (j, l) in logits.iter_mut().enumerate() {
                *l = out[at(n, 3 + j, p)].as_f64();
            }
            let i0 = one_hot_index(&y0.data()[p * k..(p + 1) * k])?;
            let it = one_hot_index(&yt.data()[p * k..(p + 1) * k])?;
            let (kl, ce) = cat_pixel_loss(
                &logits,
                i0,
                it,
                alpha,
                ab_prev,
                cfg.lambda_aux,
                if want_grad { Some(&mut g) } else { None },
            );
            c_item += kl + cfg.lambda_aux * ce;
            if want_grad {
                let s = cfg.lambda_cat / (hw * b) as f64;
                for j in 0..k {
                    grad[at(n, 3 + j, p)] = T::from_f64(g[j] * s);
                }
            }
        }
        eps_sum += e_item / (3 * hw) as f64;
        cat_sum += c_item / hw as f64;
    }
    let (eps_mse, cat) = (eps_sum / b as f64, cat_sum / b as f64);
    let total = eps_mse + cfg.lambda_cat * cat;
    ensure!(total.is_finite(), NonFinite, "stage-1 loss");
    Ok((LossParts { total, eps_mse, cat }, grad))
}

/// Loss of given predictions against one drawn item (all arrays unbatched,
/// channel-last). Used to evaluate externally supplied predictions.
pub fn prediction_loss(
    cfg: &Stage1Config,
    item: &TrainItem,
    d: &Draw,
    eps_hat: &Field,
    logits: &Field,
    sch_c: &Schedule,
) -> Result<LossParts> {
    let s = item.x0.shape();
    let (h, w) = (s[0], s[1]);
    ensure!(eps_hat.shape() == [h, w, 3] && logits.shape() == [h, w, cfg.k], Shape, "prediction shapes");
    let mut nhwc = Vec::with_capacity(h * w * (3 + cfg.k));
    for (e, l) in eps_hat.rows().zip(logits.rows()) {
        nhwc.extend_from_slice(e);
        nhwc.extend_from_slice(l);
    }
    let t = nhwc_to_nchw::<f64>(&nhwc, 1, h, w, 3 + cfg.k);
    let items = [(&d.eps, &item.y0, &d.state.y, d.state.t)];
    Ok(output_loss(&t.data, &t.shape, &items, cfg, sch_c, false)?.0)
}

/// Loss and parameter gradients for a batch with fixed draws.
pub fn loss_with_draws<T: Real>(
    cfg: &Stage1Config,
    params: &ParamSet<T>,
    items: &[&TrainItem],
    draws: &[Draw],
    sch_c: &Schedule,
    want_grad: bool,
) -> Result<(LossParts, BTreeMap<String, Vec<T>>)> {
    ensure!(!items.is_empty() && items.len() == draws.len(), Invalid, "empty or ragged batch");
    let mut g = if want_grad { Graph::new() } else { Graph::inference() };
    g.bind(params, "", want_grad);
    let xs: Vec<&Field> = draws.iter().map(|d| &d.state.x).collect();
    let ys: Vec<&Field> = draws.iter().map(|d| &d.state.y).collect();
    let ts: Vec<usize> = draws.iter().map(|d| d.state.t).collect();
    let prompts: Vec<Option<&Prompt>> = items
        .iter()
        .zip(draws)
        .map(|(it, d)| if d.drop_prompt { None } else { Some(&it.prompt) })
        .collect();
    let out = forward_graph(&mut g, cfg, &xs, &ys, &ts, &prompts)?;
    let shape = g.shape(out).to_vec();
    let tuples: Vec<_> = items
        .iter()
        .zip(draws)
        .map(|(it, d)| (&d.eps, &it.y0, &d.state.y, d.state.t))
        .collect();
    let (parts, grad) = output_loss(g.value(out), &shape, &tuples, cfg, sch_c, want_grad)?;
    if !want_grad {
        return Ok((parts, BTreeMap::new()));
    }
    let root = g.scalar_loss(out, T::from_f64(parts.total), grad);
    let grads = g.backward(root);
    Ok((parts, g.param_grads(&grads)))
}

/// Draws `t`, `ε`, the noisy label and prompt dropout per item from `rs`,
/// then evaluates the loss.
pub fn loss<T: Real>(
    cfg: &Stage1Config,
    params: &ParamSet<T>,
    items: &[&TrainItem],
    rs: &mut RandomStream,
    sch_g: &Schedule,
    sch_c: &Schedule,
) -> Result<(LossParts, BTreeMap<String, Vec<T>>)> {
    let draws = items
        .iter()
        .map(|it| draw(it, cfg, rs, sch_g, sch_c))
        .collect::<Result<Vec<_>>>()?;
    loss_with_draws(cfg, params, items, &draws, sch_c, true)
}

/// Trains in place; `on_checkpoint(step, params, ema)` runs every
/// `tc.checkpoint_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &Stage1Config,
    params: &mut ParamSet<f32>,
    ema: &mut Ema<f32>,
    data: &[TrainItem],
    tc: &TrainConfig,
    rs: &RandomStream,
    sch_g: &Schedule,
    sch_c: &Schedule,
    on_checkpoint: impl FnMut(usize, &ParamSet<f32>, &Ema<f32>) -> Result<()>,
) -> Result<Vec<CurvePoint>> {
    ensure!(!data.is_empty(), Invalid, "empty training set");
    ensure!(tc.batch > 0, Invalid, "batch size must be positive");
    cfg.validate()?;
    fit(
        params,
        ema,
        tc,
        rs,
        |p, _, rs| {
            let batch: Vec<&TrainItem> = (0..tc.batch).map(|_| &data[rs.int_inclusive(0, data.len() - 1)]).collect();
            let (parts, grads) = loss(cfg, p, &batch, rs, sch_g, sch_c)?;
            Ok((parts.total, grads))
        },
        on_checkpoint,
    )
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub params: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the tiny configuration against central
/// differences in double precision, for every parameter.
pub fn gradient_check(seed: u64) -> Result<GradCheck> {
    let vocab = Vocabulary {
        class_names: vec!["background".into(), "small-round".into(), "large-elongated".into()],
        ..Vocabulary::default()
    };
    let cfg = Stage1Config::tiny(&vocab);
    let rs = RandomStream::new(seed);
    let mut params: ParamSet<f64> = cfg.init(&mut rs.child("init"));
    // A zero output layer would block every upstream gradient.
    for name in ["unet.out.w", "unet.out.b"] {
        let t = params.get_mut(name).unwrap();
        let fresh = normal_init::<f64>(&t.shape.clone(), 0.3, &mut rs.child(name));
        *t = fresh;
    }
    let sch_g = crate::kernels::linear_schedule(20, 1e-3, 0.2)?;
    let sch_c = crate::kernels::cosine_schedule(20, 0.008)?;
    let mut items = Vec::new();
    let mut draws = Vec::new();
    for i in 0..2u64 {
        let mut irs = rs.child_idx("item", i);
        let mut label = LabelGrid::new(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                label.set(r, c, irs.int_inclusive(0, 2) as u8);
            }
        }
        let x0 = crate::rng::draw_uniform(&mut irs, &[8, 8, 3])?.map(|v| 2.0 * v - 1.0)?;
        let item = TrainItem {
            x0,
            y0: one_hot(&label, 3)?,
            prompt: Prompt {
                tissue: i as usize,
                bucket: crate::conditioning::Bucket::ALL[i as usize + 1],
                classes: [1 + i as u8].into(),
                staining: None,
            },
        };
        let mut d = draw(&item, &cfg, &mut irs, &sch_g, &sch_c)?;
        d.drop_prompt = i == 1;
        draws.push(d);
        items.push(item);
    }
    let refs: Vec<&TrainItem> = items.iter().collect();
    let (_, analytic) = loss_with_draws(&cfg, &params, &refs, &draws, &sch_c, true)?;
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.expect(name).data.len();
        let a = analytic.get(name);
        for i in 0..n {
            let orig = params.expect(name).data[i];
            params.get_mut(name).unwrap().data[i] = orig + h;
            let lp = loss_with_draws(&cfg, &params, &refs, &draws, &sch_c, false)?.0.total;
            params.get_mut(name).unwrap().data[i] = orig - h;
            let lm = loss_with_draws(&cfg, &params, &refs, &draws, &sch_c, false)?.0.total;
            params.get_mut(name).unwrap().data[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let an = a.map_or(0.0, |g| g[i]);
            let err = relative_error(an, numeric, 1e-6);
            checked += 1;
            if err > max_err {
                max_err = err;
                worst = format!("{name}[{i}]: analytic {an:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(GradCheck {
        params: params.num_scalars(),
        checked,
        max_rel_err: max_err,
        worst,
    })
}

/// Trained stage-1 weights plus everything needed to rebuild the model.
#[derive(Debug, Clone)]
pub struct Stage1Checkpoint {
    pub cfg: Stage1Config,
    pub vocab: Vocabulary,
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub step: u64,
}

fn schedule_tag(sch_g: &Schedule, sch_c: &Schedule) -> String {
    format!("{}+{}", sch_g.id(), sch_c.id())
}

impl Stage1Checkpoint {
    pub fn to_checkpoint(&self, sch_g: &Schedule, sch_c: &Schedule) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (prefix, ps) in [("model.", &self.params), ("ema.", &self.ema)] {
            for (n, f) in ps.to_tensors()? {
                tensors.push((format!("{prefix}{n}"), f));
            }
        }
        let mut extra = BTreeMap::new();
        extra.insert("kind".into(), serde_json::json!("stage1"));
        extra.insert("config".into(), serde_json::to_value(self.cfg)?);
        extra.insert("vocabulary".into(), serde_json::to_value(&self.vocab)?);
        Ok(Checkpoint {
            tensors,
            meta: CheckpointMeta {
                step: self.step,
                schedule: schedule_tag(sch_g, sch_c),
                config_hash: hash_json(&self.cfg)?,
                frozen: false,
                extra,
            },
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |key: &str| {
            ck.meta
                .extra
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{key}'")))
        };
        ensure!(get("kind")? == "stage1", Format, "not a stage-1 checkpoint");
        let cfg: Stage1Config = serde_json::from_value(get("config")?)?;
        let vocab: Vocabulary = serde_json::from_value(get("vocabulary")?)?;
        ensure!(hash_json(&cfg)? == ck.meta.config_hash, Format, "config hash mismatch");
        let template: ParamSet<f32> = cfg.init(&mut RandomStream::new(0));
        let only = |prefix: &str| Checkpoint {
            tensors: ck.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect(),
            meta: ck.meta.clone(),
        };
        Ok(Stage1Checkpoint {
            params: ParamSet::load_matching(&template, &only("model."), "model.")?,
            ema: ParamSet::load_matching(&template, &only("ema."), "ema.")?,
            cfg,
            vocab,
            step: ck.meta.step,
        })
    }
}

/// Samples one (structure map, label) pair per condition with the EMA weights.
pub fn sample_pairs(
    ck: &Stage1Checkpoint,
    conds: &[Option<Prompt>],
    h: usize,
    w: usize,
    steps: usize,
    guidance: f64,
    streams: &mut [RandomStream],
    sch_g: &Schedule,
    sch_c: &Schedule,
) -> Result<Vec<(Field, LabelGrid)>> {
    let stride = ddim_stride(sch_g.len(), steps);
    let sampler = PairSampler {
        stride: &stride,
        sch_g,
        sch_c,
        guidance,
        h,
        w,
        k: ck.cfg.k,
    };
    let model = Stage1Model {
        cfg: &ck.cfg,
        params: &ck.ema,
    };
    sampler.sample(&model, conds, streams)
}
