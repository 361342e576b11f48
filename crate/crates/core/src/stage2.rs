//! Image synthesis in a small latent space: a deterministic autoencoder, a
//! prompt-conditioned base latent denoiser that is frozen after training, and
//! a control branch that injects the semantic condition through
//! zero-initialised 1×1 connections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_json, Checkpoint, CheckpointMeta};
use crate::conditioning::{Prompt, PromptTables, EMBED_WIDTH};
use crate::dataset::Vocabulary;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::kernels::{ddim_step_clipped, ddim_stride, q_sample_gaussian, Schedule};
use crate::nn::unet::{conv, Encoded};
use crate::nn::{
    constant, conv_init, fit, nchw_to_nhwc, nhwc_to_nchw, CurvePoint, Ema, Graph, ParamSet, TrainConfig, UNet,
    UNetConfig, Var,
};
use crate::rng::{draw_normal, RandomStream};

fn stack(fields: &[&Field]) -> Vec<f32> {
    fields.iter().flat_map(|f| f.data().iter().copied()).collect()
}

fn batch_input(g: &mut Graph<'_, f32>, fields: &[&Field]) -> Result<Var> {
    ensure!(!fields.is_empty(), Invalid, "empty batch");
    let s = fields[0].shape();
    ensure!(s.len() == 3, Shape, "expected [H, W, C], got {:?}", s);
    for f in fields {
        ensure!(f.shape() == s, Shape, "batch item {:?} vs {:?}", f.shape(), s);
    }
    Ok(g.constant(nhwc_to_nchw(&stack(fields), fields.len(), s[0], s[1], s[2])))
}

fn split_output(g: &Graph<'_, f32>, v: Var) -> Result<Vec<Field>> {
    let shape = g.shape(v).to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let all = nchw_to_nhwc(g.value(v), &shape, 0, c);
    let per = h * w * c;
    (0..b)
        .map(|i| Field::new(vec![h, w, c], all[i * per..(i + 1) * per].to_vec()))
        .collect()
}

fn meta_value<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a serde_json::Value> {
    ck.meta
        .extra
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{key}'")))
}

fn check_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    ensure!(meta_value(ck, "kind")? == kind, Format, "expected a {kind} checkpoint");
    Ok(())
}

// ---------------------------------------------------------------- autoencoder

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    pub width: usize,
    pub latent_ch: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { width: 32, latent_ch: 4 }
    }
}

impl AeConfig {
    pub fn init(&self, rs: &mut RandomStream) -> ParamSet<f32> {
        let (w, l) = (self.width, self.latent_ch);
        let mut ps = ParamSet::new();
        for (name, cin, cout, k) in [
            ("enc.c1", 3, w, 3),
            ("enc.d1", w, w, 3),
            ("enc.c2", w, w, 3),
            ("enc.d2", w, w, 3),
            ("enc.out", w, l, 1),
            ("dec.in", l, w, 3),
            ("dec.c1", w, w, 3),
            ("dec.c2", w, w, 3),
            ("dec.c3", w, w, 3),
            ("dec.out", w, 3, 3),
        ] {
            conv_init(&mut ps, name, cin, cout, k, rs);
        }
        ps
    }
}

fn ae_encode_graph(g: &mut Graph<'_, f32>, x: Var) -> Var {
    let h = conv(g, "enc.c1", x, 1, 1);
    let h = g.silu(h);
    let h = conv(g, "enc.d1", h, 2, 1);
    let h = g.silu(h);
    let h = conv(g, "enc.c2", h, 1, 1);
    let h = g.silu(h);
    let h = conv(g, "enc.d2", h, 2, 1);
    let h = g.silu(h);
    conv(g, "enc.out", h, 1, 0)
}

fn ae_decode_graph(g: &mut Graph<'_, f32>, z: Var) -> Var {
    let h = conv(g, "dec.in", z, 1, 1);
    let h = g.silu(h);
    let h = conv(g, "dec.c1", h, 1, 1);
    let h = g.silu(h);
    let h = g.upsample2x(h);
    let h = conv(g, "dec.c2", h, 1, 1);
    let h = g.silu(h);
    let h = g.upsample2x(h);
    let h = conv(g, "dec.c3", h, 1, 1);
    let h = g.silu(h);
    conv(g, "dec.out", h, 1, 1)
}

/// Trained autoencoder; `scale` multiplies raw latents on encode.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: AeConfig,
    pub params: ParamSet<f32>,
    pub scale: f64,
}

impl Autoencoder {
    /// Scaled latents `[H/4, W/4, latent_ch]` of images in `[0, 1]`.
    pub fn encode(&self, images: &[&Field]) -> Result<Vec<Field>> {
        for im in images {
            ensure!(
                im.shape().len() == 3 && im.shape()[2] == 3,
                Shape,
                "image must be [H, W, 3], got {:?}",
                im.shape()
            );
        }
        let mut g = Graph::inference();
        g.bind(&self.params, "", false);
        let x = batch_input(&mut g, images)?;
        let z = ae_encode_graph(&mut g, x);
        let z = g.scale(z, self.scale);
        g.check_finite(z, "autoencoder latent")?;
        split_output(&g, z)
    }

    /// Images clamped to `[0, 1]` from scaled latents.
    pub fn decode(&self, latents: &[&Field]) -> Result<Vec<Field>> {
        for z in latents {
            ensure!(
                z.shape().len() == 3 && z.shape()[2] == self.cfg.latent_ch,
                Shape,
                "latent must be [h, w, {}], got {:?}",
                self.cfg.latent_ch,
                z.shape()
            );
        }
        let mut g = Graph::inference();
        g.bind(&self.params, "", false);
        let z = batch_input(&mut g, latents)?;
        let z = g.scale(z, 1.0 / self.scale);
        let x = ae_decode_graph(&mut g, z);
        g.check_finite(x, "autoencoder output")?;
        split_output(&g, x)?
            .into_iter()
            .map(|f| f.map(|v| v.clamp(0.0, 1.0)))
            .collect()
    }

    /// Mean squared reconstruction error over all pixels and channels.
    pub fn reconstruction_mse(&self, images: &[Field]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in images.chunks(32) {
            let refs: Vec<&Field> = chunk.iter().collect();
            let z = self.encode(&refs)?;
            let zr: Vec<&Field> = z.iter().collect();
            for (x, y) in chunk.iter().zip(self.decode(&zr)?) {
                sum += x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
                n += x.len();
            }
        }
        Ok(sum / n.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = BTreeMap::new();
        extra.insert("kind".into(), serde_json::json!("autoencoder"));
        extra.insert("config".into(), serde_json::to_value(self.cfg)?);
        extra.insert("scale".into(), serde_json::json!(self.scale));
        Ok(Checkpoint {
            tensors: self.params.to_tensors()?,
            meta: CheckpointMeta {
                step: 0,
                schedule: String::new(),
                config_hash: hash_json(&self.cfg)?,
                frozen: true,
                extra,
            },
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_kind(ck, "autoencoder")?;
        let cfg: AeConfig = serde_json::from_value(meta_value(ck, "config")?.clone())?;
        let scale = meta_value(ck, "scale")?
            .as_f64()
            .ok_or_else(|| Error::Format("scale is not a number".into()))?;
        ensure!(scale > 0.0 && scale.is_finite(), Format, "latent scale {scale} must be positive");
        let params = ParamSet::load_matching(&cfg.init(&mut RandomStream::new(0)), ck, "")?;
        Ok(Autoencoder { cfg, params, scale })
    }
}

/// Trains the autoencoder with an L2 reconstruction loss, then sets the
/// latent scale to `1 / std` of the raw training latents.
pub fn train_autoencoder(
    cfg: AeConfig,
    images: &[Field],
    tc: &TrainConfig,
    rs: &RandomStream,
) -> Result<(Autoencoder, Vec<CurvePoint>)> {
    ensure!(!images.is_empty(), Invalid, "no training images");
    let mut params = cfg.init(&mut rs.child("init"));
    // The reconstruction target is deterministic; averaging weights buys nothing.
    let mut ema = Ema::new(&ParamSet::new(), 0.0);
    let curve = fit(
        &mut params,
        &mut ema,
        tc,
        &rs.child("train"),
        |p, _, rs| {
            let batch: Vec<&Field> = (0..tc.batch)
                .map(|_| &images[rs.int_inclusive(0, images.len() - 1)])
                .collect();
            let mut g = Graph::new();
            g.bind(p, "", true);
            let x = batch_input(&mut g, &batch)?;
            let z = ae_encode_graph(&mut g, x);
            let y = ae_decode_graph(&mut g, z);
            let target: Vec<f32> = g.value(x).to_vec();
            let l = g.mse(y, &target);
            let loss = g.scalar(l) as f64;
            let grads = g.backward(l);
            Ok((loss, g.param_grads(&grads)))
        },
        |_, _, _| Ok(()),
    )?;
    let mut ae = Autoencoder { cfg, params, scale: 1.0 };
    let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
    for chunk in images.chunks(64) {
        let refs: Vec<&Field> = chunk.iter().collect();
        for z in ae.encode(&refs)? {
            for &v in z.data() {
                s += v as f64;
                s2 += (v as f64).powi(2);
                n += 1;
            }
        }
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt();
    ensure!(std > 0.0 && std.is_finite(), NonFinite, "latent spread {std}");
    ae.scale = 1.0 / std;
    Ok((ae, curve))
}

// ----------------------------------------------------------- base denoiser

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub unet: UNetConfig,
    pub tables: PromptTables,
    pub p_drop: f64,
}

impl BaseConfig {
    pub fn new(vocab: &Vocabulary, latent_ch: usize) -> Self {
        BaseConfig {
            unet: UNetConfig {
                in_ch: latent_ch,
                out_ch: latent_ch,
                width: 64,
                depth: 1,
                blocks: 2,
                emb_width: EMBED_WIDTH,
                groups: 8,
                cond_width: EMBED_WIDTH,
            },
            tables: PromptTables::new(vocab),
            p_drop: 0.1,
        }
    }

    pub fn init(&self, rs: &mut RandomStream) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.absorb("unet.", self.unet.init(&mut rs.child("unet")));
        ps.absorb("prompt.", self.tables.init(&mut rs.child("prompt")));
        ps
    }
}

/// Base latent denoiser; `frozen` is set once training has finished.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub cfg: BaseConfig,
    pub params: ParamSet<f32>,
    pub frozen: bool,
    pub step: u64,
}

fn base_prefix_graph(
    g: &mut Graph<'_, f32>,
    cfg: &BaseConfig,
    z: &[&Field],
    ts: &[usize],
    prompts: &[Option<&Prompt>],
) -> Result<(Var, Var, Encoded, Var)> {
    ensure!(z.len() == ts.len() && z.len() == prompts.len(), Invalid, "ragged batch");
    let zt = batch_input(g, z)?;
    let c = cfg.tables.embed(g, "prompt.", prompts)?;
    let net = UNet::new(&cfg.unet, "unet.");
    let emb = net.embed(g, ts, Some(c))?;
    let enc = net.encode(g, zt, emb)?;
    Ok((zt, c, enc, emb))
}

impl BaseModel {
    /// `ε̂` for a batch of scaled noisy latents.
    pub fn forward(&self, z: &[&Field], ts: &[usize], prompts: &[Option<&Prompt>]) -> Result<Vec<Field>> {
        let mut g = Graph::inference();
        g.bind(&self.params, "", false);
        let (_, _, enc, emb) = base_prefix_graph(&mut g, &self.cfg, z, ts, prompts)?;
        let out = UNet::new(&self.cfg.unet, "unet.").decode(&mut g, &enc, emb)?;
        split_output(&g, out)
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn to_checkpoint(&self, sch: &Schedule) -> Result<Checkpoint> {
        let mut extra = BTreeMap::new();
        extra.insert("kind".into(), serde_json::json!("base"));
        extra.insert("config".into(), serde_json::to_value(self.cfg)?);
        Ok(Checkpoint {
            tensors: self.params.to_tensors()?,
            meta: CheckpointMeta {
                step: self.step,
                schedule: sch.id(),
                config_hash: hash_json(&self.cfg)?,
                frozen: self.frozen,
                extra,
            },
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_kind(ck, "base")?;
        let cfg: BaseConfig = serde_json::from_value(meta_value(ck, "config")?.clone())?;
        ensure!(hash_json(&cfg)? == ck.meta.config_hash, Format, "config hash mismatch");
        let params = ParamSet::load_matching(&cfg.init(&mut RandomStream::new(0)), ck, "")?;
        Ok(BaseModel {
            cfg,
            params,
            frozen: ck.meta.frozen,
            step: ck.meta.step,
        })
    }
}

/// One latent training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentItem {
    /// Scaled latent `[h, w, C]`.
    pub z0: Field,
    pub prompt: Prompt,
    /// Semantic condition `[H, W, K+3]`, needed only by the control branch.
    pub cs: Option<Field>,
}

fn noised_batch(
    data: &[LatentItem],
    batch: usize,
    p_drop: f64,
    rs: &mut RandomStream,
    sch: &Schedule,
) -> Result<(Vec<usize>, Vec<Field>, Vec<Field>, Vec<usize>, Vec<bool>)> {
    let (mut idx, mut zs, mut eps, mut ts, mut drop) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..batch {
        let i = rs.int_inclusive(0, data.len() - 1);
        let t = rs.int_inclusive(1, sch.len());
        let d = rs.bernoulli(p_drop);
        let e = draw_normal(rs, data[i].z0.shape())?;
        zs.push(q_sample_gaussian(&data[i].z0, t, &e, sch)?);
        eps.push(e);
        idx.push(i);
        ts.push(t);
        drop.push(d);
    }
    Ok((idx, zs, eps, ts, drop))
}

fn eps_target(eps: &[Field]) -> Vec<f32> {
    let s = eps[0].shape();
    nhwc_to_nchw::<f32>(&stack(&eps.iter().collect::<Vec<_>>()), eps.len(), s[0], s[1], s[2]).data
}

/// Trains the base denoiser on ε-MSE and returns it frozen, with EMA weights.
pub fn train_base(
    cfg: BaseConfig,
    data: &[LatentItem],
    tc: &TrainConfig,
    rs: &RandomStream,
    sch: &Schedule,
) -> Result<(BaseModel, Vec<CurvePoint>)> {
    ensure!(!data.is_empty(), Invalid, "no latent training data");
    let mut params = cfg.init(&mut rs.child("init"));
    let mut ema = Ema::new(&params, tc.ema_decay);
    let curve = fit(
        &mut params,
        &mut ema,
        tc,
        &rs.child("train"),
        |p, _, rs| {
            let (idx, zs, eps, ts, drop) = noised_batch(data, tc.batch, cfg.p_drop, rs, sch)?;
            let prompts: Vec<Option<&Prompt>> = idx
                .iter()
                .zip(&drop)
                .map(|(&i, &d)| if d { None } else { Some(&data[i].prompt) })
                .collect();
            let mut g = Graph::new();
            g.bind(p, "", true);
            let zr: Vec<&Field> = zs.iter().collect();
            let (_, _, enc, emb) = base_prefix_graph(&mut g, &cfg, &zr, &ts, &prompts)?;
            let out = UNet::new(&cfg.unet, "unet.").decode(&mut g, &enc, emb)?;
            let l = g.mse(out, &eps_target(&eps));
            let loss = g.scalar(l) as f64;
            let grads = g.backward(l);
            Ok((loss, g.param_grads(&grads)))
        },
        |_, _, _| Ok(()),
    )?;
    Ok((
        BaseModel {
            cfg,
            params: ema.params,
            frozen: true,
            step: tc.steps as u64,
        },
        curve,
    ))
}

/// Mean ε-MSE of a base model on fixed draws from `rs`.
pub fn base_validation_loss(base: &BaseModel, data: &[LatentItem], n: usize, rs: &RandomStream, sch: &Schedule) -> Result<f64> {
    let mut rs = rs.clone();
    let (idx, zs, eps, ts, _) = noised_batch(data, n, 0.0, &mut rs, sch)?;
    let zr: Vec<&Field> = zs.iter().collect();
    let prompts: Vec<Option<&Prompt>> = idx.iter().map(|&i| Some(&data[i].prompt)).collect();
    let out = base.forward(&zr, &ts, &prompts)?;
    let mut s = 0.0;
    let mut c = 0usize;
    for (o, e) in out.iter().zip(&eps) {
        s += o.data().iter().zip(e.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        c += o.len();
    }
    Ok(s / c as f64)
}

// ----------------------------------------------------------- control branch

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Channels of the semantic condition, `K + 3`.
    pub cs_ch: usize,
    pub cs_width: usize,
    /// Strided convolutions from image to latent resolution.
    pub cs_downsamplings: usize,
    pub p_drop: f64,
}

impl ControlConfig {
    pub fn new(k: usize) -> Self {
        ControlConfig {
            cs_ch: k + 3,
            cs_width: 32,
            cs_downsamplings: 2,
            p_drop: 0.0,
        }
    }
}

/// Trainable branch: `copy.*` (initialised from the base encoder), `cs.*`
/// and the zero-initialised connections `zc.*`.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub cfg: ControlConfig,
    pub params: ParamSet<f32>,
    pub step: u64,
}

fn is_encoder_param(name: &str) -> bool {
    ["time.", "cond.", "in.", "enc", "down"].iter().any(|p| name.starts_with(p))
}

impl ControlBranch {
    pub fn init(cfg: ControlConfig, base: &BaseModel, rs: &mut RandomStream) -> Self {
        let mut ps = ParamSet::new();
        for (name, t) in base.params.iter() {
            if let Some(rest) = name.strip_prefix("unet.") {
                if is_encoder_param(rest) {
                    ps.insert(format!("copy.{rest}"), t.clone());
                }
            }
        }
        let w = cfg.cs_width;
        conv_init(&mut ps, "cs.in", cfg.cs_ch, w, 3, rs);
        for i in 0..cfg.cs_downsamplings {
            conv_init(&mut ps, &format!("cs.down{i}"), w, w, 3, rs);
        }
        conv_init(&mut ps, "cs.out", w, base.cfg.unet.in_ch, 3, rs);
        let u = &base.cfg.unet;
        let mut zero = |name: String, ch: usize| {
            ps.insert(format!("{name}.w"), constant(&[ch, ch, 1, 1], 0.0));
            ps.insert(format!("{name}.b"), constant(&[ch], 0.0));
        };
        for l in 0..u.depth {
            zero(format!("zc.skip{l}"), u.channels(l));
        }
        zero("zc.mid".into(), u.channels(u.depth));
        ControlBranch { cfg, params: ps, step: 0 }
    }

    pub fn to_checkpoint(&self, base: &BaseModel) -> Result<Checkpoint> {
        let mut extra = BTreeMap::new();
        extra.insert("kind".into(), serde_json::json!("control"));
        extra.insert("config".into(), serde_json::to_value(self.cfg)?);
        extra.insert("base_hash".into(), serde_json::json!(base.content_hash()));
        Ok(Checkpoint {
            tensors: self.params.to_tensors()?,
            meta: CheckpointMeta {
                step: self.step,
                schedule: String::new(),
                config_hash: hash_json(&self.cfg)?,
                frozen: false,
                extra,
            },
        })
    }

    /// Loads a branch and checks it was trained against `base`.
    pub fn from_checkpoint(ck: &Checkpoint, base: &BaseModel) -> Result<Self> {
        check_kind(ck, "control")?;
        let cfg: ControlConfig = serde_json::from_value(meta_value(ck, "config")?.clone())?;
        ensure!(
            meta_value(ck, "base_hash")? == &serde_json::json!(base.content_hash()),
            Format,
            "control branch was trained against a different base model"
        );
        let template = ControlBranch::init(cfg, base, &mut RandomStream::new(0));
        Ok(ControlBranch {
            cfg,
            params: ParamSet::load_matching(&template.params, ck, "")?,
            step: ck.meta.step,
        })
    }
}

/// Parameter prefix of the branch inside a combined graph.
const BRANCH: &str = "branch.";

fn controlled_graph(
    g: &mut Graph<'_, f32>,
    base: &BaseModel,
    branch_cfg: &ControlConfig,
    z: &[&Field],
    ts: &[usize],
    prompts: &[Option<&Prompt>],
    cs: &[&Field],
) -> Result<Var> {
    ensure!(cs.len() == z.len(), Invalid, "{} conditions for {} latents", cs.len(), z.len());
    let ucfg = &base.cfg.unet;
    let (zt, c, mut enc, emb) = base_prefix_graph(g, &base.cfg, z, ts, prompts)?;
    let s = batch_input(g, cs)?;
    ensure!(
        g.shape(s)[1] == branch_cfg.cs_ch,
        Shape,
        "semantic condition has {} channels, expected {}",
        g.shape(s)[1],
        branch_cfg.cs_ch
    );
    let mut h = conv(g, &format!("{BRANCH}cs.in"), s, 1, 1);
    h = g.silu(h);
    for i in 0..branch_cfg.cs_downsamplings {
        h = conv(g, &format!("{BRANCH}cs.down{i}"), h, 2, 1);
        h = g.silu(h);
    }
    let e = conv(g, &format!("{BRANCH}cs.out"), h, 1, 1);
    ensure!(
        g.shape(e) == g.shape(zt),
        Shape,
        "condition embedding {:?} does not match latent grid {:?}",
        g.shape(e),
        g.shape(zt)
    );
    let x = g.add(zt, e);
    let copy = UNet::new(ucfg, &format!("{BRANCH}copy."));
    let bemb = copy.embed(g, ts, Some(c))?;
    let benc = copy.encode(g, x, bemb)?;
    for l in 0..ucfg.depth {
        let r = conv(g, &format!("{BRANCH}zc.skip{l}"), benc.skips[l], 1, 0);
        enc.skips[l] = g.add(enc.skips[l], r);
    }
    let r = conv(g, &format!("{BRANCH}zc.mid"), benc.mid, 1, 0);
    enc.mid = g.add(enc.mid, r);
    UNet::new(ucfg, "unet.").decode(g, &enc, emb)
}

/// `ε̂` of the base model steered by the branch and semantic conditions.
pub fn controlled_forward(
    base: &BaseModel,
    branch: &ControlBranch,
    z: &[&Field],
    ts: &[usize],
    prompts: &[Option<&Prompt>],
    cs: &[&Field],
) -> Result<Vec<Field>> {
    let mut g = Graph::inference();
    g.bind(&base.params, "", false);
    g.bind(&branch.params, BRANCH, false);
    let out = controlled_graph(&mut g, base, &branch.cfg, z, ts, prompts, cs)?;
    split_output(&g, out)
}

/// Fine-tunes only the branch. The base weights are checked to be
/// bit-identical afterwards.
pub fn finetune_control(
    base: &BaseModel,
    branch: &mut ControlBranch,
    data: &[LatentItem],
    tc: &TrainConfig,
    rs: &RandomStream,
    sch: &Schedule,
) -> Result<Vec<CurvePoint>> {
    ensure!(base.frozen, Invalid, "the base model must be frozen before fine-tuning the branch");
    ensure!(!data.is_empty(), Invalid, "no control training data");
    ensure!(data.iter().all(|d| d.cs.is_some()), Invalid, "every item needs a semantic condition");
    let before = base.content_hash();
    let cfg = branch.cfg;
    let mut params = std::mem::take(&mut branch.params);
    let mut ema = Ema::new(&ParamSet::new(), 0.0);
    let result = fit(
        &mut params,
        &mut ema,
        tc,
        rs,
        |p, _, rs| {
            let (idx, zs, eps, ts, drop) = noised_batch(data, tc.batch, cfg.p_drop, rs, sch)?;
            let prompts: Vec<Option<&Prompt>> = idx
                .iter()
                .zip(&drop)
                .map(|(&i, &d)| if d { None } else { Some(&data[i].prompt) })
                .collect();
            let cs: Vec<&Field> = idx.iter().map(|&i| data[i].cs.as_ref().unwrap()).collect();
            let mut g = Graph::new();
            g.bind(&base.params, "", false);
            g.bind(p, BRANCH, true);
            let zr: Vec<&Field> = zs.iter().collect();
            let out = controlled_graph(&mut g, base, &cfg, &zr, &ts, &prompts, &cs)?;
            let l = g.mse(out, &eps_target(&eps));
            let loss = g.scalar(l) as f64;
            let grads = g.backward(l);
            let grads = g
                .param_grads(&grads)
                .into_iter()
                .filter_map(|(n, v)| n.strip_prefix(BRANCH).map(|r| (r.to_string(), v)))
                .collect();
            Ok((loss, grads))
        },
        |_, _, _| Ok(()),
    );
    branch.params = params;
    let curve = result?;
    branch.step += tc.steps as u64;
    assert_eq!(base.content_hash(), before, "fine-tuning modified the frozen base model");
    Ok(curve)
}

// ------------------------------------------------------------------ sampling

/// Deterministic (η = 0) DDIM over a strided schedule, batched. `predict`
/// maps noisy latents and a timestep to `ε̂`.
pub fn ddim_sample_latents(
    shape: &[usize],
    n: usize,
    steps: usize,
    sch: &Schedule,
    streams: &mut [RandomStream],
    mut predict: impl FnMut(&[&Field], usize) -> Result<Vec<Field>>,
) -> Result<Vec<Field>> {
    ensure!(streams.len() == n && n > 0, Invalid, "one stream per sample required");
    let mut zs = streams.iter_mut().map(|rs| draw_normal(rs, shape)).collect::<Result<Vec<_>>>()?;
    let stride = ddim_stride(sch.len(), steps);
    for w in stride.windows(2) {
        let refs: Vec<&Field> = zs.iter().collect();
        let eps = predict(&refs, w[0])?;
        ensure!(eps.len() == n, Shape, "predictor returned {} outputs for {n} inputs", eps.len());
        for ((z, e), rs) in zs.iter_mut().zip(&eps).zip(streams.iter_mut()) {
            *z = ddim_step_clipped(z, e, w[0], w[1], sch, 0.0, None, rs)?.x_prev;
        }
    }
    Ok(zs)
}

/// Full stage-2 model bundle.
pub struct ImageSynth<'a> {
    pub ae: &'a Autoencoder,
    pub base: &'a BaseModel,
    pub branch: &'a ControlBranch,
    pub sch: &'a Schedule,
}

impl ImageSynth<'_> {
    /// Latent grid shape for an image of `h × w`.
    pub fn latent_shape(&self, h: usize, w: usize) -> Vec<usize> {
        vec![h / 4, w / 4, self.ae.cfg.latent_ch]
    }

    /// One image per `(c_s, prompt)`; item `i` draws only from `streams[i]`.
    pub fn sample(&self, conds: &[(&Field, &Prompt)], steps: usize, streams: &mut [RandomStream]) -> Result<Vec<Field>> {
        ensure!(!conds.is_empty(), Invalid, "nothing to sample");
        let s = conds[0].0.shape();
        ensure!(s.len() == 3 && s[0] % 4 == 0 && s[1] % 4 == 0, Shape, "semantic condition {:?}", s);
        let prompts: Vec<Option<&Prompt>> = conds.iter().map(|c| Some(c.1)).collect();
        let cs: Vec<&Field> = conds.iter().map(|c| c.0).collect();
        let z = ddim_sample_latents(&self.latent_shape(s[0], s[1]), conds.len(), steps, self.sch, streams, |z, t| {
            controlled_forward(self.base, self.branch, z, &vec![t; z.len()], &prompts, &cs)
        })?;
        let zr: Vec<&Field> = z.iter().collect();
        self.ae.decode(&zr)
    }
}

/// Single-image convenience wrapper around [`ImageSynth::sample`].
#[allow(clippy::too_many_arguments)]
pub fn sample_image(
    ae: &Autoencoder,
    base: &BaseModel,
    branch: &ControlBranch,
    cs: &Field,
    prompt: &Prompt,
    steps: usize,
    sch: &Schedule,
    rs: &mut RandomStream,
) -> Result<Field> {
    let synth = ImageSynth { ae, base, branch, sch };
    let mut streams = [rs.clone()];
    let out = synth.sample(&[(cs, prompt)], steps, &mut streams)?;
    *rs = streams[0].clone();
    Ok(out.into_iter().next().unwrap())
}

/// Pixel-space counterpart of the base denoiser (same widths, operating
/// directly on `[H, W, 3]` images), used as a timing reference.
pub struct PixelBaseline {
    pub cfg: BaseConfig,
    pub params: ParamSet<f32>,
}

impl PixelBaseline {
    pub fn new(base_cfg: &BaseConfig, rs: &mut RandomStream) -> Self {
        let mut cfg = *base_cfg;
        cfg.unet.in_ch = 3;
        cfg.unet.out_ch = 3;
        PixelBaseline {
            params: cfg.init(rs),
            cfg,
        }
    }

    pub fn sample(&self, h: usize, w: usize, prompt: &Prompt, steps: usize, sch: &Schedule, rs: &mut RandomStream) -> Result<Field> {
        let model = BaseModel {
            cfg: self.cfg,
            params: self.params.clone(),
            frozen: true,
            step: 0,
        };
        let mut streams = [rs.clone()];
        let out = ddim_sample_latents(&[h, w, 3], 1, steps, sch, &mut streams, |z, t| {
            model.forward(z, &[t], &[Some(prompt)])
        })?;
        *rs = streams[0].clone();
        out.into_iter().next().unwrap().map(|v| v.clamp(-1.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::default_gaussian_schedule;

    fn small_base(rs: &mut RandomStream) -> BaseModel {
        let vocab = Vocabulary::default();
        let mut cfg = BaseConfig::new(&vocab, 4);
        cfg.unet.width = 16;
        let mut params = cfg.init(rs);
        // Non-zero output so that equality checks are not trivially about zeros.
        let t = params.get_mut("unet.out.w").unwrap();
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f32 * 0.01 - 0.06;
        }
        BaseModel { cfg, params, frozen: true, step: 0 }
    }

    fn prompt() -> Prompt {
        Prompt {
            tissue: 1,
            bucket: crate::conditioning::Bucket::ALL[2],
            classes: [1, 3].into(),
            staining: Some(1),
        }
    }

    #[test]
    fn fresh_branch_is_identity() {
        let mut rs = RandomStream::new(1);
        let base = small_base(&mut rs);
        let branch = ControlBranch::init(ControlConfig::new(4), &base, &mut rs);
        let z = draw_normal(&mut rs, &[8, 8, 4]).unwrap();
        let cs = draw_normal(&mut rs, &[32, 32, 7]).unwrap();
        let zero = Field::zeros(&[32, 32, 7]);
        let p = prompt();
        let a = base.forward(&[&z], &[321], &[Some(&p)]).unwrap();
        let b = controlled_forward(&base, &branch, &[&z], &[321], &[Some(&p)], &[&cs]).unwrap();
        let c = controlled_forward(&base, &branch, &[&z], &[321], &[Some(&p)], &[&zero]).unwrap();
        assert!(a[0].data().iter().any(|&v| v != 0.0));
        let bits = |f: &Field| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
        assert_eq!(bits(&a[0]), bits(&c[0]));
    }

    #[test]
    fn condition_grid_mismatch_is_rejected() {
        let mut rs = RandomStream::new(2);
        let base = small_base(&mut rs);
        let branch = ControlBranch::init(ControlConfig::new(4), &base, &mut rs);
        let z = Field::zeros(&[8, 8, 4]);
        let p = prompt();
        let cs = Field::zeros(&[16, 16, 7]);
        assert!(controlled_forward(&base, &branch, &[&z], &[5], &[Some(&p)], &[&cs]).is_err());
        let cs = Field::zeros(&[32, 32, 6]);
        assert!(controlled_forward(&base, &branch, &[&z], &[5], &[Some(&p)], &[&cs]).is_err());
    }

    #[test]
    fn branch_copies_base_encoder() {
        let mut rs = RandomStream::new(3);
        let base = small_base(&mut rs);
        let branch = ControlBranch::init(ControlConfig::new(4), &base, &mut rs);
        assert_eq!(branch.params.expect("copy.enc0.0.c1.w"), base.params.expect("unet.enc0.0.c1.w"));
        assert!(branch.params.get("copy.dec0.0.c1.w").is_none());
        assert!(branch.params.expect("zc.mid.w").data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finetune_requires_frozen_base_and_leaves_it_untouched() {
        let mut rs = RandomStream::new(4);
        let mut base = small_base(&mut rs);
        let mut branch = ControlBranch::init(ControlConfig::new(4), &base, &mut rs);
        let data = vec![LatentItem {
            z0: draw_normal(&mut rs, &[8, 8, 4]).unwrap(),
            prompt: prompt(),
            cs: Some(draw_normal(&mut rs, &[32, 32, 7]).unwrap()),
        }];
        let tc = TrainConfig { steps: 3, batch: 2, ..Default::default() };
        let sch = default_gaussian_schedule();
        base.frozen = false;
        assert!(finetune_control(&base, &mut branch, &data, &tc, &RandomStream::new(5), &sch).is_err());
        base.frozen = true;
        let hash = base.content_hash();
        let before = branch.params.expect("zc.mid.w").clone();
        finetune_control(&base, &mut branch, &data, &tc, &RandomStream::new(5), &sch).unwrap();
        assert_eq!(base.content_hash(), hash);
        assert_ne!(branch.params.expect("zc.mid.w"), &before);
        assert_eq!(branch.step, 3);
    }

    #[test]
    fn checkpoints_roundtrip_and_bind_to_base() {
        let mut rs = RandomStream::new(6);
        let base = small_base(&mut rs);
        let sch = default_gaussian_schedule();
        let ck = base.to_checkpoint(&sch).unwrap();
        assert!(ck.meta.frozen);
        let back = BaseModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.content_hash(), base.content_hash());
        let branch = ControlBranch::init(ControlConfig::new(4), &base, &mut rs);
        let bck = branch.to_checkpoint(&base).unwrap();
        let b2 = ControlBranch::from_checkpoint(&bck, &base).unwrap();
        assert_eq!(b2.params.content_hash(), branch.params.content_hash());
        let other = small_base(&mut RandomStream::new(99));
        assert!(ControlBranch::from_checkpoint(&bck, &other).is_err());
        let ae = Autoencoder {
            cfg: AeConfig::default(),
            params: AeConfig::default().init(&mut rs),
            scale: 0.5,
        };
        let a2 = Autoencoder::from_checkpoint(&ae.to_checkpoint().unwrap()).unwrap();
        assert_eq!((a2.scale, a2.params.content_hash()), (0.5, ae.params.content_hash()));
    }

    #[test]
    fn decode_is_clamped_and_encode_deterministic() {
        let mut rs = RandomStream::new(7);
        let ae = Autoencoder {
            cfg: AeConfig::default(),
            params: AeConfig::default().init(&mut rs),
            scale: 3.0,
        };
        let im = crate::rng::draw_uniform(&mut rs, &[32, 32, 3]).unwrap();
        let a = ae.encode(&[&im]).unwrap();
        let b = ae.encode(&[&im]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), [8, 8, 4]);
        let big = a[0].map(|v| v * 100.0).unwrap();
        let out = ae.decode(&[&big]).unwrap();
        assert!(out[0].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
