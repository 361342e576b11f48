//! Subcommand bodies. Each one resolves its config, opens a run directory,
//! does its work and marks the run complete (or failed).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nucleosynth::checkpoint::{load_checkpoint, save_checkpoint};
use nucleosynth::conditioning::{parse_prompt, read_prompt_file, render_prompt, Prompt};
use nucleosynth::dataset::{
    nucleus_proportion, read_dataset, read_label_set, write_dataset, write_label_set, LabelRecord, LabeledSample,
    SampleMeta, Vocabulary,
};
use nucleosynth::denoiser::{sample_pairs, train, Stage1Checkpoint, Stage1Config, TrainItem};
use nucleosynth::geometry::{assemble_semantic_condition, extract_instances, make_structure_map, reconcile_label};
use nucleosynth::kernels::{default_categorical_schedule, default_gaussian_schedule};
use nucleosynth::metrics::{
    aji, class_consistency, dice, foreground, fsd, proportion_accuracy, toy_fid, EvalReport, TOY_FEATURE_DIM, VIOLATION_TOLERANCE,
};
use nucleosynth::nn::{write_curve_csv, AdamConfig, Ema, TrainConfig};
use nucleosynth::stage2::{
    finetune_control, train_autoencoder, train_base, AeConfig, Autoencoder, BaseConfig, BaseModel, ControlBranch,
    ControlConfig, ImageSynth, LatentItem,
};
use nucleosynth::toydata::{generate_samples, summarize, DataMix, GenConfig};
use nucleosynth::{Field, RandomStream};

use crate::config::{RunConfig, TrainSection};
use crate::run_dir::RunDir;
use crate::{thread_cap, verify, CliError, CliResult, Command, Common};

/// Items sampled together in one network call.
const SAMPLE_CHUNK: usize = 16;

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { common, n } => with_run(&common, "gen-data", |rd, cfg| gen_data(rd, cfg, n)),
        Command::TrainStage1 { common, data } => with_run(&common, "train-stage1", |rd, cfg| train_stage1(rd, cfg, &data)),
        Command::TrainAe { common, data } => with_run(&common, "train-ae", |rd, cfg| train_ae(rd, cfg, &data)),
        Command::TrainBase { common, data, ae } => {
            with_run(&common, "train-base", |rd, cfg| train_base_cmd(rd, cfg, &data, &ae))
        }
        Command::TrainControl { common, data, ae, base } => {
            with_run(&common, "train-control", |rd, cfg| train_control(rd, cfg, &data, &ae, &base))
        }
        Command::SampleLabels { common, stage1, prompts, n } => {
            with_run(&common, "sample-labels", |rd, cfg| sample_labels(rd, cfg, &stage1, &prompts, n))
        }
        Command::SampleImages {
            common,
            labels,
            prompts,
            ae,
            base,
            control,
        } => with_run(&common, "sample-images", |rd, cfg| {
            sample_images(rd, cfg, &labels, &prompts, [&ae, &base, &control])
        }),
        Command::Augment {
            common,
            prompts,
            n,
            stage1,
            ae,
            base,
            control,
        } => with_run(&common, "augment", |rd, cfg| {
            augment(rd, cfg, &prompts, n, &stage1, [&ae, &base, &control])
        }),
        Command::Eval { common, real, synth } => with_run(&common, "eval", |rd, _| eval(rd, &real, &synth)),
        Command::Verify { seed } => verify::run_all(seed),
    }
}

fn with_run(common: &Common, name: &str, body: impl FnOnce(&mut RunDir, &RunConfig) -> CliResult<()>) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let threads = thread_cap()?;
    let mut rd = RunDir::start(&common.out, name, &cfg, threads)?;
    match body(&mut rd, &cfg) {
        Ok(()) => {
            rd.finish()?;
            Ok(())
        }
        Err(e) => {
            rd.fail(&e)?;
            Err(e)
        }
    }
}

fn train_config(t: &TrainSection) -> TrainConfig {
    TrainConfig {
        steps: t.steps,
        batch: t.batch,
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        ema_decay: t.ema_decay,
        checkpoint_every: t.checkpoint_every,
        ..TrainConfig::default()
    }
}

fn root_stream(cfg: &RunConfig, purpose: &str) -> RandomStream {
    RandomStream::new(cfg.seed).child(purpose)
}

fn load_data(rd: &mut RunDir, dir: &Path) -> CliResult<(Vocabulary, Vec<LabeledSample>)> {
    rd.input("data", dir)?;
    let (m, samples) = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("{} holds no samples", dir.display())));
    }
    Ok((m.vocabulary(), samples))
}

fn load_prompts(rd: &mut RunDir, path: &Path, vocab: &Vocabulary) -> CliResult<Vec<Prompt>> {
    rd.input("prompts", path)?;
    let prompts = read_prompt_file(path, vocab)?;
    if prompts.is_empty() {
        return Err(CliError::Config(format!("{} holds no prompts", path.display())));
    }
    Ok(prompts)
}

// ------------------------------------------------------------------ data

fn gen_data(rd: &mut RunDir, cfg: &RunConfig, n: Option<usize>) -> CliResult<()> {
    let vocab = Vocabulary::default();
    let template = GenConfig {
        h: cfg.data.h,
        w: cfg.data.w,
        k: vocab.k(),
        ..GenConfig::default()
    };
    let mix = DataMix {
        buckets: cfg.data.buckets.clone(),
        cluster_prob: cfg.data.cluster_prob,
        ..DataMix::default()
    };
    let n = n.unwrap_or(cfg.data.n);
    if n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let samples = generate_samples(&template, n, &mix, &vocab, &root_stream(cfg, "data"))?;
    write_dataset(&samples, &vocab, &rd.dir)?;
    let summary = summarize(&samples, vocab.k());
    std::fs::write(rd.path("summary.json"), serde_json::to_string_pretty(&summary).expect("serialisable"))
        .map_err(|e| CliError::Io(rd.path("summary.json"), e))?;
    Ok(())
}

// -------------------------------------------------------------- training

pub fn stage1_config(cfg: &RunConfig, vocab: &Vocabulary) -> Stage1Config {
    Stage1Config {
        lambda_cat: cfg.stage1.lambda_cat,
        p_drop: cfg.stage1.p_drop,
        ..Stage1Config::with_width(vocab, cfg.stage1.width)
    }
}

fn train_stage1(rd: &mut RunDir, cfg: &RunConfig, data: &Path) -> CliResult<()> {
    let (vocab, samples) = load_data(rd, data)?;
    let items = samples
        .iter()
        .map(|s| TrainItem::from_sample(s, &vocab))
        .collect::<nucleosynth::Result<Vec<_>>>()?;
    let s1 = stage1_config(cfg, &vocab);
    let rs = root_stream(cfg, "stage1");
    let mut params = s1.init(&mut rs.child("init"));
    let tc = train_config(&cfg.stage1.train);
    let mut ema = Ema::new(&params, tc.ema_decay);
    let (sg, sc) = (default_gaussian_schedule(), default_categorical_schedule());
    let dir = rd.dir.clone();
    let curve = train(&s1, &mut params, &mut ema, &items, &tc, &rs.child("train"), &sg, &sc, |step, p, e| {
        let ck = Stage1Checkpoint {
            cfg: s1,
            vocab: vocab.clone(),
            params: p.clone(),
            ema: e.params.clone(),
            step: step as u64,
        };
        save_checkpoint(&ck.to_checkpoint(&sg, &sc)?, &dir.join(format!("stage1_step{step:06}.nsck")))
    })?;
    let ck = Stage1Checkpoint {
        cfg: s1,
        vocab,
        params,
        ema: ema.params,
        step: tc.steps as u64,
    };
    save_checkpoint(&ck.to_checkpoint(&sg, &sc)?, &rd.path("stage1.nsck"))?;
    write_curve_csv(&curve, &rd.path("loss.csv"))?;
    Ok(())
}

fn train_ae(rd: &mut RunDir, cfg: &RunConfig, data: &Path) -> CliResult<()> {
    let (_, samples) = load_data(rd, data)?;
    let images: Vec<Field> = samples.into_iter().map(|s| s.image).collect();
    let ae_cfg = AeConfig {
        width: cfg.stage2.ae_width,
        ..AeConfig::default()
    };
    let (ae, curve) = train_autoencoder(ae_cfg, &images, &train_config(&cfg.stage2.ae), &root_stream(cfg, "ae"))?;
    save_checkpoint(&ae.to_checkpoint()?, &rd.path("ae.nsck"))?;
    write_curve_csv(&curve, &rd.path("loss.csv"))?;
    Ok(())
}

fn load_ae(rd: &mut RunDir, path: &Path) -> CliResult<Autoencoder> {
    rd.input("ae", path)?;
    Ok(Autoencoder::from_checkpoint(&load_checkpoint(path)?)?)
}

fn load_base(rd: &mut RunDir, path: &Path) -> CliResult<BaseModel> {
    rd.input("base", path)?;
    Ok(BaseModel::from_checkpoint(&load_checkpoint(path)?)?)
}

fn latent_items(ae: &Autoencoder, samples: &[LabeledSample], vocab: &Vocabulary, with_cs: bool) -> CliResult<Vec<LatentItem>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let imgs: Vec<&Field> = chunk.iter().map(|s| &s.image).collect();
        for (s, z0) in chunk.iter().zip(ae.encode(&imgs)?) {
            let cs = if with_cs {
                Some(assemble_semantic_condition(&s.label, &s.instance, vocab.k())?)
            } else {
                None
            };
            out.push(LatentItem {
                z0,
                prompt: parse_prompt(&s.meta.prompt, vocab)?,
                cs,
            });
        }
    }
    Ok(out)
}

fn train_base_cmd(rd: &mut RunDir, cfg: &RunConfig, data: &Path, ae: &Path) -> CliResult<()> {
    let (vocab, samples) = load_data(rd, data)?;
    let ae = load_ae(rd, ae)?;
    let items = latent_items(&ae, &samples, &vocab, false)?;
    let mut bc = BaseConfig::new(&vocab, ae.cfg.latent_ch);
    bc.unet.width = cfg.stage2.base_width;
    let sch = default_gaussian_schedule();
    let (base, curve) = train_base(bc, &items, &train_config(&cfg.stage2.base), &root_stream(cfg, "base"), &sch)?;
    save_checkpoint(&base.to_checkpoint(&sch)?, &rd.path("base.nsck"))?;
    write_curve_csv(&curve, &rd.path("loss.csv"))?;
    Ok(())
}

fn train_control(rd: &mut RunDir, cfg: &RunConfig, data: &Path, ae: &Path, base: &Path) -> CliResult<()> {
    let (vocab, samples) = load_data(rd, data)?;
    let ae = load_ae(rd, ae)?;
    let base = load_base(rd, base)?;
    let items = latent_items(&ae, &samples, &vocab, true)?;
    let rs = root_stream(cfg, "control");
    let mut branch = ControlBranch::init(ControlConfig::new(vocab.k()), &base, &mut rs.child("init"));
    let sch = default_gaussian_schedule();
    let curve = finetune_control(&base, &mut branch, &items, &train_config(&cfg.stage2.control), &rs.child("train"), &sch)?;
    save_checkpoint(&branch.to_checkpoint(&base)?, &rd.path("control.nsck"))?;
    write_curve_csv(&curve, &rd.path("loss.csv"))?;
    Ok(())
}

// -------------------------------------------------------------- sampling

/// A sampled label, reconciled with the instances extracted from its
/// structure map.
pub struct SampledLabel {
    pub structure_map: Field,
    pub record: LabelRecord,
}

fn label_meta(label: &nucleosynth::LabelGrid, prompt: &Prompt, vocab: &Vocabulary) -> CliResult<SampleMeta> {
    let present: BTreeSet<u8> = label.data().iter().copied().filter(|&v| v > 0).collect();
    Ok(SampleMeta {
        tissue: vocab.tissues[prompt.tissue].clone(),
        staining: prompt.staining.map(|s| vocab.stainings[s].clone()).unwrap_or_default(),
        proportion: nucleus_proportion(label),
        classes: present.into_iter().collect(),
        prompt: render_prompt(prompt, vocab)?,
        shortfall: false,
    })
}

/// Stage-1 sampling for `requests[i]`, each from its own stream `rs/label/i`.
/// The staining tag is not part of the label model's prompt.
pub fn sample_labels_for(
    ck: &Stage1Checkpoint,
    requests: &[Prompt],
    h: usize,
    w: usize,
    steps: usize,
    guidance: f64,
    rs: &RandomStream,
) -> CliResult<Vec<SampledLabel>> {
    let (sg, sc) = (default_gaussian_schedule(), default_categorical_schedule());
    let mut out = Vec::with_capacity(requests.len());
    for (c, chunk) in requests.chunks(SAMPLE_CHUNK).enumerate() {
        let conds: Vec<Option<Prompt>> = chunk
            .iter()
            .map(|p| {
                Some(Prompt {
                    staining: None,
                    ..p.clone()
                })
            })
            .collect();
        let mut streams: Vec<RandomStream> = (0..chunk.len())
            .map(|j| rs.child_idx("label", (c * SAMPLE_CHUNK + j) as u64))
            .collect();
        let pairs = sample_pairs(ck, &conds, h, w, steps, guidance, &mut streams, &sg, &sc)?;
        for ((sm, raw), prompt) in pairs.into_iter().zip(chunk) {
            let ex = extract_instances(&sm, &raw)?;
            let label = reconcile_label(&ex);
            let meta = label_meta(&label, prompt, &ck.vocab)?;
            out.push(SampledLabel {
                structure_map: sm,
                record: LabelRecord {
                    label,
                    instance: ex.instance,
                    meta,
                },
            });
        }
    }
    Ok(out)
}

/// Images for `(label record, prompt)` pairs, item `i` from stream `rs/image/i`.
pub fn sample_images_for(
    synth: &ImageSynth<'_>,
    items: &[(&LabelRecord, &Prompt)],
    k: usize,
    steps: usize,
    rs: &RandomStream,
) -> CliResult<Vec<Field>> {
    let mut out = Vec::with_capacity(items.len());
    for (c, chunk) in items.chunks(SAMPLE_CHUNK).enumerate() {
        let cs = chunk
            .iter()
            .map(|(r, _)| assemble_semantic_condition(&r.label, &r.instance, k))
            .collect::<nucleosynth::Result<Vec<_>>>()?;
        let conds: Vec<(&Field, &Prompt)> = cs.iter().zip(chunk).map(|(f, (_, p))| (f, *p)).collect();
        let mut streams: Vec<RandomStream> = (0..chunk.len())
            .map(|j| rs.child_idx("image", (c * SAMPLE_CHUNK + j) as u64))
            .collect();
        out.extend(synth.sample(&conds, steps, &mut streams)?);
    }
    Ok(out)
}

fn load_stage1(rd: &mut RunDir, path: &Path) -> CliResult<Stage1Checkpoint> {
    rd.input("stage1", path)?;
    Ok(Stage1Checkpoint::from_checkpoint(&load_checkpoint(path)?)?)
}

/// `n` copies of each prompt, prompt-major.
fn expand(prompts: &[Prompt], n: usize) -> Vec<Prompt> {
    prompts.iter().flat_map(|p| std::iter::repeat_n(p.clone(), n)).collect()
}

fn sample_labels(rd: &mut RunDir, cfg: &RunConfig, stage1: &Path, prompts: &Path, n: usize) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let ck = load_stage1(rd, stage1)?;
    let prompts = load_prompts(rd, prompts, &ck.vocab)?;
    let requests = expand(&prompts, n);
    let sampled = sample_labels_for(
        &ck,
        &requests,
        cfg.data.h,
        cfg.data.w,
        cfg.stage1.sample_steps,
        cfg.stage1.guidance,
        &root_stream(cfg, "sample"),
    )?;
    let records: Vec<LabelRecord> = sampled.iter().map(|s| s.record.clone()).collect();
    write_label_set(&records, &ck.vocab, &rd.dir)?;
    let maps = nucleosynth::checkpoint::Checkpoint {
        tensors: sampled
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("sm_{i:06}"), s.structure_map.clone()))
            .collect(),
        meta: Default::default(),
    };
    save_checkpoint(&maps, &rd.path("structure_maps.nsck"))?;
    Ok(())
}

struct Stage2Models {
    ae: Autoencoder,
    base: BaseModel,
    branch: ControlBranch,
}

fn load_stage2(rd: &mut RunDir, [ae, base, control]: [&Path; 3]) -> CliResult<Stage2Models> {
    let ae = load_ae(rd, ae)?;
    let base = load_base(rd, base)?;
    rd.input("control", control)?;
    let branch = ControlBranch::from_checkpoint(&load_checkpoint(control)?, &base)?;
    Ok(Stage2Models { ae, base, branch })
}

fn sample_images(rd: &mut RunDir, cfg: &RunConfig, labels: &Path, prompts: &Path, models: [&Path; 3]) -> CliResult<()> {
    rd.input("labels", labels)?;
    let (manifest, records) = read_label_set(labels)?;
    let vocab = manifest.vocabulary();
    let prompts = load_prompts(rd, prompts, &vocab)?;
    let m = load_stage2(rd, models)?;
    let sch = default_gaussian_schedule();
    let synth = ImageSynth {
        ae: &m.ae,
        base: &m.base,
        branch: &m.branch,
        sch: &sch,
    };
    let items: Vec<(&LabelRecord, &Prompt)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r, &prompts[i % prompts.len()]))
        .collect();
    let images = sample_images_for(&synth, &items, vocab.k(), cfg.stage2.sample_steps, &root_stream(cfg, "sample"))?;
    for (i, img) in images.iter().enumerate() {
        nucleosynth::dataset::save_image_png(img, &rd.path(&format!("img_{i:06}.png")))?;
    }
    Ok(())
}

fn augment(rd: &mut RunDir, cfg: &RunConfig, prompts: &Path, n: usize, stage1: &Path, models: [&Path; 3]) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let ck = load_stage1(rd, stage1)?;
    let prompts = load_prompts(rd, prompts, &ck.vocab)?;
    let m = load_stage2(rd, models)?;
    let requests = expand(&prompts, n);
    let rs = root_stream(cfg, "augment");
    let labels = sample_labels_for(
        &ck,
        &requests,
        cfg.data.h,
        cfg.data.w,
        cfg.stage1.sample_steps,
        cfg.stage1.guidance,
        &rs,
    )?;
    let sch = default_gaussian_schedule();
    let synth = ImageSynth {
        ae: &m.ae,
        base: &m.base,
        branch: &m.branch,
        sch: &sch,
    };
    let items: Vec<(&LabelRecord, &Prompt)> = labels.iter().map(|l| &l.record).zip(&requests).collect();
    let images = sample_images_for(&synth, &items, ck.vocab.k(), cfg.stage2.sample_steps, &rs)?;
    let samples: Vec<LabeledSample> = labels
        .into_iter()
        .zip(images)
        .map(|(l, image)| LabeledSample {
            image,
            label: l.record.label,
            instance: l.record.instance,
            meta: l.record.meta,
        })
        .collect();
    write_dataset(&samples, &ck.vocab, &rd.dir)?;
    Ok(())
}

// ------------------------------------------------------------ evaluation

/// Mean watershed AJI and foreground Dice of re-extracting each real sample
/// from its own structure map.
pub fn watershed_recovery(samples: &[LabeledSample]) -> CliResult<(f64, f64)> {
    let (mut a, mut d) = (0.0, 0.0);
    for s in samples {
        let sm = make_structure_map(&s.label, &s.instance)?;
        let ex = extract_instances(&sm, &s.label)?;
        a += aji(&s.instance, &ex.instance)?;
        d += dice(&foreground(&s.instance), &foreground(&ex.instance))?;
    }
    let n = samples.len().max(1) as f64;
    Ok((a / n, d / n))
}

pub fn evaluate(real: &[LabeledSample], synth: &[LabeledSample], vocab: &Vocabulary) -> CliResult<EvalReport> {
    let k = vocab.k();
    let rl: Vec<_> = real.iter().map(|s| s.label.clone()).collect();
    let sl: Vec<_> = synth.iter().map(|s| s.label.clone()).collect();
    let ri: Vec<Field> = real.iter().map(|s| s.image.clone()).collect();
    let si: Vec<Field> = synth.iter().map(|s| s.image.clone()).collect();
    let prompts = synth
        .iter()
        .map(|s| parse_prompt(&s.meta.prompt, vocab))
        .collect::<nucleosynth::Result<Vec<_>>>()?;
    // Consistency is averaged over samples, each against its own class set.
    let mut by_set: BTreeMap<&BTreeSet<u8>, Vec<nucleosynth::LabelGrid>> = BTreeMap::new();
    for (p, l) in prompts.iter().zip(&sl) {
        if !p.classes.is_empty() {
            by_set.entry(&p.classes).or_default().push(l.clone());
        }
    }
    let mut consistent = 0.0;
    let mut counted = 0usize;
    for (set, labels) in &by_set {
        consistent += class_consistency(labels, set, VIOLATION_TOLERANCE)? * labels.len() as f64;
        counted += labels.len();
    }
    let buckets: Vec<_> = prompts.iter().map(|p| p.bucket).collect();
    let (ws_aji, ws_dice) = watershed_recovery(real)?;
    let enough_for_fid = real.len() >= TOY_FEATURE_DIM + 2 && synth.len() >= TOY_FEATURE_DIM + 2;
    let enough_for_fsd = real.len() >= k + 2 && synth.len() >= k + 2;
    Ok(EvalReport {
        fsd: if enough_for_fsd { Some(fsd(&rl, &sl, k)?) } else { None },
        toy_fid: if enough_for_fid { Some(toy_fid(&ri, &si)?) } else { None },
        class_consistency: (counted > 0).then(|| consistent / counted as f64),
        proportion_accuracy: Some(proportion_accuracy(&sl, &buckets)?),
        watershed_aji: Some(ws_aji),
        watershed_dice: Some(ws_dice),
        real_count: real.len(),
        synth_count: synth.len(),
    })
}

fn eval(rd: &mut RunDir, real: &Path, synth: &Path) -> CliResult<()> {
    rd.input("real", real)?;
    rd.input("synth", synth)?;
    let (mr, real) = read_dataset(real)?;
    let (ms, synth) = read_dataset(synth)?;
    if mr.vocabulary() != ms.vocabulary() {
        return Err(CliError::Config("real and synthetic datasets use different vocabularies".into()));
    }
    if real.is_empty() || synth.is_empty() {
        return Err(CliError::Config("both datasets need at least one sample".into()));
    }
    let report = evaluate(&real, &synth, &mr.vocabulary())?;
    let json = serde_json::to_string_pretty(&report).expect("serialisable") + "\n";
    std::fs::write(rd.path("report.json"), json).map_err(|e| CliError::Io(rd.path("report.json"), e))?;
    let v = serde_json::to_value(&report).expect("serialisable");
    let mut csv = String::from("metric,value\n");
    for (key, val) in v.as_object().expect("struct") {
        csv.push_str(&format!("{key},{}\n", if val.is_null() { String::new() } else { val.to_string() }));
    }
    std::fs::write(rd.path("report.csv"), csv).map_err(|e| CliError::Io(rd.path("report.csv"), e))?;
    println!("{}", serde_json::to_string(&report).expect("serialisable"));
    Ok(())
}
