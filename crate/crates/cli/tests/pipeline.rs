//! End-to-end runs of the command line on a deliberately tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};

use nucleosynth::dataset::{read_dataset, read_label_set};
use nucleosynth_cli::run;
use nucleosynth_cli::run_dir::{read_manifest, Status};

const TINY: &[&str] = &[
    "data.h=16",
    "data.w=16",
    "stage1.width=8",
    "stage1.train.steps=3",
    "stage1.train.batch=2",
    "stage1.train.checkpoint_every=2",
    "stage1.sample_steps=4",
    "stage1.guidance=2",
    "stage2.ae_width=4",
    "stage2.base_width=8",
    "stage2.ae.steps=2",
    "stage2.ae.batch=2",
    "stage2.base.steps=2",
    "stage2.base.batch=2",
    "stage2.control.steps=2",
    "stage2.control.batch=2",
    "stage2.sample_steps=3",
];

fn nucleosynth(args: &[&str], out: Option<&Path>) -> i32 {
    let mut argv: Vec<String> = vec!["nucleosynth".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    if let Some(o) = out {
        argv.push("--out".into());
        argv.push(o.to_string_lossy().into_owned());
        for s in TINY {
            argv.push("--set".into());
            argv.push(s.to_string());
        }
    }
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Trained {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Trained {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn trained() -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let d = |s: &str| root.join(s);
    assert_eq!(nucleosynth(&["gen-data", "--n", "6"], Some(&d("data"))), 0);
    assert_eq!(nucleosynth(&["train-stage1", "--data", p(&d("data"))], Some(&d("s1"))), 0);
    assert_eq!(nucleosynth(&["train-ae", "--data", p(&d("data"))], Some(&d("ae"))), 0);
    assert_eq!(
        nucleosynth(&["train-base", "--data", p(&d("data")), "--ae", p(&d("ae/ae.nsck"))], Some(&d("base"))),
        0
    );
    assert_eq!(
        nucleosynth(
            &[
                "train-control",
                "--data",
                p(&d("data")),
                "--ae",
                p(&d("ae/ae.nsck")),
                "--base",
                p(&d("base/base.nsck"))
            ],
            Some(&d("control"))
        ),
        0
    );
    fs::write(
        d("prompts.txt"),
        "a glandular tissue with low nuclei of types small-round\n\
         a stromal tissue with medium nuclei of types large-elongated, medium, H&E stained\n",
    )
    .unwrap();
    Trained { _tmp: tmp, root }
}

fn augment(t: &Trained, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["augment"];
    args.extend_from_slice(extra);
    let paths = [
        t.path("prompts.txt"),
        t.path("s1/stage1.nsck"),
        t.path("ae/ae.nsck"),
        t.path("base/base.nsck"),
        t.path("control/control.nsck"),
    ];
    let flags = ["--prompts", "--stage1", "--ae", "--base", "--control"];
    for (f, path) in flags.iter().zip(&paths) {
        args.push(f);
        args.push(p(path));
    }
    nucleosynth(&args, Some(out))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_on_tiny_models() {
    let t = trained();
    for run_dir in ["data", "s1", "ae", "base", "control"] {
        assert_eq!(read_manifest(&t.path(run_dir)).unwrap().status, Status::Complete, "{run_dir}");
    }
    assert!(t.path("s1/stage1_step000002.nsck").exists());
    assert!(fs::read_to_string(t.path("s1/loss.csv")).unwrap().starts_with("step,loss,ema_loss\n"));
    let inputs = read_manifest(&t.path("control")).unwrap().inputs;
    assert_eq!(
        inputs.iter().map(|i| i.role.as_str()).collect::<Vec<_>>(),
        vec!["data", "ae", "base"]
    );

    // 4 samples for each of 2 prompts.
    let out = t.path("aug");
    assert_eq!(augment(&t, &out, &["--n", "4"]), 0);
    let (m, samples) = read_dataset(&out).unwrap();
    assert_eq!((m.count, m.h, m.w), (8, 16, 16));
    let pngs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".png"))
        .count();
    assert_eq!(pngs, 24);
    assert!(samples[..4].iter().all(|s| s.meta.prompt.contains("glandular")));
    assert!(samples[4..].iter().all(|s| s.meta.prompt.contains("stromal") && s.meta.staining == "H&E"));

    // Labels and images as separate steps.
    assert_eq!(
        nucleosynth(
            &[
                "sample-labels",
                "--stage1",
                p(&t.path("s1/stage1.nsck")),
                "--prompts",
                p(&t.path("prompts.txt")),
                "--n",
                "2"
            ],
            Some(&t.path("labels"))
        ),
        0
    );
    let (_, recs) = read_label_set(&t.path("labels")).unwrap();
    assert_eq!(recs.len(), 4);
    assert!(t.path("labels/structure_maps.nsck").exists());
    assert_eq!(
        nucleosynth(
            &[
                "sample-images",
                "--labels",
                p(&t.path("labels")),
                "--prompts",
                p(&t.path("prompts.txt")),
                "--ae",
                p(&t.path("ae/ae.nsck")),
                "--base",
                p(&t.path("base/base.nsck")),
                "--control",
                p(&t.path("control/control.nsck")),
            ],
            Some(&t.path("images"))
        ),
        0
    );
    assert!(t.path("images/img_000003.png").exists());

    assert_eq!(
        nucleosynth(&["eval", "--real", p(&t.path("data")), "--synth", p(&out)], Some(&t.path("eval"))),
        0
    );
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["synth_count"], 8);
    assert!(report["fsd"].as_f64().unwrap() >= 0.0);
    assert!(fs::read_to_string(t.path("eval/report.csv")).unwrap().contains("watershed_aji,"));

    // Same inputs, same seed: identical directories. A different seed changes them.
    let again = t.path("aug2");
    assert_eq!(augment(&t, &again, &["--n", "4"]), 0);
    assert_eq!(dir_bytes(&out), dir_bytes(&again));
    let other = t.path("aug3");
    assert_eq!(augment(&t, &other, &["--n", "4", "--seed", "9"]), 0);
    assert_ne!(dir_bytes(&out), dir_bytes(&other));

    // Completed run directories are not reused.
    assert_eq!(augment(&t, &out, &["--n", "4"]), 1);
}

#[test]
fn control_rejects_a_different_base() {
    let t = trained();
    // A second base trained with another seed.
    assert_eq!(
        nucleosynth(
            &["train-base", "--seed", "5", "--data", p(&t.path("data")), "--ae", p(&t.path("ae/ae.nsck"))],
            Some(&t.path("base2"))
        ),
        0
    );
    let code = nucleosynth(
        &[
            "sample-images",
            "--labels",
            p(&t.path("data")),
            "--prompts",
            p(&t.path("prompts.txt")),
            "--ae",
            p(&t.path("ae/ae.nsck")),
            "--base",
            p(&t.path("base2/base.nsck")),
            "--control",
            p(&t.path("control/control.nsck")),
        ],
        Some(&t.path("bad")),
    );
    assert_eq!(code, 1);
    assert_eq!(read_manifest(&t.path("bad")).unwrap().status, Status::Failed);
}
