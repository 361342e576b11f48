//! Labeled samples and the on-disk dataset directory.
//!
//! A dataset directory holds `manifest.json` plus, for every sample `i`,
//! `img_%06d.png` (RGB8), `lab_%06d.png` (8-bit gray class ids),
//! `inst_%06d.png` (16-bit gray instance ids) and `meta_%06d.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::grid::{connected_components, InstanceGrid, LabelGrid};

/// Names shared by the generator, the prompt grammar and the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Index 0 is the background class.
    pub class_names: Vec<String>,
    pub tissues: Vec<String>,
    pub stainings: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            class_names: ["background", "small-round", "large-elongated", "medium"]
                .map(String::from)
                .to_vec(),
            tissues: vec!["glandular".into(), "stromal".into()],
            stainings: vec!["H&E".into(), "IHC".into()],
        }
    }
}

impl Vocabulary {
    /// Number of classes including background.
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn tissue_index(&self, tag: &str) -> Option<usize> {
        self.tissues.iter().position(|t| t.eq_ignore_ascii_case(tag))
    }

    pub fn staining_index(&self, tag: &str) -> Option<usize> {
        self.stainings.iter().position(|t| t.eq_ignore_ascii_case(tag))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names
            .iter()
            .skip(1)
            .position(|t| t.eq_ignore_ascii_case(name))
            .map(|i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub tissue: String,
    pub staining: String,
    /// Fraction of nucleus pixels, measured on the label grid.
    pub proportion: f32,
    /// Nucleus class ids present (ascending).
    pub classes: Vec<u8>,
    pub prompt: String,
    /// Set when the generator could not reach its target proportion.
    #[serde(default)]
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Field,
    pub label: LabelGrid,
    pub instance: InstanceGrid,
    pub meta: SampleMeta,
}

pub fn nucleus_proportion(label: &LabelGrid) -> f32 {
    let (h, w) = label.dims();
    (label.count_nonzero() as f64 / (h * w) as f64) as f32
}

/// Checks the label/instance consistency rules shared by all samples.
pub fn check_instance_consistency(label: &LabelGrid, instance: &InstanceGrid) -> Result<()> {
    ensure!(
        label.same_dims(instance),
        Shape,
        "label {:?} vs instance {:?}",
        label.dims(),
        instance.dims()
    );
    for (i, (&l, &id)) in label.data().iter().zip(instance.data()).enumerate() {
        ensure!(
            (l > 0) == (id > 0),
            Dataset,
            "pixel {i}: label {l} but instance {id}"
        );
    }
    let (cc, _) = connected_components(instance, |v| v > 0, |a, b| a == b);
    let mut region_of: BTreeMap<u32, u32> = BTreeMap::new();
    for (&id, &comp) in instance.data().iter().zip(cc.data()) {
        if id == 0 {
            continue;
        }
        let prev = *region_of.entry(id).or_insert(comp);
        ensure!(
            prev == comp,
            Dataset,
            "instance {id} is not a single 4-connected region"
        );
    }
    Ok(())
}

fn check_labels(label: &LabelGrid, instance: &InstanceGrid, meta: &SampleMeta, k: usize) -> Result<()> {
    if let Some(&bad) = label.data().iter().find(|&&l| l as usize >= k) {
        return Err(Error::Dataset(format!("label id {bad} >= K={k}")));
    }
    check_instance_consistency(label, instance)?;
    let p = nucleus_proportion(label);
    ensure!(
        (p - meta.proportion).abs() <= 1e-6,
        Dataset,
        "meta proportion {} but label has {p}",
        meta.proportion
    );
    Ok(())
}

impl LabeledSample {
    pub fn dims(&self) -> (usize, usize) {
        self.label.dims()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let (h, w) = self.label.dims();
        ensure!(
            self.image.shape() == [h, w, 3],
            Shape,
            "image {:?} for {h}x{w} label",
            self.image.shape()
        );
        check_labels(&self.label, &self.instance, &self.meta, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub class_names: Vec<String>,
    pub tissues: Vec<String>,
    pub stainings: Vec<String>,
    pub count: usize,
}

impl Manifest {
    pub fn new(vocab: &Vocabulary, h: usize, w: usize, count: usize) -> Self {
        Manifest {
            k: vocab.k(),
            h,
            w,
            class_names: vocab.class_names.clone(),
            tissues: vocab.tissues.clone(),
            stainings: vocab.stainings.clone(),
            count,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            class_names: self.class_names.clone(),
            tissues: self.tissues.clone(),
            stainings: self.stainings.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn image_to_rgb8(image: &Field) -> Result<RgbImage> {
    ensure!(
        image.shape().len() == 3 && image.shape()[2] == 3,
        Shape,
        "expected [H, W, 3] image, got {:?}",
        image.shape()
    );
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches"))
}

pub fn rgb8_to_image(img: &RgbImage) -> Result<Field> {
    let (w, h) = img.dimensions();
    Field::new(
        vec![h as usize, w as usize, 3],
        img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

pub fn save_image_png(image: &Field, path: &Path) -> Result<()> {
    Ok(image_to_rgb8(image)?.save(path)?)
}

pub fn load_image_png(path: &Path) -> Result<Field> {
    rgb8_to_image(&image::open(path)?.to_rgb8())
}

/// A label/instance pair and its metadata, without an image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub label: LabelGrid,
    pub instance: InstanceGrid,
    pub meta: SampleMeta,
}

impl LabelRecord {
    pub fn validate(&self, k: usize) -> Result<()> {
        check_labels(&self.label, &self.instance, &self.meta, k)
    }
}

fn sample_path(dir: &Path, prefix: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{i:06}.{ext}"))
}

fn write_record(dir: &Path, i: usize, label: &LabelGrid, instance: &InstanceGrid, meta: &SampleMeta) -> Result<()> {
    let (h, w) = label.dims();
    let lab = GrayImage::from_raw(w as u32, h as u32, label.data().to_vec()).expect("buffer length matches");
    lab.save(sample_path(dir, "lab", i, "png"))?;
    let mut inst = Vec::with_capacity(h * w);
    for &id in instance.data() {
        ensure!(id <= u16::MAX as u32, Dataset, "instance id {id} exceeds 16 bits");
        inst.push(id as u16);
    }
    let inst: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, inst).expect("buffer length matches");
    inst.save(sample_path(dir, "inst", i, "png"))?;
    write_json(&sample_path(dir, "meta", i, "json"), meta)
}

fn read_record(dir: &Path, i: usize, manifest: &Manifest) -> Result<LabelRecord> {
    for (prefix, ext) in [("lab", "png"), ("inst", "png"), ("meta", "json")] {
        let p = sample_path(dir, prefix, i, ext);
        ensure!(
            p.exists(),
            Dataset,
            "sample {i}: missing file {}",
            p.file_name().unwrap().to_string_lossy()
        );
    }
    let lab = image::open(sample_path(dir, "lab", i, "png"))?.to_luma8();
    let inst = image::open(sample_path(dir, "inst", i, "png"))?.to_luma16();
    let dims = (manifest.w as u32, manifest.h as u32);
    ensure!(
        lab.dimensions() == dims && inst.dimensions() == dims,
        Dataset,
        "sample {i}: image size disagrees with manifest"
    );
    let label = LabelGrid::from_vec(manifest.h, manifest.w, lab.into_raw())?;
    if let Some(&bad) = label.data().iter().find(|&&l| l as usize >= manifest.k) {
        return Err(Error::Dataset(format!(
            "sample {i}: label id {bad} >= K={}",
            manifest.k
        )));
    }
    let instance = InstanceGrid::from_vec(
        manifest.h,
        manifest.w,
        inst.into_raw().into_iter().map(u32::from).collect(),
    )?;
    let meta: SampleMeta = read_json(&sample_path(dir, "meta", i, "json"))?;
    Ok(LabelRecord { label, instance, meta })
}

/// Writes `samples` plus a manifest into `dir`, creating it if needed.
pub fn write_dataset(samples: &[LabeledSample], vocab: &Vocabulary, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = samples.first().map(|s| s.dims()).unwrap_or((0, 0));
    for (i, s) in samples.iter().enumerate() {
        ensure!(s.dims() == (h, w), Shape, "sample {i} has a different size");
        s.validate(vocab.k())?;
        save_image_png(&s.image, &sample_path(dir, "img", i, "png"))?;
        write_record(dir, i, &s.label, &s.instance, &s.meta)?;
    }
    let manifest = Manifest::new(vocab, h, w, samples.len());
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Same layout as a dataset, minus the `img_*` files.
pub fn write_label_set(records: &[LabelRecord], vocab: &Vocabulary, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = records.first().map(|r| r.label.dims()).unwrap_or((0, 0));
    for (i, r) in records.iter().enumerate() {
        ensure!(r.label.dims() == (h, w), Shape, "record {i} has a different size");
        r.validate(vocab.k())?;
        write_record(dir, i, &r.label, &r.instance, &r.meta)?;
    }
    let manifest = Manifest::new(vocab, h, w, records.len());
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"))
}

/// Reads the label part of a dataset or label set.
pub fn read_label_set(dir: &Path) -> Result<(Manifest, Vec<LabelRecord>)> {
    let manifest = read_manifest(dir)?;
    let records = (0..manifest.count)
        .map(|i| {
            let r = read_record(dir, i, &manifest)?;
            r.validate(manifest.k)
                .map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<LabeledSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let p = sample_path(dir, "img", i, "png");
        ensure!(
            p.exists(),
            Dataset,
            "sample {i}: missing file {}",
            p.file_name().unwrap().to_string_lossy()
        );
        let img = image::open(&p)?.to_rgb8();
        ensure!(
            img.dimensions() == (manifest.w as u32, manifest.h as u32),
            Dataset,
            "sample {i}: image size disagrees with manifest"
        );
        let r = read_record(dir, i, &manifest)?;
        let sample = LabeledSample {
            image: rgb8_to_image(&img)?,
            label: r.label,
            instance: r.instance,
            meta: r.meta,
        };
        sample
            .validate(manifest.k)
            .map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_sample(seed: u8) -> LabeledSample {
        let mut label = LabelGrid::new(4, 4);
        let mut instance = InstanceGrid::new(4, 4);
        label.set(1, 1, 1 + seed % 3);
        instance.set(1, 1, 1);
        label.set(1, 2, 1 + seed % 3);
        instance.set(1, 2, 1);
        label.set(3, 3, 2);
        instance.set(3, 3, 2);
        let image = Field::from_fn(&[4, 4, 3], |i| ((i * 7 + seed as usize) % 11) as f32 / 10.0).unwrap();
        let proportion = nucleus_proportion(&label);
        LabeledSample {
            image,
            label,
            instance,
            meta: SampleMeta {
                tissue: "glandular".into(),
                staining: "H&E".into(),
                proportion,
                classes: vec![1, 2],
                prompt: "p".into(),
                shortfall: false,
            },
        }
    }

    #[test]
    fn label_set_roundtrip_and_dataset_reads_as_label_set() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..2).map(tiny_sample).collect();
        let recs: Vec<LabelRecord> = samples
            .iter()
            .map(|s| LabelRecord {
                label: s.label.clone(),
                instance: s.instance.clone(),
                meta: s.meta.clone(),
            })
            .collect();
        write_label_set(&recs, &Vocabulary::default(), &dir.path().join("l")).unwrap();
        assert_eq!(read_label_set(&dir.path().join("l")).unwrap().1, recs);
        assert!(read_dataset(&dir.path().join("l")).is_err());
        write_dataset(&samples, &Vocabulary::default(), &dir.path().join("d")).unwrap();
        assert_eq!(read_label_set(&dir.path().join("d")).unwrap().1, recs);
    }

    #[test]
    fn roundtrip_three() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(tiny_sample).collect();
        write_dataset(&samples, &Vocabulary::default(), dir.path()).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m.count, 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.instance, b.instance);
            assert_eq!(a.meta, b.meta);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn missing_meta_names_index() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(tiny_sample).collect();
        write_dataset(&samples, &Vocabulary::default(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("meta_000001.json")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample 1"), "{err}");
    }

    #[test]
    fn label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..1).map(tiny_sample).collect();
        write_dataset(&samples, &Vocabulary::default(), dir.path()).unwrap();
        let mut lab = image::open(dir.path().join("lab_000000.png")).unwrap().to_luma8();
        lab.put_pixel(1, 1, Luma([7]));
        lab.save(dir.path().join("lab_000000.png")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("label id 7"), "{err}");
    }

    #[test]
    fn consistency_checks() {
        let s = tiny_sample(0);
        assert!(s.validate(4).is_ok());
        let mut bad = s.clone();
        bad.instance.set(0, 0, 5);
        assert!(bad.validate(4).is_err());
        let mut split = s.clone();
        split.instance.set(3, 3, 1);
        assert!(split.validate(4).is_err());
        let mut prop = s;
        prop.meta.proportion += 0.01;
        assert!(prop.validate(4).is_err());
    }
}
