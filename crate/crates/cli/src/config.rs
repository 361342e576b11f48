//! Run configuration: typed sections that are read from and echoed as flat
//! JSON objects with dotted keys (`"stage1.steps": 2000`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cluster_prob: f64,
    /// Bucket weights (very-low … very-high); empty means uniform.
    pub buckets: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 2000,
            h: 32,
            w: 32,
            cluster_prob: 0.3,
            buckets: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub checkpoint_every: usize,
}

impl TrainSection {
    fn with(steps: usize, lr: f64) -> Self {
        TrainSection {
            steps,
            batch: 16,
            lr,
            ema_decay: 0.999,
            checkpoint_every: 0,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::with(2000, 2e-4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub width: usize,
    pub lambda_cat: f64,
    pub p_drop: f64,
    pub train: TrainSection,
    pub sample_steps: usize,
    pub guidance: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            width: 32,
            lambda_cat: 1.0,
            p_drop: 0.1,
            train: TrainSection {
                checkpoint_every: 500,
                ..TrainSection::default()
            },
            sample_steps: 100,
            guidance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub ae_width: usize,
    pub base_width: usize,
    pub ae: TrainSection,
    pub base: TrainSection,
    pub control: TrainSection,
    pub sample_steps: usize,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            ae_width: 32,
            base_width: 64,
            ae: TrainSection::with(1500, 1e-3),
            base: TrainSection::with(2000, 5e-4),
            control: TrainSection::with(2000, 5e-4),
            sample_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("keys are checked against the defaults");
        }
        cur.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serialises"))
    }

    /// Defaults, then the file (flat dotted keys or nested objects), then the
    /// `key=value` overrides in order. Values are parsed as JSON, falling back
    /// to plain strings.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut flat = RunConfig::default().to_flat();
        let mut apply = |key: &str, v: Value, origin: &str| -> Result<(), CliError> {
            if !flat.contains_key(key) {
                return Err(CliError::Config(format!("unknown config key '{key}' ({origin})")));
            }
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
            }
            for (k, v) in flatten(&v) {
                apply(&k, v, "config file")?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override '{o}' is not key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            apply(k.trim(), v, "command line")?;
        }
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Config(format!("invalid value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.n == 0 {
            return bad("data.n must be at least 1".into());
        }
        if d.h % 4 != 0 || d.w % 4 != 0 || d.h < 8 || d.w < 8 {
            return bad(format!("data.h/data.w must be multiples of 4 and at least 8, got {}x{}", d.h, d.w));
        }
        if !(0.0..=1.0).contains(&d.cluster_prob) {
            return bad(format!("data.cluster_prob {} outside [0, 1]", d.cluster_prob));
        }
        if !d.buckets.is_empty() && (d.buckets.len() != 5 || d.buckets.iter().any(|&w| w < 0.0) || d.buckets.iter().sum::<f64>() <= 0.0) {
            return bad("data.buckets needs 5 non-negative weights with a positive sum".into());
        }
        let s1 = &self.stage1;
        if s1.width < 8 || s1.width % 8 != 0 {
            return bad(format!("stage1.width must be a positive multiple of 8, got {}", s1.width));
        }
        if !(0.0..=1.0).contains(&s1.p_drop) || s1.lambda_cat < 0.0 || s1.guidance < 0.0 {
            return bad("stage1.p_drop must lie in [0, 1]; lambda_cat and guidance must be non-negative".into());
        }
        if s1.sample_steps == 0 || self.stage2.sample_steps == 0 {
            return bad("sampling steps must be positive".into());
        }
        let s2 = &self.stage2;
        if s2.ae_width == 0 || s2.base_width < 8 || s2.base_width % 8 != 0 {
            return bad("stage2 widths must be positive (base width a multiple of 8)".into());
        }
        for (name, t) in [
            ("stage1.train", &s1.train),
            ("stage2.ae", &s2.ae),
            ("stage2.base", &s2.base),
            ("stage2.control", &s2.control),
        ] {
            if t.batch == 0 || !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.ema_decay) {
                return bad(format!("{name}: batch must be positive, lr positive, ema_decay in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip_of_defaults() {
        let cfg = RunConfig::default();
        let flat = cfg.to_flat();
        assert_eq!(flat["stage1.train.steps"], serde_json::json!(2000));
        let back: RunConfig = serde_json::from_value(unflatten(&flat)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 5, "stage1.width": 16, "data": {"n": 40}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&p), &["stage1.width=24".into(), "data.buckets=[1,0,0,0,1]".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.stage1.width, cfg.data.n), (5, 24, 40));
        assert_eq!(cfg.data.buckets, vec![1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::resolve(None, &["stage1.depth=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["data.h=30".into()]).is_err());
        assert!(RunConfig::resolve(None, &["stage1.width=\"wide\"".into()]).is_err());
        assert!(RunConfig::resolve(None, &["noequals".into()]).is_err());
    }
}
