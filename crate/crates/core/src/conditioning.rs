//! Structured prompts: canonical text form, parser, learned encoder and
//! classifier-free guidance.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Vocabulary;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::nn::{linear_init, normal_init, Graph, ParamSet, Real, Tensor, Var};
use crate::rng::RandomStream;

/// Width of prompt embeddings.
pub const EMBED_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bucket {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::VeryLow, Bucket::Low, Bucket::Medium, Bucket::High, Bucket::VeryHigh];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Bucket> {
        Self::ALL.get(i).copied()
    }

    /// Half-open proportion range `[lo, hi)`; the top bucket includes 1.
    pub fn range(self) -> (f64, f64) {
        match self {
            Bucket::VeryLow => (0.0, 0.08),
            Bucket::Low => (0.08, 0.16),
            Bucket::Medium => (0.16, 0.26),
            Bucket::High => (0.26, 0.38),
            Bucket::VeryHigh => (0.38, 1.0),
        }
    }

    pub fn of(proportion: f64) -> Bucket {
        Self::ALL
            .into_iter()
            .find(|b| proportion < b.range().1)
            .unwrap_or(Bucket::VeryHigh)
    }

    /// Name used in prompt text.
    pub fn name(self) -> &'static str {
        match self {
            Bucket::VeryLow => "very low",
            Bucket::Low => "low",
            Bucket::Medium => "medium",
            Bucket::High => "high",
            Bucket::VeryHigh => "very high",
        }
    }

    /// Hyphenated tag used in configs.
    pub fn tag(self) -> &'static str {
        match self {
            Bucket::VeryLow => "very-low",
            Bucket::Low => "low",
            Bucket::Medium => "medium",
            Bucket::High => "high",
            Bucket::VeryHigh => "very-high",
        }
    }

    pub fn from_tag(s: &str) -> Option<Bucket> {
        let s = s.trim().to_lowercase().replace(['-', '_'], " ");
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    /// Index into the tissue vocabulary.
    pub tissue: usize,
    pub bucket: Bucket,
    /// Nucleus class ids (1..K).
    pub classes: BTreeSet<u8>,
    /// Index into the staining vocabulary.
    pub staining: Option<usize>,
}

impl Prompt {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        ensure!(self.tissue < vocab.tissues.len(), Prompt, "unknown tissue index {}", self.tissue);
        if let Some(s) = self.staining {
            ensure!(s < vocab.stainings.len(), Prompt, "unknown staining index {s}");
        }
        for &c in &self.classes {
            ensure!(c >= 1 && (c as usize) < vocab.k(), Prompt, "class id {c} outside 1..{}", vocab.k());
        }
        ensure!(
            !self.classes.is_empty() || self.bucket == Bucket::VeryLow,
            Prompt,
            "empty class set requires the very low bucket"
        );
        Ok(())
    }
}

const NO_CLASSES: &str = "none";

pub fn render_prompt(p: &Prompt, vocab: &Vocabulary) -> Result<String> {
    p.validate(vocab)?;
    let mut names: Vec<&str> = p.classes.iter().map(|&c| vocab.class_names[c as usize].as_str()).collect();
    names.sort_unstable();
    let classes = if names.is_empty() { NO_CLASSES.to_string() } else { names.join(", ") };
    let mut s = format!(
        "a {} tissue with {} nuclei of types {}",
        vocab.tissues[p.tissue], p.bucket, classes
    );
    if let Some(st) = p.staining {
        s.push_str(&format!(", {} stained", vocab.stainings[st]));
    }
    Ok(s)
}

fn expect_literal<'a>(rest: &'a str, lit: &str) -> Result<&'a str> {
    rest.strip_prefix(lit).ok_or_else(|| {
        let seg: String = rest.chars().take(lit.len().max(12)).collect();
        Error::Prompt(format!("expected '{}' at '{}'", lit.trim(), seg.trim()))
    })
}

/// Inverse of [`render_prompt`], tolerant of case and extra whitespace.
pub fn parse_prompt(text: &str, vocab: &Vocabulary) -> Result<Prompt> {
    let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let rest = expect_literal(&norm, "a ")?;
    let Some(pos) = rest.find(" tissue with ") else {
        return Err(Error::Prompt(format!("expected 'tissue with' in '{rest}'")));
    };
    let tissue_tag = &rest[..pos];
    let tissue = vocab
        .tissue_index(tissue_tag)
        .ok_or_else(|| Error::Prompt(format!("unknown tissue tag '{tissue_tag}'")))?;
    let rest = &rest[pos + " tissue with ".len()..];
    let mut by_len = Bucket::ALL.to_vec();
    by_len.sort_by_key(|b| std::cmp::Reverse(b.name().len()));
    let bucket = by_len
        .into_iter()
        .find(|b| rest.starts_with(&format!("{} nuclei", b.name())))
        .ok_or_else(|| {
            let seg = rest.split(" nuclei").next().unwrap_or(rest);
            Error::Prompt(format!("unknown proportion bucket '{seg}'"))
        })?;
    let rest = expect_literal(&rest[bucket.name().len()..], " nuclei of types ")?;
    let (class_part, staining) = match rest.strip_suffix(" stained") {
        Some(head) => {
            let Some(cut) = head.rfind(", ") else {
                return Err(Error::Prompt(format!("expected staining segment in '{rest}'")));
            };
            let tag = &head[cut + 2..];
            let st = vocab
                .staining_index(tag)
                .ok_or_else(|| Error::Prompt(format!("unknown staining tag '{tag}'")))?;
            (&head[..cut], Some(st))
        }
        None => (rest, None),
    };
    let mut classes = BTreeSet::new();
    if class_part != NO_CLASSES {
        for name in class_part.split(',') {
            let name = name.trim();
            let idx = vocab
                .class_index(name)
                .filter(|&i| i > 0)
                .ok_or_else(|| Error::Prompt(format!("unknown class name '{name}'")))?;
            classes.insert(idx as u8);
        }
    }
    let p = Prompt {
        tissue,
        bucket,
        classes,
        staining,
    };
    p.validate(vocab)?;
    Ok(p)
}

/// Reads one prompt per non-empty line.
pub fn read_prompt_file(path: &Path, vocab: &Vocabulary) -> Result<Vec<Prompt>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_prompt(l, vocab).map_err(|e| Error::Prompt(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Layout of the stacked embedding table `rows`: tissues, buckets, nucleus
/// classes, stainings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTables {
    pub tissues: usize,
    pub classes: usize,
    pub stainings: usize,
    pub width: usize,
}

impl PromptTables {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self::with_width(vocab, EMBED_WIDTH)
    }

    pub fn with_width(vocab: &Vocabulary, width: usize) -> Self {
        PromptTables {
            tissues: vocab.tissues.len(),
            classes: vocab.k() - 1,
            stainings: vocab.stainings.len(),
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.tissues + Bucket::ALL.len() + self.classes + self.stainings
    }

    /// Parameters `rows`, `proj.{w,b}` and `null`.
    pub fn init<T: Real>(&self, rs: &mut RandomStream) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        ps.insert("rows", normal_init(&[self.rows(), self.width], 1.0, rs));
        linear_init(&mut ps, "proj", self.width, self.width, rs);
        ps.insert("null", normal_init(&[self.width], 1.0, rs));
        ps
    }

    /// Row coefficients whose weighted sum is the pre-projection vector.
    pub fn coefficients(&self, p: &Prompt) -> Result<Vec<(usize, f64)>> {
        ensure!(p.tissue < self.tissues, Prompt, "unknown tissue index {}", p.tissue);
        let mut out = vec![(p.tissue, 1.0), (self.tissues + p.bucket.index(), 1.0)];
        let base = self.tissues + Bucket::ALL.len();
        let n = p.classes.len() as f64;
        for &c in &p.classes {
            ensure!(c >= 1 && (c as usize) <= self.classes, Prompt, "class id {c} out of range");
            out.push((base + c as usize - 1, 1.0 / n));
        }
        if let Some(s) = p.staining {
            ensure!(s < self.stainings, Prompt, "unknown staining index {s}");
            out.push((base + self.classes + s, 1.0));
        }
        Ok(out)
    }

    /// `[B, width]` embeddings inside a graph; `None` items get the null vector.
    /// Parameters are looked up under `prefix`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, prefix: &str, prompts: &[Option<&Prompt>]) -> Result<Var> {
        let coeffs = prompts
            .iter()
            .map(|p| p.map_or(Ok(vec![]), |p| self.coefficients(p)))
            .collect::<Result<Vec<_>>>()?;
        let table = g.p(&format!("{prefix}rows"));
        let s = g.row_combo(table, coeffs);
        let w = g.p(&format!("{prefix}proj.w"));
        let b = g.p(&format!("{prefix}proj.b"));
        let c = g.linear(s, w, Some(b));
        let null = g.p(&format!("{prefix}null"));
        Ok(g.select_rows(c, null, prompts.iter().map(|p| p.is_none()).collect()))
    }
}

/// Stand-alone embedding of one prompt (or the null condition).
pub fn encode_prompt(p: Option<&Prompt>, tables: &PromptTables, params: &ParamSet<f32>) -> Result<Field> {
    let mut g = Graph::inference();
    g.bind(params, "", false);
    let v = tables.embed(&mut g, "", &[p])?;
    let t: Tensor<f32> = g.tensor(v);
    Field::new(vec![tables.width], t.data)
}

/// Classifier-free guidance `u + w·(c − u)`; `w = 1` returns `c` unchanged.
pub fn guide(out_cond: &Field, out_uncond: &Field, w: f64) -> Result<Field> {
    out_cond.ensure_same_shape(out_uncond, "guide")?;
    if w == 1.0 {
        return Ok(out_cond.clone());
    }
    out_cond.zip_map(out_uncond, |c, u| (u as f64 + w * (c as f64 - u as f64)) as f32)
}
