//! Dataset ingestion (JSONL instruction/response/label records), a
//! deterministic synthetic generator with controllable label noise and a
//! train/test filler-distribution shift knob, and seeded splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub instruction: String,
    pub response: String,
    pub label: usize,
}

impl Record {
    /// The text surface a classifier sees.
    pub fn text(&self) -> String {
        format!("{} {}", self.instruction, self.response)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub classes: usize,
    pub n: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub generator_version: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.text()).collect()
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Load a JSONL dataset. `num_classes` bounds label validation; when absent
/// the sidecar metadata is consulted, and failing that, max(label) + 1.
pub fn load_jsonl(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::DataFormat {
            path: pstr.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.instruction.trim().is_empty() && rec.response.trim().is_empty() {
            return Err(Error::DataFormat {
                path: pstr.clone(),
                line: i + 1,
                msg: "instruction and response are both empty".into(),
            });
        }
        records.push((i + 1, rec));
    }
    let c = match num_classes {
        Some(c) => c,
        None => match load_meta(path)? {
            Some(meta) => meta.classes,
            None => records.iter().map(|(_, r)| r.label + 1).max().unwrap_or(2),
        },
    };
    for (line, rec) in &records {
        if rec.label >= c {
            return Err(Error::DataFormat {
                path: pstr.clone(),
                line: *line,
                msg: format!("label {} out of range for {} classes", rec.label, c),
            });
        }
    }
    Ok(Dataset {
        records: records.into_iter().map(|(_, r)| r).collect(),
        num_classes: c,
    })
}

pub fn load_meta(path: &Path) -> Result<Option<DatasetMeta>> {
    let sc = sidecar_path(path);
    if !sc.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(sc)?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Write JSONL (one object per line, UTF-8) plus the metadata sidecar.
pub fn save_jsonl(dataset: &Dataset, meta: &DatasetMeta, path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in &dataset.records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    std::fs::write(sidecar_path(path), serde_json::to_string(meta)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Signature tokens exclusive to each class.
    #[serde(default = "default_sig_per_class")]
    pub signature_tokens_per_class: usize,
    /// Size of the shared filler vocabulary.
    #[serde(default = "default_filler_vocab")]
    pub filler_vocab: usize,
    #[serde(default = "default_sig_count")]
    pub signature_tokens_per_record: usize,
    #[serde(default = "default_filler_count")]
    pub filler_tokens_per_record: usize,
    /// Distribution-shift knob: 0 samples fillers uniformly; 1 samples them
    /// from the reversed-rank (skewed) distribution.
    #[serde(default)]
    pub filler_shift: f64,
}

fn default_sig_per_class() -> usize {
    4
}
fn default_filler_vocab() -> usize {
    48
}
fn default_sig_count() -> usize {
    3
}
fn default_filler_count() -> usize {
    5
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic.classes must be >= 2".into()));
        }
        if self.n < self.classes {
            return Err(Error::Config("synthetic.n must be >= classes".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config("synthetic.noise_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            classes: self.classes,
            n: self.n,
            noise_rate: self.noise_rate,
            seed: self.seed,
            generator_version: GENERATOR_VERSION,
        }
    }
}

pub fn signature_token(class: usize, j: usize) -> String {
    format!("sig{class}x{j}")
}

/// Classes get disjoint signature token sets; records mix signature tokens
/// of the true class with shared fillers, so the classes are linearly
/// separable in mean-embedding space at noise_rate = 0. A seeded
/// noise_rate-fraction of labels is then flipped uniformly to another class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes; // balanced
        let mut sig_tokens = Vec::with_capacity(spec.signature_tokens_per_record);
        for _ in 0..spec.signature_tokens_per_record {
            let j = rng.gen_range(0..spec.signature_tokens_per_class);
            sig_tokens.push(signature_token(class, j));
        }
        let mut fillers = Vec::with_capacity(spec.filler_tokens_per_record);
        for _ in 0..spec.filler_tokens_per_record {
            let idx = sample_filler(&mut rng, spec.filler_vocab, spec.filler_shift);
            fillers.push(format!("fill{idx}"));
        }
        records.push(Record {
            instruction: format!("classify sentiment: {}", fillers.join(" ")),
            response: sig_tokens.join(" "),
            label: class,
        });
    }
    // label noise: flip a seeded fraction uniformly to a different class
    let flips = ((spec.noise_rate * spec.n as f64).round() as usize).min(spec.n);
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(flips) {
        let old = records[i].label;
        let offset = rng.gen_range(1..spec.classes);
        records[i].label = (old + offset) % spec.classes;
    }
    Ok(Dataset {
        records,
        num_classes: spec.classes,
    })
}

fn sample_filler(rng: &mut ChaCha8Rng, vocab: usize, shift: f64) -> usize {
    // shift interpolates between uniform and a rank-skewed (triangular)
    // distribution over the filler vocabulary
    if rng.gen_range(0.0..1.0) < shift {
        let a = rng.gen_range(0.0..1.0_f64);
        let b = rng.gen_range(0.0..1.0_f64);
        ((a.min(b) * vocab as f64) as usize).min(vocab - 1)
    } else {
        rng.gen_range(0..vocab)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::contract(format!("split.{name} must be in [0, 1]")));
            }
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::contract("split fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Seeded shuffle followed by a contiguous cut. Nonzero fractions get at
/// least one record when the dataset has >= 10 records.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut n_train = (spec.train * n as f64).round() as usize;
    let mut n_val = (spec.val * n as f64).round() as usize;
    if n >= 10 {
        if spec.train > 0.0 {
            n_train = n_train.max(1);
        }
        if spec.val > 0.0 {
            n_val = n_val.max(1);
        }
    }
    n_train = n_train.min(n);
    n_val = n_val.min(n - n_train);
    if n >= 10 && spec.test > 0.0 && n_train + n_val == n {
        n_val = n_val.saturating_sub(1);
    }
    let take = |ids: &[usize]| Dataset {
        records: ids.iter().map(|&i| dataset.records[i].clone()).collect(),
        num_classes: dataset.num_classes,
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}
