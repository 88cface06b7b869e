//! Teacher/student classifiers: hashed-token embedding (frozen), a two-layer
//! relu backbone, and a linear head. The student trains the head only; its
//! embedding and backbone stay bit-identical to the teacher's.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tensor::{matmul, NodeId, Tape, Tensor};

pub const PARAM_NAMES: [&str; 7] = [
    "embedding",
    "backbone.w1",
    "backbone.b1",
    "backbone.w2",
    "backbone.b2",
    "head.w",
    "head.b",
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub backbone_hidden: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.embed_dim < 1 || self.backbone_hidden < 1 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub role: Role,
    pub embedding: Tensor, // vocab x embed
    pub w1: Tensor,        // embed x hidden
    pub b1: Tensor,        // hidden
    pub w2: Tensor,        // hidden x embed
    pub b2: Tensor,        // embed
    pub head_w: Tensor,    // embed x C
    pub head_b: Tensor,    // C
    pub frozen: BTreeSet<String>,
    /// Hash of the run config that produced this model, carried into
    /// checkpoints for provenance. None for models built outside a run.
    pub config_hash: Option<String>,
}

#[derive(Clone, Copy, Debug)]
pub enum HeadInit {
    CopyTeacher,
    Zeros,
    SeededRandom(u64),
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data)
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ClassifierModel {
    pub fn new_teacher(config: ModelConfig) -> Result<ClassifierModel> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        // Embedding rows at unit scale so perturbation budgets in feature
        // space stay comparable across vocab sizes.
        let embedding = uniform_tensor(&mut rng, vec![c.vocab_size, c.embed_dim], 1.0);
        let w1 = uniform_tensor(
            &mut rng,
            vec![c.embed_dim, c.backbone_hidden],
            glorot_limit(c.embed_dim, c.backbone_hidden),
        );
        let b1 = Tensor::zeros(vec![c.backbone_hidden]);
        let w2 = uniform_tensor(
            &mut rng,
            vec![c.backbone_hidden, c.embed_dim],
            glorot_limit(c.backbone_hidden, c.embed_dim),
        );
        let b2 = Tensor::zeros(vec![c.embed_dim]);
        let head_w = uniform_tensor(
            &mut rng,
            vec![c.embed_dim, c.num_classes],
            glorot_limit(c.embed_dim, c.num_classes),
        );
        let head_b = Tensor::zeros(vec![c.num_classes]);
        let mut frozen = BTreeSet::new();
        frozen.insert("embedding".to_string());
        Ok(ClassifierModel {
            config,
            role: Role::Teacher,
            embedding,
            w1,
            b1,
            w2,
            b2,
            head_w,
            head_b,
            frozen,
            config_hash: None,
        })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        match name {
            "embedding" => &self.embedding,
            "backbone.w1" => &self.w1,
            "backbone.b1" => &self.b1,
            "backbone.w2" => &self.w2,
            "backbone.b2" => &self.b2,
            "head.w" => &self.head_w,
            "head.b" => &self.head_b,
            _ => panic!("unknown parameter {name}"),
        }
    }

    fn param_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "embedding" => &mut self.embedding,
            "backbone.w1" => &mut self.w1,
            "backbone.b1" => &mut self.b1,
            "backbone.w2" => &mut self.w2,
            "backbone.b2" => &mut self.b2,
            "head.w" => &mut self.head_w,
            "head.b" => &mut self.head_b,
            _ => panic!("unknown parameter {name}"),
        }
    }

    pub fn freeze_all(&mut self) {
        for name in PARAM_NAMES {
            self.frozen.insert(name.to_string());
        }
    }

    pub fn trainable_names(&self) -> Vec<&'static str> {
        PARAM_NAMES
            .iter()
            .filter(|n| !self.frozen.contains(**n))
            .copied()
            .collect()
    }

    pub fn trainable_params(&self) -> ParamVector {
        ParamVector::new(
            self.trainable_names()
                .iter()
                .map(|n| (n.to_string(), self.param(n).clone()))
                .collect(),
        )
    }

    pub fn set_trainable_params(&mut self, pv: &ParamVector) {
        for (name, t) in &pv.segments {
            assert!(!self.frozen.contains(name), "writing frozen param {name}");
            *self.param_mut(name) = t.clone();
        }
    }

    /// All params, for checkpointing and frozen-invariance checks.
    pub fn all_params(&self) -> ParamVector {
        ParamVector::new(
            PARAM_NAMES
                .iter()
                .map(|n| (n.to_string(), self.param(n).clone()))
                .collect(),
        )
    }

    /// Student shares the teacher's embedding and backbone (copied, then
    /// frozen); the head restarts per policy.
    pub fn clone_for_student(teacher: &ClassifierModel, init: HeadInit) -> ClassifierModel {
        let mut student = teacher.clone();
        student.role = Role::Student;
        student.frozen = BTreeSet::new();
        for name in ["embedding", "backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2"] {
            student.frozen.insert(name.to_string());
        }
        match init {
            HeadInit::CopyTeacher => {}
            HeadInit::Zeros => {
                student.head_w = Tensor::zeros(student.head_w.shape.clone());
                student.head_b = Tensor::zeros(student.head_b.shape.clone());
            }
            HeadInit::SeededRandom(seed) => {
                let c = &student.config;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                student.head_w = uniform_tensor(
                    &mut rng,
                    vec![c.embed_dim, c.num_classes],
                    glorot_limit(c.embed_dim, c.num_classes),
                );
                student.head_b = Tensor::zeros(vec![c.num_classes]);
            }
        }
        student
    }

    /// Mean of embedding rows of FNV-1a-hashed, lowercased, whitespace-split
    /// tokens. Deterministic given the model seed.
    pub fn encode(&self, text: &str) -> Result<Tensor> {
        let e = self.config.embed_dim;
        let mut acc = vec![0.0; e];
        let mut count = 0usize;
        for token in text.to_lowercase().split_whitespace() {
            let row = (fnv1a64(token.as_bytes()) % self.config.vocab_size as u64) as usize;
            let src = &self.embedding.data[row * e..(row + 1) * e];
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += s;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyInput("no tokens after normalization".into()));
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        Ok(Tensor::from_vec(acc))
    }

    pub fn encode_batch(&self, texts: &[String]) -> Result<Tensor> {
        let e = self.config.embed_dim;
        let mut data = Vec::with_capacity(texts.len() * e);
        for t in texts {
            data.extend(self.encode(t)?.data);
        }
        Ok(Tensor::new(vec![texts.len(), e], data))
    }

    /// Logits for a (batch, embed) feature block; `delta` (same shape) is
    /// added to the features first. No gradient tracking.
    pub fn forward(&self, features: &Tensor, delta: Option<&Tensor>) -> Result<Tensor> {
        let x = match delta {
            Some(d) => {
                if d.shape != features.shape {
                    return Err(Error::ShapeMismatch {
                        op: "forward(delta)",
                        lhs: features.shape.clone(),
                        rhs: d.shape.clone(),
                    });
                }
                features.add(d)
            }
            None => features.clone(),
        };
        let h1 = add_bias(&matmul(&x, &self.w1)?, &self.b1).map(relu);
        let h2 = add_bias(&matmul(&h1, &self.w2)?, &self.b2).map(relu);
        Ok(add_bias(&matmul(&h2, &self.head_w)?, &self.head_b))
    }

    /// Lay down parameter leaves on a tape; ids in PARAM_NAMES order.
    pub fn tape_params(&self, tape: &mut Tape) -> TapedParams {
        TapedParams {
            ids: PARAM_NAMES
                .iter()
                .map(|n| (*n, tape.leaf(self.param(n).clone())))
                .collect(),
        }
    }

    /// Tracked forward pass. Returns the input leaf (features + delta), whose
    /// gradient equals the gradient w.r.t. delta, and the logits node.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        params: &TapedParams,
        features: &Tensor,
        delta: Option<&Tensor>,
    ) -> Result<TapedForward> {
        let x = match delta {
            Some(d) => {
                if d.shape != features.shape {
                    return Err(Error::ShapeMismatch {
                        op: "forward(delta)",
                        lhs: features.shape.clone(),
                        rhs: d.shape.clone(),
                    });
                }
                features.add(d)
            }
            None => features.clone(),
        };
        let input = tape.leaf(x);
        let z1 = tape.matmul(input, params.id("backbone.w1"))?;
        let z1b = tape.add(z1, params.id("backbone.b1"))?;
        let h1 = tape.relu(z1b)?;
        let z2 = tape.matmul(h1, params.id("backbone.w2"))?;
        let z2b = tape.add(z2, params.id("backbone.b2"))?;
        let h2 = tape.relu(z2b)?;
        let zh = tape.matmul(h2, params.id("head.w"))?;
        let logits = tape.add(zh, params.id("head.b"))?;
        Ok(TapedForward { input, logits })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            role: self.role,
            config_hash: self.config_hash.clone(),
            params: PARAM_NAMES
                .iter()
                .map(|n| {
                    let t = self.param(n);
                    NamedTensor {
                        name: n.to_string(),
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                        frozen: self.frozen.contains(*n),
                    }
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&doc)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ClassifierModel> {
        let text = std::fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {})",
                doc.version, CHECKPOINT_VERSION
            )));
        }
        doc.config.validate()?;
        let mut model = ClassifierModel::new_teacher(doc.config.clone())?;
        model.role = doc.role;
        model.config_hash = doc.config_hash.clone();
        model.frozen = BTreeSet::new();
        for p in &doc.params {
            if !PARAM_NAMES.contains(&p.name.as_str()) {
                return Err(Error::Config(format!("unknown checkpoint param {}", p.name)));
            }
            *model.param_mut(&p.name) = Tensor::new(p.shape.clone(), p.data.clone());
            if p.frozen {
                model.frozen.insert(p.name.clone());
            }
        }
        Ok(model)
    }
}

pub struct TapedParams {
    ids: Vec<(&'static str, NodeId)>,
}

impl TapedParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| *id)
            .expect("known param name")
    }

    /// Extract a gradient ParamVector for the given names from a backward pass.
    pub fn grads(&self, tape: &Tape, grads: &[Option<Tensor>], names: &[&str]) -> ParamVector {
        ParamVector::new(
            names
                .iter()
                .map(|n| (n.to_string(), tape.leaf_grad(grads, self.id(n))))
                .collect(),
        )
    }
}

pub struct TapedForward {
    pub input: NodeId,
    pub logits: NodeId,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    config: ModelConfig,
    role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    frozen: bool,
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    debug_assert_eq!(cols, b.data.len());
    let mut out = x.clone();
    for i in 0..rows {
        for j in 0..cols {
            out.data[i * cols + j] += b.data[j];
        }
    }
    out
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
