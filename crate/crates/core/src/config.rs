//! Run configuration: a single TOML document with one section per subsystem.
//! Unknown keys are errors, so sweep typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::perturb::PerturbSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub perturb: PerturbSpec,
    pub train: TrainConfig,
    /// Teacher pre-training overrides; defaults to plain-CE with the student's
    /// optimizer settings.
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub optimizer: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Attack spec used for scoring; defaults to the training perturb spec.
    #[serde(default)]
    pub perturb: Option<PerturbSpec>,
    #[serde(default = "default_draws")]
    pub stability_draws: usize,
    /// Distillation reference for kd_alignment; defaults to the checkpoint
    /// under evaluation (self-agreement).
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
}

fn default_draws() -> usize {
    crate::metrics::DEFAULT_STABILITY_DRAWS
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            perturb: None,
            stability_draws: default_draws(),
            teacher_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::Config("run_id must be non-empty".into()));
        }
        self.model.validate()?;
        self.objective.validate()?;
        self.perturb.validate()?;
        self.train.validate()?;
        self.data.split.validate()?;
        match (&self.data.path, &self.data.synthetic) {
            (None, None) => {
                return Err(Error::Config(
                    "data: either path or [data.synthetic] is required".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data: path and [data.synthetic] are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
            if s.classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.synthetic.classes ({}) != model.num_classes ({})",
                    s.classes, self.model.num_classes
                )));
            }
        }
        if let Some(p) = &self.eval.perturb {
            p.validate()?;
        }
        if self.eval.stability_draws < 1 {
            return Err(Error::Config("eval.stability_draws must be >= 1".into()));
        }
        Ok(())
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        let t = self.teacher.clone().unwrap_or(TeacherConfig {
            epochs: 30,
            learning_rate: None,
            optimizer: None,
        });
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate.unwrap_or(self.train.learning_rate),
            optimizer: t.optimizer.unwrap_or_else(|| self.train.optimizer.clone()),
            budget_steps: None,
            ..self.train.clone()
        }
    }

    pub fn eval_perturb(&self) -> PerturbSpec {
        self.eval.perturb.clone().unwrap_or_else(|| self.perturb.clone())
    }

    /// Canonical TOML text of the resolved config (echoed into output dirs).
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Offset every seed by `r` so sweep repeats are independent runs.
    pub fn with_derived_seeds(&self, r: u64) -> RunConfig {
        let mut c = self.clone();
        c.model.seed = c.model.seed.wrapping_add(r);
        c.train.seed = c.train.seed.wrapping_add(r);
        c.perturb.seed = c.perturb.seed.wrapping_add(r);
        c.data.split.seed = c.data.split.seed.wrapping_add(r);
        if let Some(s) = c.data.synthetic.as_mut() {
            s.seed = s.seed.wrapping_add(r);
        }
        if let Some(p) = c.eval.perturb.as_mut() {
            p.seed = p.seed.wrapping_add(r);
        }
        c
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const MINIMAL: &str = r#"
run_id = "t"
output_dir = "out/t"

[model]
vocab_size = 64
embed_dim = 8
backbone_hidden = 12
num_classes = 3
seed = 1

[perturb]
epsilon = 0.2

[train]
epochs = 2
learning_rate = 0.01

[data.synthetic]
n = 30
classes = 3

[data.split]
train = 0.8
val = 0.1
test = 0.1
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.objective.kd_weight, 1.0);
        assert_eq!(cfg.perturb.method, "projected-ascent");
        assert_eq!(cfg.train.optimizer, "adam");
    }

    #[test]
    fn missing_learning_rate_names_the_key() {
        let text = MINIMAL.replace("learning_rate = 0.01\n", "");
        let err = toml::from_str::<RunConfig>(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{MINIMAL}\n[objective]\ntua = 2.0\n");
        let err = toml::from_str::<RunConfig>(&text).unwrap_err().to_string();
        assert!(err.contains("tua"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.config_hash(), cfg.config_hash());
        let other = cfg.with_derived_seeds(1);
        assert_ne!(cfg.config_hash(), other.config_hash());
    }
}
