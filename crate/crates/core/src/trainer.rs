//! Teacher pre-training and student fine-tuning under the combined
//! objective. One trainer owns its model for the duration of a run; f64
//! master parameters, with activations and gradients optionally rounded
//! through an emulated reduced-precision format each step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{compute_scores, EvalSet, SafetyScores, DEFAULT_STABILITY_DRAWS};
use crate::model::{ClassifierModel, HeadInit, ModelConfig, Role};
use crate::objective::{clip_gradients, total_loss, LossReport, ObjectiveConfig};
use crate::optim::{create_optimizer, OptimizerConfig};
use crate::params::ParamVector;
use crate::perturb::{create_method, PerturbSpec};
use crate::precision::Precision;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub budget_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    16
}
fn default_optimizer() -> String {
    "adam".to_string()
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let Some(b) = self.budget_steps {
            if b == 0 {
                return Err(Error::Config("train.budget_steps must be >= 1".into()));
            }
        }
        let _ = create_optimizer(&self.optimizer, &self.optimizer_config())?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainTrace {
    pub reports: Vec<LossReport>,
    pub wall_ms: Vec<f64>,
    pub epoch_scores: Vec<SafetyScores>,
}

impl TrainTrace {
    pub fn steps(&self) -> usize {
        self.reports.len()
    }

    /// CSV with columns step,L_KD,L_NR,L_Reg,L_Total,grad_pre,grad_post,wall_ms.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,L_KD,L_NR,L_Reg,L_Total,grad_pre,grad_post,wall_ms\n");
        for (i, (r, w)) in self.reports.iter().zip(&self.wall_ms).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                i,
                r.l_kd,
                r.l_nr,
                r.l_reg,
                r.l_total,
                r.grad_norm_pre_clip,
                r.grad_norm_post_clip,
                w
            ));
        }
        out
    }
}

/// Encode an entire dataset once against a model's (frozen) embedding.
pub fn encode_dataset(model: &ClassifierModel, data: &Dataset) -> Result<EvalSet> {
    EvalSet::encode(model, &data.texts(), data.labels())
}

fn batch_of(features: &Tensor, labels: &[usize], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let (_, e) = features.rows_cols();
    let mut data = Vec::with_capacity(idx.len() * e);
    let mut ls = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(features.row(i));
        ls.push(labels[i]);
    }
    (Tensor::new(vec![idx.len(), e], data), ls)
}

struct TrainLoop<'a> {
    teacher: &'a ClassifierModel,
    obj: &'a ObjectiveConfig,
    perturb: &'a PerturbSpec,
    cfg: &'a TrainConfig,
    eval: Option<(&'a EvalSet, usize)>,
}

impl TrainLoop<'_> {
    /// Run the optimization loop over `model`'s trainable parameters.
    fn run(&self, model: &mut ClassifierModel, train: &EvalSet) -> Result<TrainTrace> {
        let mut trace = TrainTrace::default();
        let method = create_method(&self.perturb.method)?;
        let mut optimizer = create_optimizer(&self.cfg.optimizer, &self.cfg.optimizer_config())?;
        // data order rng independent of model seed
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e3779b97f4a7c15);
        let n = train.len();
        let mut step = 0usize;
        let budget = self.cfg.budget_steps.unwrap_or(usize::MAX);

        'epochs: for _epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                if step >= budget {
                    break 'epochs;
                }
                let t0 = Instant::now();
                let (features, labels) = batch_of(&train.features, &train.labels, chunk);
                let features = rounded(&features, self.cfg.precision);
                let delta = method.generate(
                    model,
                    &features,
                    &labels,
                    self.perturb,
                    self.perturb.seed.wrapping_add(step as u64),
                )?;
                let delta = rounded(&delta, self.cfg.precision);

                let mut step_loss = total_loss(
                    model,
                    self.teacher,
                    &features,
                    &labels,
                    Some(&delta),
                    self.obj,
                    self.cfg.precision,
                    false,
                )?;
                if !step_loss.report.l_total.is_finite() {
                    return Err(Error::NumericAbort {
                        step,
                        report: step_loss.report.to_string(),
                    });
                }

                let mut grad = step_loss.grad;
                round_params(&mut grad, self.cfg.precision);
                if let Some(c) = self.obj.clip_norm {
                    grad = clip_gradients(grad, c)?;
                }
                step_loss.report.grad_norm_post_clip = grad.l2_norm();

                let mut params = model.trainable_params();
                optimizer.step(&mut params, &grad);
                model.set_trainable_params(&params);

                trace.reports.push(step_loss.report);
                trace.wall_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                step += 1;
            }
            if let Some((val, draws)) = self.eval {
                trace
                    .epoch_scores
                    .push(compute_scores(model, self.teacher, val, self.perturb, draws)?);
            }
        }
        Ok(trace)
    }
}

fn rounded(t: &Tensor, p: Precision) -> Tensor {
    if p == Precision::F64 {
        return t.clone();
    }
    let mut out = t.clone();
    p.round_slice(&mut out.data);
    out
}

fn round_params(pv: &mut ParamVector, p: Precision) {
    if p == Precision::F64 {
        return;
    }
    for (_, t) in pv.segments.iter_mut() {
        p.round_slice(&mut t.data);
    }
}

/// Train a teacher with plain cross-entropy on clean data, then freeze it.
pub fn pretrain_teacher(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    train_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("pretrain_teacher: empty dataset".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = data.labels().into_iter().collect();
    if distinct.len() < 2 {
        return Err(Error::contract(format!(
            "pretrain_teacher: labels span {} class(es); at least 2 required",
            distinct.len()
        )));
    }
    let mut teacher = ClassifierModel::new_teacher(model_cfg.clone())?;
    let train = encode_dataset(&teacher, data)?;
    let spec = PerturbSpec::none();
    let obj = ObjectiveConfig::plain_ce();
    // teacher distills from itself here; kd_weight = 0 makes it inert
    let reference = teacher.clone();
    let lp = TrainLoop {
        teacher: &reference,
        obj: &obj,
        perturb: &spec,
        cfg: train_cfg,
        eval: None,
    };
    lp.run(&mut teacher, &train)?;
    teacher.freeze_all();
    teacher.role = Role::Teacher;
    Ok(teacher)
}

/// Fine-tune a student (head only) against a frozen teacher under the full
/// objective. Per-epoch safety scores are recorded on `val` when non-empty.
pub fn finetune_student(
    teacher: &ClassifierModel,
    data: &Dataset,
    val: Option<&Dataset>,
    obj: &ObjectiveConfig,
    perturb: &PerturbSpec,
    train_cfg: &TrainConfig,
    head_init: HeadInit,
) -> Result<(ClassifierModel, TrainTrace)> {
    obj.validate()?;
    perturb.validate()?;
    train_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("finetune_student: empty dataset".into()));
    }
    let mut student = ClassifierModel::clone_for_student(teacher, head_init);
    let train = encode_dataset(&student, data)?;
    let val_set = match val {
        Some(v) if !v.is_empty() => Some(encode_dataset(&student, v)?),
        _ => None,
    };
    let lp = TrainLoop {
        teacher,
        obj,
        perturb,
        cfg: train_cfg,
        eval: val_set.as_ref().map(|v| (v, DEFAULT_STABILITY_DRAWS)),
    };
    let trace = lp.run(&mut student, &train)?;
    Ok((student, trace))
}

/// Round a tensor through a precision mode (identity at f64).
pub fn apply_precision(t: &Tensor, mode: Precision) -> Tensor {
    rounded(t, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn synth(n: usize, noise: f64, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n,
            classes: 3,
            noise_rate: noise,
            seed,
            signature_tokens_per_class: 4,
            filler_vocab: 24,
            signature_tokens_per_record: 3,
            filler_tokens_per_record: 4,
            filler_shift: 0.0,
        })
        .unwrap()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 128,
            embed_dim: 12,
            backbone_hidden: 16,
            num_classes: 3,
            seed: 31,
        }
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: 0.01,
            batch_size: 16,
            optimizer: "adam".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            precision: Precision::F64,
            budget_steps: None,
            seed: 3,
        }
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let data = synth(60, 0.0, 5);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(0)).unwrap();
        let fresh = ClassifierModel::new_teacher(model_cfg()).unwrap();
        assert_eq!(teacher.all_params(), fresh.all_params());
    }

    #[test]
    fn pretraining_is_seed_deterministic() {
        let data = synth(60, 0.0, 5);
        let a = pretrain_teacher(&data, &model_cfg(), &train_cfg(3)).unwrap();
        let b = pretrain_teacher(&data, &model_cfg(), &train_cfg(3)).unwrap();
        assert_eq!(a.all_params(), b.all_params());
    }

    #[test]
    fn single_class_data_is_refused() {
        let mut data = synth(30, 0.0, 5);
        for r in data.records.iter_mut() {
            r.label = 1;
        }
        assert!(pretrain_teacher(&data, &model_cfg(), &train_cfg(1)).is_err());
    }

    #[test]
    fn separable_teacher_reaches_high_accuracy() {
        let data = synth(120, 0.0, 9);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(40)).unwrap();
        let es = encode_dataset(&teacher, &data).unwrap();
        let acc = crate::metrics::noise_robustness(&teacher, &es, &PerturbSpec::none()).unwrap();
        assert!(acc >= 98.0, "train accuracy {acc}");
    }

    #[test]
    fn frozen_params_survive_finetuning() {
        let data = synth(60, 0.1, 5);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(5)).unwrap();
        let before_backbone: Vec<Tensor> = ["embedding", "backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2"]
            .iter()
            .map(|n| teacher.param(n).clone())
            .collect();
        let obj = ObjectiveConfig {
            lambda: 0.001,
            ..Default::default()
        };
        let spec = PerturbSpec {
            epsilon: 0.2,
            seed: 1,
            ..PerturbSpec::none()
        };
        let spec = PerturbSpec {
            method: "projected-ascent".into(),
            steps: 2,
            ..spec
        };
        let (student, trace) = finetune_student(
            &teacher,
            &data,
            None,
            &obj,
            &spec,
            &train_cfg(2),
            HeadInit::SeededRandom(7),
        )
        .unwrap();
        for (name, before) in ["embedding", "backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2"]
            .iter()
            .zip(&before_backbone)
        {
            assert_eq!(student.param(name), before, "{name} changed");
        }
        assert!(trace.steps() > 0);
        // report identity on every logged step
        for r in &trace.reports {
            assert!((r.l_total - (obj.kd_weight * r.l_kd + r.l_nr + r.l_reg)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_with_copied_head_stays_at_teacher() {
        let data = synth(40, 0.0, 2);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(2)).unwrap();
        let mut cfg = train_cfg(2);
        cfg.learning_rate = 1e-300; // effectively zero; 0.0 is a config error
        cfg.optimizer = "sgd".into();
        let (student, _) = finetune_student(
            &teacher,
            &data,
            None,
            &ObjectiveConfig::plain_ce(),
            &PerturbSpec::none(),
            &cfg,
            HeadInit::CopyTeacher,
        )
        .unwrap();
        for (a, b) in student.head_w.data.iter().zip(&teacher.head_w.data) {
            assert!((a - b).abs() < 1e-250);
        }
    }

    #[test]
    fn collapsed_objective_matches_plain_ce_trajectory() {
        // w_KD=0, lambda=0, eps=0, alpha=1 must equal plain CE fine-tuning bitwise
        let data = synth(50, 0.0, 8);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(2)).unwrap();
        let collapsed = ObjectiveConfig {
            tau: 1.0,
            alpha: 1.0,
            lambda: 0.0,
            kd_weight: 0.0,
            consistency_weight: 0.0,
            clip_norm: None,
            symmetric_temperature: false,
        };
        let (a, _) = finetune_student(
            &teacher, &data, None, &collapsed, &PerturbSpec::none(),
            &train_cfg(3), HeadInit::SeededRandom(4),
        )
        .unwrap();
        let (b, _) = finetune_student(
            &teacher, &data, None, &ObjectiveConfig::plain_ce(), &PerturbSpec::none(),
            &train_cfg(3), HeadInit::SeededRandom(4),
        )
        .unwrap();
        assert_eq!(a.head_w, b.head_w);
        assert_eq!(a.head_b, b.head_b);
    }

    #[test]
    fn loss_decreases_between_first_and_last_epoch() {
        let data = synth(90, 0.0, 12);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(10)).unwrap();
        let (_, trace) = finetune_student(
            &teacher,
            &data,
            None,
            &ObjectiveConfig::default(),
            &PerturbSpec {
                epsilon: 0.1,
                seed: 2,
                ..PerturbSpec::none()
            },
            &train_cfg(8),
            HeadInit::SeededRandom(6),
        )
        .unwrap();
        let steps_per_epoch = trace.steps() / 8;
        let first: f64 = trace.reports[..steps_per_epoch]
            .iter()
            .map(|r| r.l_total)
            .sum::<f64>()
            / steps_per_epoch as f64;
        let last: f64 = trace.reports[trace.steps() - steps_per_epoch..]
            .iter()
            .map(|r| r.l_total)
            .sum::<f64>()
            / steps_per_epoch as f64;
        assert!(last <= first, "epoch means: first {first}, last {last}");
    }

    #[test]
    fn budget_steps_caps_the_loop() {
        let data = synth(64, 0.0, 3);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(1)).unwrap();
        let mut cfg = train_cfg(10);
        cfg.budget_steps = Some(7);
        let (_, trace) = finetune_student(
            &teacher, &data, None, &ObjectiveConfig::default(), &PerturbSpec::none(),
            &cfg, HeadInit::Zeros,
        )
        .unwrap();
        assert_eq!(trace.steps(), 7);
        // budget larger than epochs * steps_per_epoch runs them all
        let mut cfg2 = train_cfg(2);
        cfg2.budget_steps = Some(10_000);
        let (_, trace2) = finetune_student(
            &teacher, &data, None, &ObjectiveConfig::default(), &PerturbSpec::none(),
            &cfg2, HeadInit::Zeros,
        )
        .unwrap();
        assert_eq!(trace2.steps(), 2 * 64usize.div_ceil(16));
    }

    #[test]
    fn finetune_trace_is_deterministic_at_f64() {
        let data = synth(48, 0.05, 21);
        let teacher = pretrain_teacher(&data, &model_cfg(), &train_cfg(2)).unwrap();
        let run = || {
            finetune_student(
                &teacher,
                &data,
                None,
                &ObjectiveConfig::default(),
                &PerturbSpec {
                    epsilon: 0.15,
                    seed: 9,
                    ..PerturbSpec::none()
                },
                &train_cfg(2),
                HeadInit::SeededRandom(5),
            )
            .unwrap()
        };
        let (ma, ta) = run();
        let (mb, tb) = run();
        assert_eq!(ma.head_w, mb.head_w);
        for (ra, rb) in ta.reports.iter().zip(&tb.reports) {
            assert_eq!(ra.l_total.to_bits(), rb.l_total.to_bits());
        }
    }

    #[test]
    fn apply_precision_modes() {
        let t = Tensor::from_vec(vec![1.0, 1.0 / 3.0]);
        assert_eq!(apply_precision(&t, Precision::F64), t);
        let b = apply_precision(&t, Precision::Bf16Emu);
        assert_eq!(b.data, vec![1.0, 0.33203125]);
    }
}
