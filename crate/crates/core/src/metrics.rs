//! Safety scores. The four columns are operationalized here: teacher/student
//! argmax agreement, accuracy under attack, prediction stability under random
//! perturbation draws, and their mean. Argmax ties break to the lowest class
//! index everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::perturb::{create_method, random_delta, PerturbSpec};
use crate::tensor::Tensor;

pub const DEFAULT_STABILITY_DRAWS: usize = 8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SafetyScores {
    pub kd_alignment: f64,
    pub noise_robustness: f64,
    pub alignment_stability: f64,
    pub overall: f64,
}

impl SafetyScores {
    pub fn new(kd_alignment: f64, noise_robustness: f64, alignment_stability: f64) -> SafetyScores {
        SafetyScores {
            kd_alignment,
            noise_robustness,
            alignment_stability,
            overall: overall_safety(kd_alignment, noise_robustness, alignment_stability),
        }
    }
}

/// Pre-encoded evaluation samples.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub features: Tensor, // (n, embed)
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn encode(model: &ClassifierModel, texts: &[String], labels: Vec<usize>) -> Result<EvalSet> {
        Ok(EvalSet {
            features: model.encode_batch(texts)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn predictions(model: &ClassifierModel, features: &Tensor) -> Result<Vec<usize>> {
    let z = model.forward(features, None)?;
    Ok((0..features.rows_cols().0).map(|i| z.argmax_row(i)).collect())
}

/// 100 x fraction of samples where student and teacher argmax agree.
pub fn kd_alignment(
    student: &ClassifierModel,
    teacher: &ClassifierModel,
    eval_set: &EvalSet,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::contract("kd_alignment: empty eval set"));
    }
    let ps = predictions(student, &eval_set.features)?;
    let pt = predictions(teacher, &eval_set.features)?;
    let agree = ps.iter().zip(&pt).filter(|(a, b)| a == b).count();
    Ok(100.0 * agree as f64 / eval_set.len() as f64)
}

/// 100 x label accuracy under the eval-spec attack. epsilon = 0 reduces to
/// clean accuracy exactly.
pub fn noise_robustness(
    student: &ClassifierModel,
    eval_set: &EvalSet,
    spec: &PerturbSpec,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::contract("noise_robustness: empty eval set"));
    }
    let method = create_method(&spec.method)?;
    let delta = method.generate(
        student,
        &eval_set.features,
        &eval_set.labels,
        spec,
        spec.seed,
    )?;
    let z = student.forward(&eval_set.features, Some(&delta))?;
    let correct = eval_set
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| z.argmax_row(*i) == y)
        .count();
    Ok(100.0 * correct as f64 / eval_set.len() as f64)
}

/// 100 x mean over samples of the fraction of K seeded random draws whose
/// argmax matches the clean argmax. epsilon = 0 gives exactly 100.
pub fn alignment_stability(
    student: &ClassifierModel,
    eval_set: &EvalSet,
    spec: &PerturbSpec,
    draws: usize,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::contract("alignment_stability: empty eval set"));
    }
    if draws < 1 {
        return Err(Error::contract("alignment_stability: draws must be >= 1"));
    }
    let clean = predictions(student, &eval_set.features)?;
    let n = eval_set.len();
    let mut matches = 0usize;
    for k in 0..draws {
        let delta = random_delta(
            &eval_set.features.shape,
            spec,
            spec.seed.wrapping_add(k as u64),
        );
        let z = student.forward(&eval_set.features, Some(&delta))?;
        for (i, &c) in clean.iter().enumerate() {
            if z.argmax_row(i) == c {
                matches += 1;
            }
        }
    }
    Ok(100.0 * matches as f64 / (n * draws) as f64)
}

/// Arithmetic mean of the three component scores, reported to one decimal.
pub fn overall_safety(kd: f64, nr: f64, stability: f64) -> f64 {
    round1((kd + nr + stability) / 3.0)
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn compute_scores(
    student: &ClassifierModel,
    teacher: &ClassifierModel,
    eval_set: &EvalSet,
    spec: &PerturbSpec,
    draws: usize,
) -> Result<SafetyScores> {
    Ok(SafetyScores::new(
        kd_alignment(student, teacher, eval_set)?,
        noise_robustness(student, eval_set, spec)?,
        alignment_stability(student, eval_set, spec, draws)?,
    ))
}
