//! The loss algebra: temperature softmax, KL distillation, alpha-weighted
//! noise-robust cross-entropy, the gradient-norm regularizer, the combined
//! objective, and global-norm gradient clipping.
//!
//! KL argument order is KL(teacher || student), with the temperature applied
//! to the teacher only; a symmetric-temperature mode (tau on both sides,
//! scaled by tau^2) sits behind `symmetric_temperature`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::params::{hvp, ParamVector};
use crate::precision::Precision;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_kd_weight")]
    pub kd_weight: f64,
    #[serde(default)]
    pub consistency_weight: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub symmetric_temperature: bool,
}

fn default_tau() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.5
}
fn default_kd_weight() -> f64 {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau: 1.0,
            alpha: 0.5,
            lambda: 0.0,
            kd_weight: 1.0,
            consistency_weight: 0.0,
            clip_norm: None,
            symmetric_temperature: false,
        }
    }
}

impl ObjectiveConfig {
    /// Plain cross-entropy: every extension disabled.
    pub fn plain_ce() -> ObjectiveConfig {
        ObjectiveConfig {
            tau: 1.0,
            alpha: 1.0,
            lambda: 0.0,
            kd_weight: 0.0,
            consistency_weight: 0.0,
            clip_norm: None,
            symmetric_temperature: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::contract("objective.tau must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract("objective.alpha must be in [0, 1]"));
        }
        if self.lambda < 0.0 {
            return Err(Error::contract("objective.lambda must be >= 0"));
        }
        if self.kd_weight < 0.0 {
            return Err(Error::contract("objective.kd_weight must be >= 0"));
        }
        if self.consistency_weight < 0.0 {
            return Err(Error::contract("objective.consistency_weight must be >= 0"));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::contract("objective.clip_norm must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_kd: f64,
    pub l_nr: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_KD={} L_NR={} L_Reg={} L_Total={} |g|pre={} |g|post={}",
            self.l_kd,
            self.l_nr,
            self.l_reg,
            self.l_total,
            self.grad_norm_pre_clip,
            self.grad_norm_post_clip
        )
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::contract("softmax: tau must be > 0"));
    }
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| ((x - mx) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise temperature softmax of a (batch, C) logits tensor.
pub fn softmax_rows(z: &Tensor, tau: f64) -> Result<Tensor> {
    let (rows, cols) = z.rows_cols();
    let mut data = Vec::with_capacity(z.numel());
    for i in 0..rows {
        data.extend(softmax(&z.data[i * cols..(i + 1) * cols], tau)?);
    }
    Ok(Tensor::new(z.shape.clone(), data))
}

/// Sum p_k ln(p_k / q_k) with 0 ln(0/q) = 0.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "kl_div length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > 0.0 {
            acc += pk * (pk / qk).ln();
        }
    }
    Ok(acc)
}

/// Mean over the batch of KL(softmax(z_T / tau) || softmax(z_S)); the
/// symmetric mode uses softmax(z_S / tau) and multiplies by tau^2.
pub fn kd_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    tau: f64,
    symmetric: bool,
) -> Result<f64> {
    if teacher_logits.shape != student_logits.shape {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            lhs: teacher_logits.shape.clone(),
            rhs: student_logits.shape.clone(),
        });
    }
    let (rows, cols) = teacher_logits.rows_cols();
    let student_tau = if symmetric { tau } else { 1.0 };
    let factor = if symmetric { tau * tau } else { 1.0 };
    let mut acc = 0.0;
    for i in 0..rows {
        let pt = softmax(&teacher_logits.data[i * cols..(i + 1) * cols], tau)?;
        let ps = softmax(&student_logits.data[i * cols..(i + 1) * cols], student_tau)?;
        acc += kl_div(&pt, &ps)?;
    }
    Ok(factor * acc / rows as f64)
}

/// Mean over the batch of -(alpha ln p_clean[y] + (1-alpha) ln p_pert[y]),
/// with probabilities clamped below at 1e-12.
pub fn nr_loss(
    clean_probs: &Tensor,
    perturbed_probs: &Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<f64> {
    if clean_probs.shape != perturbed_probs.shape {
        return Err(Error::ShapeMismatch {
            op: "nr_loss",
            lhs: clean_probs.shape.clone(),
            rhs: perturbed_probs.shape.clone(),
        });
    }
    let (rows, cols) = clean_probs.rows_cols();
    if labels.len() != rows {
        return Err(Error::contract("nr_loss: labels/batch length mismatch"));
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        let pc = clean_probs.data[i * cols + y].max(1e-12);
        let pp = perturbed_probs.data[i * cols + y].max(1e-12);
        acc -= alpha * pc.ln() + (1.0 - alpha) * pp.ln();
    }
    Ok(acc / rows as f64)
}

/// Gradient-norm regularizer: value lambda ||g||^2 with g = grad_fn(theta),
/// gradient contribution 2 lambda H g via the finite-difference HVP.
/// lambda = 0 short-circuits without evaluating anything.
pub fn grad_norm_reg(
    grad_fn: impl Fn(&ParamVector) -> ParamVector,
    theta: &ParamVector,
    lambda: f64,
) -> (f64, ParamVector) {
    if lambda == 0.0 {
        return (0.0, theta.zeros_like());
    }
    let g = grad_fn(theta);
    let value = lambda * g.flatten().iter().map(|x| x * x).sum::<f64>();
    let hv = hvp(&grad_fn, theta, &g);
    (value, hv.scale(2.0 * lambda))
}

/// Global-norm clipping: rescale so ||grad||_2 <= c, direction preserved.
pub fn clip_gradients(grad: ParamVector, c: f64) -> Result<ParamVector> {
    if c <= 0.0 {
        return Err(Error::contract("clip_norm must be > 0"));
    }
    let norm = grad.l2_norm();
    if norm <= c {
        Ok(grad)
    } else {
        Ok(grad.scale(c / norm))
    }
}

/// One evaluation of the combined objective on a batch.
pub struct StepLoss {
    pub report: LossReport,
    /// Gradient over the student's trainable parameters, including the
    /// regularizer's 2 lambda H g contribution. Not yet clipped.
    pub grad: ParamVector,
    pub clamp_warnings: usize,
}

/// Compute L_Total = w_KD * L_KD + L_NR + L_Reg and its gradient w.r.t. the
/// student's trainable parameters. The teacher is evaluated without tracking.
/// `delta` is the (already projected) perturbation for this batch; the
/// optional consistency term folds into L_NR.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    student: &ClassifierModel,
    teacher: &ClassifierModel,
    features: &Tensor,
    labels: &[usize],
    delta: Option<&Tensor>,
    cfg: &ObjectiveConfig,
    precision: Precision,
    checked: bool,
) -> Result<StepLoss> {
    cfg.validate()?;
    if student.config.num_classes != teacher.config.num_classes
        || student.config.embed_dim != teacher.config.embed_dim
    {
        return Err(Error::contract(
            "student/teacher num_classes and embed_dim must match",
        ));
    }

    // L_KD is always computed and reported; kd_weight only scales its
    // contribution to L_Total and the gradient.
    let zt = teacher.forward(features, None)?;
    let teacher_probs = Some(softmax_rows(&zt, cfg.tau)?);

    let trainable = student.trainable_names();
    let theta = student.trainable_params();

    let eval = |params: &ParamVector| -> Result<(Tape, Parts)> {
        let mut model = student.clone();
        model.set_trainable_params(params);
        build_partial(&model, features, labels, delta, teacher_probs.as_ref(), cfg, precision, checked)
    };

    let (tape, parts) = eval(&theta)?;
    let grads = tape.backward(parts.partial_total)?;
    let g_partial = parts.params.grads(&tape, &grads, &trainable);

    let l_kd = parts.l_kd(&tape);
    let l_nr = tape.value(parts.nr).item();

    let (l_reg, grad) = if cfg.lambda > 0.0 {
        let g_nr = parts.params.grads(&tape, &grads_of(&tape, parts.nr)?, &trainable);
        let nr_grad_fn = |p: &ParamVector| -> ParamVector {
            let (t, pr) = eval(p).expect("nr gradient re-evaluation");
            let g = t.backward(pr.nr).expect("nr backward");
            pr.params.grads(&t, &g, &trainable)
        };
        let value = cfg.lambda * g_nr.flatten().iter().map(|x| x * x).sum::<f64>();
        let hv = hvp(nr_grad_fn, &theta, &g_nr);
        (value, g_partial.axpy(2.0 * cfg.lambda, &hv))
    } else {
        (0.0, g_partial)
    };

    let l_total = cfg.kd_weight * l_kd + l_nr + l_reg;
    let report = LossReport {
        l_kd,
        l_nr,
        l_reg,
        l_total,
        grad_norm_pre_clip: grad.l2_norm(),
        grad_norm_post_clip: grad.l2_norm(),
    };
    Ok(StepLoss {
        report,
        grad,
        clamp_warnings: tape.clamp_warnings(),
    })
}

fn grads_of(tape: &Tape, root: crate::tensor::NodeId) -> Result<Vec<Option<Tensor>>> {
    tape.backward(root)
}

struct Parts {
    params: crate::model::TapedParams,
    /// w_KD * L_KD + L_NR (the differentiated part; L_Reg is added separately)
    partial_total: crate::tensor::NodeId,
    kd: Option<crate::tensor::NodeId>,
    nr: crate::tensor::NodeId,
}

impl Parts {
    fn l_kd(&self, tape: &Tape) -> f64 {
        self.kd.map(|id| tape.value(id).item()).unwrap_or(0.0)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_partial(
    model: &ClassifierModel,
    features: &Tensor,
    labels: &[usize],
    delta: Option<&Tensor>,
    teacher_probs: Option<&Tensor>,
    cfg: &ObjectiveConfig,
    precision: Precision,
    checked: bool,
) -> Result<(Tape, Parts)> {
    let mut tape = Tape::with_precision(checked, precision);
    let params = model.tape_params(&mut tape);

    let clean = model.tape_forward(&mut tape, &params, features, None)?;
    let ls_clean = tape.log_softmax(clean.logits)?;

    let perturbed = match delta {
        Some(d) if d.data.iter().any(|&x| x != 0.0) => {
            let fw = model.tape_forward(&mut tape, &params, features, Some(d))?;
            Some(tape.log_softmax(fw.logits)?)
        }
        _ => None,
    };
    let ls_pert = perturbed.unwrap_or(ls_clean);

    let batch = features.rows_cols().0 as f64;

    // KD: mean_i KL(P_i || softmax(z_i)) = (1/B)(sum P ln P - sum P * ls)
    let kd = match teacher_probs {
        Some(pt) => {
            let factor = if cfg.symmetric_temperature {
                cfg.tau * cfg.tau
            } else {
                1.0
            };
            let ls_kd = if cfg.symmetric_temperature {
                let scaled = tape.affine(clean.logits, 1.0 / cfg.tau, 0.0)?;
                tape.log_softmax(scaled)?
            } else {
                ls_clean
            };
            let plogp: f64 = pt
                .data
                .iter()
                .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                .sum();
            let cross = tape.mul_const(ls_kd, pt)?;
            let s = tape.sum(cross)?;
            Some(tape.affine(s, -factor / batch, factor * plogp / batch)?)
        }
        None => None,
    };

    // NR: alpha * CE_clean + (1 - alpha) * CE_pert (+ consistency, folded in)
    let ce_clean = {
        let gm = tape.gather_mean(ls_clean, labels)?;
        tape.affine(gm, -1.0, 0.0)?
    };
    let mut nr = if cfg.alpha == 1.0 {
        ce_clean
    } else {
        let ce_pert = {
            let gm = tape.gather_mean(ls_pert, labels)?;
            tape.affine(gm, -1.0, 0.0)?
        };
        if cfg.alpha == 0.0 {
            ce_pert
        } else {
            let a = tape.affine(ce_clean, cfg.alpha, 0.0)?;
            let b = tape.affine(ce_pert, 1.0 - cfg.alpha, 0.0)?;
            tape.add(a, b)?
        }
    };

    if cfg.consistency_weight > 0.0 {
        // symmetric KL between clean and perturbed student distributions:
        // (1/B) sum_i [KL(p||q) + KL(q||p)] = (1/B) sum (p - q) (ln p - ln q)
        let p = tape.exp(ls_clean)?;
        let q = tape.exp(ls_pert)?;
        let dp = tape.sub(p, q)?;
        let dl = tape.sub(ls_clean, ls_pert)?;
        let prod = tape.mul(dp, dl)?;
        let s = tape.sum(prod)?;
        let cons = tape.affine(s, cfg.consistency_weight / batch, 0.0)?;
        nr = tape.add(nr, cons)?;
    }

    let partial_total = match kd {
        Some(kd_id) if cfg.kd_weight > 0.0 => {
            let wk = tape.affine(kd_id, cfg.kd_weight, 0.0)?;
            tape.add(wk, nr)?
        }
        _ => nr,
    };

    Ok((
        tape,
        Parts {
            params,
            partial_total,
            kd,
            nr,
        },
    ))
}
