//! Perturbation generation under a per-sample lp-ball constraint
//! ||delta_i||_p <= epsilon. Each generation method is a strategy behind
//! [`PerturbMethod`], selected by name from config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    LInf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    #[serde(default = "default_p")]
    pub p: PNorm,
    pub epsilon: f64,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// 0.0 means "auto": epsilon / 4.
    #[serde(default)]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_p() -> PNorm {
    PNorm::L2
}
fn default_method() -> String {
    "projected-ascent".to_string()
}
fn default_steps() -> usize {
    5
}

impl PerturbSpec {
    pub fn none() -> PerturbSpec {
        PerturbSpec {
            p: PNorm::L2,
            epsilon: 0.0,
            method: "none".into(),
            steps: 1,
            step_size: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::contract("perturb.epsilon must be >= 0"));
        }
        if self.steps < 1 {
            return Err(Error::contract("perturb.steps must be >= 1"));
        }
        if self.step_size < 0.0 {
            return Err(Error::contract("perturb.step_size must be > 0"));
        }
        create_method(&self.method)?;
        Ok(())
    }

    pub fn resolved_step_size(&self) -> f64 {
        if self.step_size > 0.0 {
            self.step_size
        } else if self.epsilon > 0.0 {
            self.epsilon / 4.0
        } else {
            1e-3
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> PerturbSpec {
        let mut s = self.clone();
        s.epsilon = epsilon;
        s
    }
}

/// Project each sample row of `delta` onto the epsilon-ball: componentwise
/// clamp for inf, radial scaling for 2.
pub fn project(delta: &Tensor, p: PNorm, epsilon: f64) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::contract("project: epsilon must be >= 0"));
    }
    match p {
        PNorm::LInf => Ok(delta.map(|x| x.clamp(-epsilon, epsilon))),
        PNorm::L2 => {
            let (rows, cols) = delta.rows_cols();
            let mut out = delta.clone();
            for i in 0..rows {
                let row = &mut out.data[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > epsilon {
                    let k = epsilon / norm;
                    for x in row.iter_mut() {
                        *x *= k;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Uniform sample in the epsilon-ball, per row. inf: independent uniform
/// components; 2: uniform direction scaled by eps * u^(1/d).
pub fn random_delta(shape: &[usize], spec: &PerturbSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = spec.epsilon;
    let t = Tensor::zeros(shape.to_vec());
    if eps == 0.0 {
        return t;
    }
    let (rows, cols) = t.rows_cols();
    let mut out = t;
    match spec.p {
        PNorm::LInf => {
            for x in out.data.iter_mut() {
                *x = rng.gen_range(-eps..eps);
            }
        }
        PNorm::L2 => {
            for i in 0..rows {
                // gaussian direction via Box-Muller
                let mut dir = vec![0.0; cols];
                for d in dir.iter_mut() {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    *d = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                }
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                let radius = eps * rng.gen_range(0.0..1.0_f64).powf(1.0 / cols as f64);
                for (o, d) in out.data[i * cols..(i + 1) * cols].iter_mut().zip(&dir) {
                    *o = d / norm * radius;
                }
            }
        }
    }
    out
}

/// Gradient of the perturbed-branch cross-entropy w.r.t. delta.
fn delta_grad(
    model: &ClassifierModel,
    features: &Tensor,
    labels: &[usize],
    delta: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new(false);
    let params = model.tape_params(&mut tape);
    let fw = model.tape_forward(&mut tape, &params, features, Some(delta))?;
    let ls = tape.log_softmax(fw.logits)?;
    let gm = tape.gather_mean(ls, labels)?;
    let loss = tape.affine(gm, -1.0, 0.0)?;
    let grads = tape.backward(loss)?;
    Ok(tape.leaf_grad(&grads, fw.input))
}

/// One ascent step direction: sign(g) for inf, per-row normalized g for 2.
/// Rows with ||g|| < 1e-12 are left at zero (skip, no division).
fn ascent_direction(grad: &Tensor, p: PNorm) -> Tensor {
    match p {
        // f64::signum maps +0.0 to 1.0; a zero gradient component must not move.
        PNorm::LInf => grad.map(|x| if x == 0.0 { 0.0 } else { x.signum() }),
        PNorm::L2 => {
            let (rows, cols) = grad.rows_cols();
            let mut out = Tensor::zeros(grad.shape.clone());
            for i in 0..rows {
                let g = &grad.data[i * cols..(i + 1) * cols];
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    continue;
                }
                for (o, &x) in out.data[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                    *o = x / norm;
                }
            }
            out
        }
    }
}

/// A perturbation generation strategy. Pure in the model: parameters are
/// read, never written.
pub trait PerturbMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn generate(
        &self,
        model: &ClassifierModel,
        features: &Tensor,
        labels: &[usize],
        spec: &PerturbSpec,
        seed: u64,
    ) -> Result<Tensor>;
}

struct NoPerturb;

impl PerturbMethod for NoPerturb {
    fn name(&self) -> &'static str {
        "none"
    }

    fn generate(
        &self,
        _model: &ClassifierModel,
        features: &Tensor,
        _labels: &[usize],
        _spec: &PerturbSpec,
        _seed: u64,
    ) -> Result<Tensor> {
        Ok(Tensor::zeros(features.shape.clone()))
    }
}

struct RandomNoise;

impl PerturbMethod for RandomNoise {
    fn name(&self) -> &'static str {
        "random"
    }

    fn generate(
        &self,
        _model: &ClassifierModel,
        features: &Tensor,
        _labels: &[usize],
        spec: &PerturbSpec,
        seed: u64,
    ) -> Result<Tensor> {
        Ok(random_delta(&features.shape, spec, seed))
    }
}

struct SignStep;

impl PerturbMethod for SignStep {
    fn name(&self) -> &'static str {
        "sign-step"
    }

    fn generate(
        &self,
        model: &ClassifierModel,
        features: &Tensor,
        labels: &[usize],
        spec: &PerturbSpec,
        _seed: u64,
    ) -> Result<Tensor> {
        if spec.epsilon == 0.0 {
            return Ok(Tensor::zeros(features.shape.clone()));
        }
        let zero = Tensor::zeros(features.shape.clone());
        let g = delta_grad(model, features, labels, &zero)?;
        let step = ascent_direction(&g, spec.p).scale(spec.epsilon);
        project(&step, spec.p, spec.epsilon)
    }
}

struct ProjectedAscent;

impl PerturbMethod for ProjectedAscent {
    fn name(&self) -> &'static str {
        "projected-ascent"
    }

    fn generate(
        &self,
        model: &ClassifierModel,
        features: &Tensor,
        labels: &[usize],
        spec: &PerturbSpec,
        seed: u64,
    ) -> Result<Tensor> {
        if spec.epsilon == 0.0 {
            return Ok(Tensor::zeros(features.shape.clone()));
        }
        let mut delta = random_delta(&features.shape, spec, seed);
        let step = spec.resolved_step_size();
        for _ in 0..spec.steps {
            let g = delta_grad(model, features, labels, &delta)?;
            let dir = ascent_direction(&g, spec.p);
            delta = project(&delta.add(&dir.scale(step)), spec.p, spec.epsilon)?;
        }
        Ok(delta)
    }
}

pub const METHOD_NAMES: [&str; 4] = ["none", "random", "sign-step", "projected-ascent"];

pub fn create_method(name: &str) -> Result<Box<dyn PerturbMethod>> {
    match name {
        "none" => Ok(Box::new(NoPerturb)),
        "random" => Ok(Box::new(RandomNoise)),
        "sign-step" => Ok(Box::new(SignStep)),
        "projected-ascent" => Ok(Box::new(ProjectedAscent)),
        _ => Err(Error::UnknownStrategy {
            kind: "perturb method",
            name: name.to_string(),
            known: METHOD_NAMES.join(", "),
        }),
    }
}

/// ||row||_p <= eps check used by tests and the ball-invariant suite.
pub fn within_ball(delta: &Tensor, p: PNorm, epsilon: f64, rel_tol: f64) -> bool {
    let (rows, cols) = delta.rows_cols();
    for i in 0..rows {
        let row = &delta.data[i * cols..(i + 1) * cols];
        let norm = match p {
            PNorm::LInf => row.iter().cloned().fold(0.0, |a: f64, x| a.max(x.abs())),
            PNorm::L2 => row.iter().map(|x| x * x).sum::<f64>().sqrt(),
        };
        let tol = match p {
            PNorm::LInf => 0.0,
            PNorm::L2 => rel_tol * epsilon.max(1.0),
        };
        if norm > epsilon + tol {
            return false;
        }
    }
    true
}
