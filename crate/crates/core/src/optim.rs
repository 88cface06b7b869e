//! Optimizers behind a common trait, selected by name from config.

use crate::error::{Error, Result};
use crate::params::ParamVector;

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// One in-place update of `params` from `grad`.
    fn step(&mut self, params: &mut ParamVector, grad: &ParamVector);
}

pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        *params = params.axpy(-self.learning_rate, grad);
    }
}

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Option<Vec<f64>>,
    v: Option<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            t: 0,
            m: None,
            v: None,
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        let g = grad.flatten();
        let n = g.len();
        let m = self.m.get_or_insert_with(|| vec![0.0; n]);
        let v = self.v.get_or_insert_with(|| vec![0.0; n]);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut flat = params.flatten();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            flat[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
        *params = params.unflatten_like(&flat);
    }
}

pub const OPTIMIZER_NAMES: [&str; 2] = ["sgd", "adam"];

pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub fn create_optimizer(name: &str, cfg: &OptimizerConfig) -> Result<Box<dyn Optimizer>> {
    match name {
        "sgd" => Ok(Box::new(Sgd {
            learning_rate: cfg.learning_rate,
        })),
        "adam" => Ok(Box::new(Adam::new(
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        ))),
        _ => Err(Error::UnknownStrategy {
            kind: "optimizer",
            name: name.to_string(),
            known: OPTIMIZER_NAMES.join(", "),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pv(data: Vec<f64>) -> ParamVector {
        ParamVector::new(vec![("t".into(), Tensor::from_vec(data))])
    }

    #[test]
    fn sgd_single_step_on_quadratic() {
        // L = 1/2 ||theta||^2, grad = theta; lr = 0.1, theta0 = 1 -> 0.9
        let mut opt = Sgd { learning_rate: 0.1 };
        let mut theta = pv(vec![1.0]);
        let grad = theta.clone();
        opt.step(&mut theta, &grad);
        assert_eq!(theta.flatten(), vec![0.9]);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        // bias correction makes the first step ~lr * sign(g)
        let mut opt = Adam::new(0.001, 0.9, 0.999, 1e-8);
        let mut theta = pv(vec![1.0, -2.0]);
        opt.step(&mut theta.clone(), &pv(vec![0.5, -0.5]));
        opt.step(&mut theta, &pv(vec![0.5, -0.5]));
        let f = theta.flatten();
        assert!(f[0] < 1.0 && f[1] > -2.0);
    }

    #[test]
    fn unknown_optimizer_is_rejected() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        assert!(create_optimizer("rmsprop", &cfg).is_err());
    }
}
