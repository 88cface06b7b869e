//! Named parameter vectors: ordered tensor segments that flatten to a single
//! contiguous coordinate vector, plus the finite-difference Hessian-vector
//! product used by the gradient-norm regularizer.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub segments: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> ParamVector {
        ParamVector { segments }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.segments {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Rebuild a vector with this one's names/shapes from a flat array.
    pub fn unflatten_like(&self, flat: &[f64]) -> ParamVector {
        assert_eq!(flat.len(), self.total_len());
        let mut segments = Vec::with_capacity(self.segments.len());
        let mut off = 0;
        for (name, t) in &self.segments {
            let n = t.numel();
            segments.push((
                name.clone(),
                Tensor::new(t.shape.clone(), flat[off..off + n].to_vec()),
            ));
            off += n;
        }
        ParamVector { segments }
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|(_, t)| &t.data)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, k: f64) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), t.scale(k)))
                .collect(),
        }
    }

    /// self + alpha * other, segmentwise.
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> ParamVector {
        assert_eq!(self.segments.len(), other.segments.len());
        ParamVector {
            segments: self
                .segments
                .iter()
                .zip(&other.segments)
                .map(|((n, a), (_, b))| (n.clone(), a.zip_map(b, |x, y| x + alpha * y)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// H·v by central differences of gradients:
/// [grad(theta + h v) - grad(theta - h v)] / (2h),
/// h = sqrt(machine eps) * (1 + ||theta||_2) / ||v||_2.
/// A zero direction short-circuits to the zero vector.
pub fn hvp(
    grad_fn: impl Fn(&ParamVector) -> ParamVector,
    theta: &ParamVector,
    v: &ParamVector,
) -> ParamVector {
    let vn = v.l2_norm();
    if vn == 0.0 {
        return theta.zeros_like();
    }
    let h = f64::EPSILON.sqrt() * (1.0 + theta.l2_norm()) / vn;
    let gp = grad_fn(&theta.axpy(h, v));
    let gm = grad_fn(&theta.axpy(-h, v));
    gp.axpy(-1.0, &gm).scale(1.0 / (2.0 * h))
}
