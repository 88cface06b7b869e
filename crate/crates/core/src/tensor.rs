//! Dense tensors and a Wengert tape for reverse-mode autodiff.
//!
//! Tensors are flat row-major `Vec<f64>` with a shape. All differentiable
//! computation goes through a [`Tape`]: forward ops append nodes, `backward`
//! walks the node list in reverse. Parents of node k always have id < k, so
//! a single reverse sweep visits every node exactly once.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::precision::Precision;

/// Floor applied to picked log-probabilities, guarding log-of-zero when a
/// softmax saturates at reduced precision.
pub const LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    /// Like `new` but rejects non-finite scalars (checked mode construction).
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow { op: "construct" });
        }
        Ok(Tensor::new(shape, data))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![1.0; n] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows / row width for a 2-d view; 1-d tensors are one row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            1 => (1, self.shape[0]),
            _ => panic!("rows_cols on shape {:?}", self.shape),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn argmax_row(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

/// Ties break toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MulConst(Tensor),
    Matmul,
    Relu,
    Exp,
    Affine { scale: f64 },
    Sum,
    LogSoftmaxRows,
    GatherMean { labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MulConst(_) => "mul_const",
            Op::Matmul => "matmul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Affine { .. } => "affine",
            Op::Sum => "sum",
            Op::LogSoftmaxRows => "log_softmax",
            Op::GatherMean { .. } => "gather_mean",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// Append-only operation tape. One training step owns exactly one tape.
pub struct Tape {
    nodes: Vec<Node>,
    pub checked: bool,
    pub precision: Precision,
    clamp_warnings: Cell<usize>,
}

enum Broadcast {
    Same,
    RhsRow, // rhs shape equals lhs shape minus the leading batch dim
}

impl Tape {
    pub fn new(checked: bool) -> Tape {
        Tape {
            nodes: Vec::new(),
            checked,
            precision: Precision::F64,
            clamp_warnings: Cell::new(0),
        }
    }

    pub fn with_precision(checked: bool, precision: Precision) -> Tape {
        let mut t = Tape::new(checked);
        t.precision = precision;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Times a picked log-probability hit the [`LOG_FLOOR`] clamp.
    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings.get()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, vec![], value)
    }

    fn push_raw(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, mut value: Tensor) -> Result<NodeId> {
        self.precision.round_slice(&mut value.data);
        if self.checked && value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow { op: op.name() });
        }
        Ok(self.push_raw(op, parents, value))
    }

    fn broadcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let sa = &self.nodes[a].value.shape;
        let sb = &self.nodes[b].value.shape;
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sa.len() == sb.len() + 1 && &sa[1..] == sb.as_slice() {
            Ok(Broadcast::RhsRow)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
        }
    }

    fn elementwise(
        &mut self,
        op: Op,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let bc = self.broadcast_kind(opname, a, b)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = match bc {
            Broadcast::Same => va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::RhsRow => {
                let w = vb.data.len();
                va.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb.data[i % w]))
                    .collect()
            }
        };
        let value = Tensor { shape: va.shape.clone(), data };
        self.push(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Elementwise product with an untracked constant of identical shape.
    pub fn mul_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if va.shape != c.shape {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: va.shape.clone(),
                rhs: c.shape.clone(),
            });
        }
        let value = va.zip_map(c, |x, y| x * y);
        self.push(Op::MulConst(c.clone()), vec![a], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape.clone();
        let sb = self.nodes[b].value.shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        self.push(Op::Matmul, vec![a, b], value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu, vec![a], value)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp, vec![a], value)
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let value = self.nodes[a].value.map(|x| scale * x + shift);
        self.push(Op::Affine { scale }, vec![a], value)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.nodes[a].value.data.iter().sum());
        self.push(Op::Sum, vec![a], value)
    }

    /// Row-wise log-softmax of a (batch, C) tensor, max-subtracted.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let (rows, cols) = va.rows_cols();
        let mut data = Vec::with_capacity(va.data.len());
        for i in 0..rows {
            let row = &va.data[i * cols..(i + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor { shape: va.shape.clone(), data };
        self.push(Op::LogSoftmaxRows, vec![a], value)
    }

    /// Mean over rows of `x[i, labels[i]]`, with picked values clamped below
    /// at [`LOG_FLOOR`] (clamped entries get zero gradient).
    pub fn gather_mean(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let (rows, cols) = va.rows_cols();
        if labels.len() != rows {
            return Err(Error::contract(format!(
                "gather_mean: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(Error::contract(format!(
                    "label {} out of range for {} classes",
                    y, cols
                )));
            }
            let v = va.data[i * cols + y];
            if v < LOG_FLOOR {
                self.clamp_warnings.set(self.clamp_warnings.get() + 1);
                acc += LOG_FLOOR;
            } else {
                acc += v;
            }
        }
        let value = Tensor::scalar(acc / rows as f64);
        self.push(Op::GatherMean { labels: labels.to_vec() }, vec![a], value)
    }

    /// Reverse sweep from a scalar root. Returns per-node adjoints; leaves
    /// the forward pass never touched come back as `None` (read as zeros).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Tensor>>> {
        let root_val = &self.nodes[root].value;
        if root_val.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root] = Some(Tensor {
            shape: root_val.shape.clone(),
            data: vec![1.0],
        });
        for k in (0..=root).rev() {
            let a = match adj[k].take() {
                Some(mut a) => {
                    self.precision.round_slice(&mut a.data);
                    a
                }
                None => continue,
            };
            let node = &self.nodes[k];
            match &node.op {
                Op::Leaf => {
                    adj[k] = Some(a);
                    continue;
                }
                Op::Add => {
                    self.accumulate(&mut adj, node.parents[0], a.clone());
                    self.accumulate_collapsed(&mut adj, node.parents[1], &a, 1.0);
                }
                Op::Sub => {
                    self.accumulate(&mut adj, node.parents[0], a.clone());
                    self.accumulate_collapsed(&mut adj, node.parents[1], &a, -1.0);
                }
                Op::Mul => {
                    let (pa, pb) = (node.parents[0], node.parents[1]);
                    let va = &self.nodes[pa].value;
                    let vb = &self.nodes[pb].value;
                    // d/da = adj * b (b broadcast if needed)
                    let w = vb.data.len();
                    let da = Tensor {
                        shape: va.shape.clone(),
                        data: a
                            .data
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * vb.data[i % w])
                            .collect(),
                    };
                    self.accumulate(&mut adj, pa, da);
                    // d/db = adj * a, collapsed over batch if broadcast
                    let prod = a.zip_map(va, |g, x| g * x);
                    self.accumulate_collapsed(&mut adj, pb, &prod, 1.0);
                }
                Op::MulConst(c) => {
                    let da = a.zip_map(c, |g, x| g * x);
                    self.accumulate(&mut adj, node.parents[0], da);
                }
                Op::Matmul => {
                    let (pa, pb) = (node.parents[0], node.parents[1]);
                    let va = &self.nodes[pa].value;
                    let vb = &self.nodes[pb].value;
                    let (m, kk) = (va.shape[0], va.shape[1]);
                    let n = vb.shape[1];
                    // da = adj . b^T
                    let mut da = Tensor::zeros(va.shape.clone());
                    for i in 0..m {
                        for j in 0..kk {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += a.data[i * n + l] * vb.data[j * n + l];
                            }
                            da.data[i * kk + j] = s;
                        }
                    }
                    // db = a^T . adj
                    let mut db = Tensor::zeros(vb.shape.clone());
                    for j in 0..kk {
                        for l in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va.data[i * kk + j] * a.data[i * n + l];
                            }
                            db.data[j * n + l] = s;
                        }
                    }
                    self.accumulate(&mut adj, pa, da);
                    self.accumulate(&mut adj, pb, db);
                }
                Op::Relu => {
                    let vx = &self.nodes[node.parents[0]].value;
                    let da = a.zip_map(vx, |g, x| if x > 0.0 { g } else { 0.0 });
                    self.accumulate(&mut adj, node.parents[0], da);
                }
                Op::Exp => {
                    let da = a.zip_map(&node.value, |g, e| g * e);
                    self.accumulate(&mut adj, node.parents[0], da);
                }
                Op::Affine { scale, .. } => {
                    let da = a.map(|g| g * scale);
                    self.accumulate(&mut adj, node.parents[0], da);
                }
                Op::Sum => {
                    let vx = &self.nodes[node.parents[0]].value;
                    let g = a.item();
                    let da = Tensor {
                        shape: vx.shape.clone(),
                        data: vec![g; vx.numel()],
                    };
                    self.accumulate(&mut adj, node.parents[0], da);
                }
                Op::LogSoftmaxRows => {
                    let p = node.parents[0];
                    let (rows, cols) = node.value.rows_cols();
                    let mut da = Tensor::zeros(self.nodes[p].value.shape.clone());
                    for i in 0..rows {
                        let ls = &node.value.data[i * cols..(i + 1) * cols];
                        let gr = &a.data[i * cols..(i + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            da.data[i * cols + j] = gr[j] - ls[j].exp() * gsum;
                        }
                    }
                    self.accumulate(&mut adj, p, da);
                }
                Op::GatherMean { labels } => {
                    let p = node.parents[0];
                    let vx = &self.nodes[p].value;
                    let (rows, cols) = vx.rows_cols();
                    let g = a.item() / rows as f64;
                    let mut da = Tensor::zeros(vx.shape.clone());
                    for (i, &y) in labels.iter().enumerate() {
                        if vx.data[i * cols + y] >= LOG_FLOOR {
                            da.data[i * cols + y] = g;
                        }
                    }
                    self.accumulate(&mut adj, p, da);
                }
            }
        }
        Ok(adj)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut adj[id] {
            Some(t) => {
                for (d, s) in t.data.iter_mut().zip(&delta.data) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulate `sign * delta` into `id`, summing over the leading batch
    /// dim when `id`'s shape is one rank smaller (broadcast adjoint).
    fn accumulate_collapsed(
        &self,
        adj: &mut [Option<Tensor>],
        id: NodeId,
        delta: &Tensor,
        sign: f64,
    ) {
        let target = &self.nodes[id].value;
        let collapsed = if target.shape == delta.shape {
            delta.map(|x| sign * x)
        } else {
            let w = target.numel();
            let mut out = Tensor::zeros(target.shape.clone());
            for (i, &d) in delta.data.iter().enumerate() {
                out.data[i % w] += sign * d;
            }
            out
        };
        self.accumulate(adj, id, collapsed);
    }

    /// Gradient of a leaf from a backward result; untouched leaves are zero.
    pub fn leaf_grad(&self, grads: &[Option<Tensor>], id: NodeId) -> Tensor {
        grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape.clone()))
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let br = &b.data[l * n..(l + 1) * n];
            let or = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// Plain (untracked) matmul for inference paths.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(matmul_raw(a, b, a.shape[0], a.shape[1], b.shape[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new(true);
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new(true);
        let eye = t.leaf(Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let a_data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let a = t.leaf(Tensor::new(vec![3, 4], a_data.clone()));
        let c = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(c).data, a_data);
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new(true);
        let a = t.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new(true);
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![4, 5]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut t = Tape::new(true);
        let a = t.leaf(Tensor::from_vec(vec![1e308]));
        let b = t.leaf(Tensor::from_vec(vec![1e308]));
        assert!(matches!(
            t.add(a, b),
            Err(Error::NumericOverflow { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new(true);
        let theta = t.leaf(Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.0, 5.0]));
        let s = t.sum(theta).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(t.leaf_grad(&grads, theta).data, vec![1.0; 5]);
    }

    #[test]
    fn backward_of_half_norm_sq() {
        let mut t = Tape::new(true);
        let theta = t.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let sq = t.mul(theta, theta).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.affine(s, 0.5, 0.0).unwrap();
        let grads = t.backward(half).unwrap();
        assert_eq!(t.leaf_grad(&grads, theta).data, vec![3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new(true);
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn untouched_leaf_gets_zero_grad() {
        let mut t = Tape::new(true);
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::from_vec(vec![5.0, 6.0]));
        let s = t.sum(a).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(t.leaf_grad(&grads, b).data, vec![0.0, 0.0]);
    }

    #[test]
    fn bias_broadcast_add_and_grad() {
        let mut t = Tape::new(true);
        let x = t.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]));
        let b = t.leaf(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).data[3..6], [1.1, 1.2, 1.3]);
        let s = t.sum(y).unwrap();
        let grads = t.backward(s).unwrap();
        // bias adjoint sums over the batch dim
        assert_eq!(t.leaf_grad(&grads, b).data, vec![2.0, 2.0, 2.0]);
    }

    /// Central finite differences of CE(softmax(W x), y) w.r.t. W, compared
    /// against the tape gradient.
    #[test]
    fn ce_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (rows, cols) = (4usize, 3usize);
        let w0: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = 1usize;

        let loss = |w: &[f64]| -> f64 {
            let mut t = Tape::new(true);
            let wl = t.leaf(Tensor::new(vec![rows, cols], w.to_vec()));
            let xl = t.leaf(Tensor::new(vec![1, rows], x.clone()));
            let z = t.matmul(xl, wl).unwrap();
            let ls = t.log_softmax(z).unwrap();
            let gm = t.gather_mean(ls, &[label]).unwrap();
            -t.value(gm).item()
        };

        // tape gradient
        let mut t = Tape::new(true);
        let wl = t.leaf(Tensor::new(vec![rows, cols], w0.clone()));
        let xl = t.leaf(Tensor::new(vec![1, rows], x.clone()));
        let z = t.matmul(xl, wl).unwrap();
        let ls = t.log_softmax(z).unwrap();
        let gm = t.gather_mean(ls, &[label]).unwrap();
        let neg = t.affine(gm, -1.0, 0.0).unwrap();
        let grads = t.backward(neg).unwrap();
        let g = t.leaf_grad(&grads, wl);

        let eps = f64::EPSILON.cbrt();
        for j in 0..w0.len() {
            let h = eps * (1.0 + w0[j].abs());
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                (fd - g.data[j]).abs() / denom < 1e-5,
                "coord {j}: fd {fd} vs ad {}",
                g.data[j]
            );
        }
    }

    #[test]
    fn backward_is_linear() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let theta = vec![0.5, -1.2, 2.0];
        let build = |t: &mut Tape| -> (NodeId, NodeId, NodeId) {
            let th = t.leaf(Tensor::from_vec(theta.clone()));
            let sq = t.mul(th, th).unwrap();
            let l1 = t.sum(sq).unwrap(); // ||theta||^2
            let l2 = t.sum(th).unwrap(); // sum(theta)
            (th, l1, l2)
        };
        let (a, b) = (1.7, -0.3);

        let mut t = Tape::new(true);
        let (th, l1, l2) = build(&mut t);
        let al1 = t.affine(l1, a, 0.0).unwrap();
        let bl2 = t.affine(l2, b, 0.0).unwrap();
        let combo = t.add(al1, bl2).unwrap();
        let g_combo = {
            let grads = t.backward(combo).unwrap();
            t.leaf_grad(&grads, th)
        };
        let g1 = {
            let grads = t.backward(l1).unwrap();
            t.leaf_grad(&grads, th)
        };
        let g2 = {
            let grads = t.backward(l2).unwrap();
            t.leaf_grad(&grads, th)
        };
        for i in 0..theta.len() {
            let expect = a * g1.data[i] + b * g2.data[i];
            assert!((g_combo.data[i] - expect).abs() < 1e-12);
        }
    }
}
