//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records operations define-by-run; [`Tape::backward`] replays
//! them in reverse from a scalar root and accumulates adjoints. The
//! [`Tape::stop_gradient`] primitive passes values through unchanged while
//! blocking all backward flow, which is how the trainer routes gradients
//! into selected parameter groups.
//!
//! Arrays are row-major, two-dimensional, `f64` throughout. Vectors are
//! column vectors (`n x 1`) and scalars are `1 x 1`. Tapes are rebuilt every
//! training step and are single-threaded; independent tapes may live on
//! independent threads.

use thiserror::Error;

/// Errors raised while recording or differentiating a tape.
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("backward root must be a scalar, got {0}")]
    NonScalarRoot(String),
    #[error("gather: index {index} out of bounds for vector of length {len}")]
    GatherOutOfBounds { index: usize, len: usize },
    #[error("clip_global_norm: max clip norm must be positive, got {0}")]
    NonPositiveClipNorm(f64),
    #[error("non-finite gradient component in parameter `{0}`")]
    NonFiniteGradient(String),
}

/// Dense row-major matrix of `f64`. Column vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Array {
    pub fn from_vec(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "array data does not match shape");
        Array { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Array {
            data,
            rows,
            cols: 1,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Array {
            data: vec![x],
            rows: 1,
            cols: 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    fn same_shape(&self, other: &Array) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle into the tape that issued it. Inputs of a node always have a
/// smaller index than the node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Gather(NodeId, usize),
    StopGradient(NodeId),
}

struct Node {
    op: Op,
    value: Array,
}

/// Define-by-run recording of a computation; replayed backward for adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record an input node. Leaves are where adjoints are read back.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf holding a single scalar.
    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Array::scalar(x))
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: va.shape_str(),
                rhs: vb.shape_str(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_shapes("add", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| x + y)
            .collect();
        let value = Array::from_vec(data, va.rows, va.cols);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_shapes("sub", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| x - y)
            .collect();
        let value = Array::from_vec(data, va.rows, va.cols);
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_shapes("mul", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| x * y)
            .collect();
        let value = Array::from_vec(data, va.rows, va.cols);
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Matrix product `a (r x k) * b (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.cols != vb.rows {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape_str(),
                rhs: vb.shape_str(),
            });
        }
        let (r, k, n) = (va.rows, va.cols, vb.cols);
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            for l in 0..k {
                let ail = va.data[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += ail * vb.data[l * n + j];
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), Array::from_vec(out, r, n)))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| f(x)).collect();
        let value = Array::from_vec(data, va.rows, va.cols);
        self.push(op, value)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Multiply every component by a fixed scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Sum of all components; yields a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::Sum(a), Array::scalar(s))
    }

    /// Mean of all components; yields a scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data.iter().sum();
        let m = s / v.data.len() as f64;
        self.push(Op::Mean(a), Array::scalar(m))
    }

    fn require_vector(
        &self,
        op: &'static str,
        a: NodeId,
    ) -> Result<&Array, TapeError> {
        let va = &self.nodes[a.0].value;
        if va.cols != 1 {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: va.shape_str(),
                rhs: "nx1".to_string(),
            });
        }
        Ok(va)
    }

    /// Softmax of a column vector, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.require_vector("softmax", a)?;
        let max = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = va.data.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data = exps.iter().map(|e| e / z).collect();
        let value = Array::from_vec(data, va.rows, 1);
        Ok(self.push(Op::Softmax(a), value))
    }

    /// Fused log-softmax of a column vector; avoids `ln(0)` for extreme logits.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.require_vector("log_softmax", a)?;
        let max = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = va
            .data
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<f64>()
            .ln();
        let data = va.data.iter().map(|&x| x - max - log_z).collect();
        let value = Array::from_vec(data, va.rows, 1);
        Ok(self.push(Op::LogSoftmax(a), value))
    }

    /// Select component `index` of a column vector; yields a scalar node.
    pub fn gather(&mut self, a: NodeId, index: usize) -> Result<NodeId, TapeError> {
        let va = self.require_vector("gather", a)?;
        if index >= va.rows {
            return Err(TapeError::GatherOutOfBounds {
                index,
                len: va.rows,
            });
        }
        let value = Array::scalar(va.data[index]);
        Ok(self.push(Op::Gather(a, index), value))
    }

    /// Identity forward, zero backward: no adjoint propagates to `a` or its
    /// ancestors through this node.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(Op::StopGradient(a), value)
    }

    /// Reverse sweep from a scalar root. Every recorded node is visited at
    /// most once; leaves not on a live path to the root keep an exactly-zero
    /// adjoint.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TapeError::NonScalarRoot(rv.shape_str()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(dout) = adj[i].take() else { continue };
            self.propagate(i, &dout, &mut adj);
            adj[i] = Some(dout);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, i: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        fn accum(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            adj[id.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                for (d, g) in da.iter_mut().zip(dout) {
                    *d += g;
                }
                let lb = self.nodes[b.0].value.len();
                let db = accum(adj, *b, lb);
                for (d, g) in db.iter_mut().zip(dout) {
                    *d += g;
                }
            }
            Op::Sub(a, b) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                for (d, g) in da.iter_mut().zip(dout) {
                    *d += g;
                }
                let lb = self.nodes[b.0].value.len();
                let db = accum(adj, *b, lb);
                for (d, g) in db.iter_mut().zip(dout) {
                    *d -= g;
                }
            }
            Op::Mul(a, b) => {
                let vb = self.nodes[b.0].value.data.clone();
                let va = self.nodes[a.0].value.data.clone();
                let da = accum(adj, *a, va.len());
                for ((d, g), y) in da.iter_mut().zip(dout).zip(&vb) {
                    *d += g * y;
                }
                let db = accum(adj, *b, vb.len());
                for ((d, g), x) in db.iter_mut().zip(dout).zip(&va) {
                    *d += g * x;
                }
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (r, k, n) = (va.rows, va.cols, vb.cols);
                {
                    let da = accum(adj, *a, r * k);
                    for i in 0..r {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dout[i * n + j] * vb.data[l * n + j];
                            }
                            da[i * k + l] += s;
                        }
                    }
                }
                {
                    let db = accum(adj, *b, k * n);
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..r {
                                s += va.data[i * k + l] * dout[i * n + j];
                            }
                            db[l * n + j] += s;
                        }
                    }
                }
            }
            Op::Neg(a) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                for (d, g) in da.iter_mut().zip(dout) {
                    *d -= g;
                }
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data.clone();
                let da = accum(adj, *a, y.len());
                for ((d, g), yi) in da.iter_mut().zip(dout).zip(&y) {
                    *d += g * (1.0 - yi * yi);
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data.clone();
                let da = accum(adj, *a, x.len());
                for ((d, g), xi) in da.iter_mut().zip(dout).zip(&x) {
                    if *xi > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data.clone();
                let da = accum(adj, *a, y.len());
                for ((d, g), yi) in da.iter_mut().zip(dout).zip(&y) {
                    *d += g * yi;
                }
            }
            Op::Ln(a) => {
                let x = self.nodes[a.0].value.data.clone();
                let da = accum(adj, *a, x.len());
                for ((d, g), xi) in da.iter_mut().zip(dout).zip(&x) {
                    *d += g / xi;
                }
            }
            Op::Sum(a) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                for d in da.iter_mut() {
                    *d += dout[0];
                }
            }
            Op::Mean(a) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                let g = dout[0] / la as f64;
                for d in da.iter_mut() {
                    *d += g;
                }
            }
            Op::Square(a) => {
                let x = self.nodes[a.0].value.data.clone();
                let da = accum(adj, *a, x.len());
                for ((d, g), xi) in da.iter_mut().zip(dout).zip(&x) {
                    *d += 2.0 * xi * g;
                }
            }
            Op::Scale(a, c) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                for (d, g) in da.iter_mut().zip(dout) {
                    *d += c * g;
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data.clone();
                let dot: f64 = dout.iter().zip(&y).map(|(g, yi)| g * yi).sum();
                let da = accum(adj, *a, y.len());
                for ((d, g), yi) in da.iter_mut().zip(dout).zip(&y) {
                    *d += yi * (g - dot);
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.data.clone();
                let gsum: f64 = dout.iter().sum();
                let da = accum(adj, *a, y.len());
                for ((d, g), yi) in da.iter_mut().zip(dout).zip(&y) {
                    *d += g - yi.exp() * gsum;
                }
            }
            Op::Gather(a, index) => {
                let la = self.nodes[a.0].value.len();
                let da = accum(adj, *a, la);
                da[*index] += dout[0];
            }
            // The barrier: the child gets no adjoint contribution.
            Op::StopGradient(a) => {
                debug_assert_eq!(self.nodes[a.0].value.len(), dout.len());
            }
        }
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`; exactly zero for nodes the root does not reach.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Vec<f64> {
        match &self.adj[id.index()] {
            Some(v) => v.clone(),
            None => vec![0.0; tape.value(id).len()],
        }
    }

    /// Whether any adjoint reached `id` during the sweep.
    pub fn reached(&self, id: NodeId) -> bool {
        self.adj[id.index()].is_some()
    }
}

/// Named gradient buffers for a set of parameters, in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct AdjointMap {
    entries: Vec<(String, Vec<f64>)>,
}

impl AdjointMap {
    pub fn new() -> Self {
        AdjointMap::default()
    }

    pub fn push(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.entries.push((name.into(), grad));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm of all buffers concatenated.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Scale the whole gradient so its global L2 norm does not exceed `mcn`.
/// Gradients already within the bound pass through unchanged.
pub fn clip_global_norm(mut grads: AdjointMap, mcn: f64) -> Result<AdjointMap, TapeError> {
    if mcn <= 0.0 {
        return Err(TapeError::NonPositiveClipNorm(mcn));
    }
    for (name, g) in &grads.entries {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TapeError::NonFiniteGradient(name.clone()));
        }
    }
    let norm = grads.global_norm();
    if norm > mcn {
        let s = mcn / norm;
        for (_, g) in &mut grads.entries {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Central finite differences of `f` at `x`.
    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            grad[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    fn assert_close_rel(actual: &[f64], expected: &[f64], rel: f64, abs: f64) {
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            let tol = abs + rel * e.abs().max(a.abs());
            assert!(
                (a - e).abs() <= tol,
                "component {i}: got {a}, expected {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn add_records_forward_value() {
        let mut t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.scalar(3.0);
        let z = t.add(x, y).unwrap();
        assert_eq!(t.value(z).data(), &[5.0]);
    }

    #[test]
    fn ln_of_one_is_zero() {
        let mut t = Tape::new();
        let x = t.scalar(1.0);
        let y = t.ln(x);
        assert_eq!(t.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![0.0, 0.0]));
        let p = t.softmax(x).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(vec![1.0, 2.0]));
        let b = t.leaf(Array::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("2x1") && msg.contains("3x1"), "{msg}");
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x), vec![6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(TapeError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let q = t.leaf(Array::vector(vec![1.0, 2.0, 3.0]));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, q), vec![0.0, 0.0, 0.0]);
        assert!(!g.reached(q));
    }

    #[test]
    fn log_softmax_gather_matches_finite_differences() {
        // 100 random logit vectors; adjoints within relative 1e-4 of central
        // differences with step 1e-5.
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let idx = rng.gen_range(0..n);

            let eval = |w: &[f64]| {
                let mut t = Tape::new();
                let l = t.leaf(Array::vector(w.to_vec()));
                let ls = t.log_softmax(l).unwrap();
                let y = t.gather(ls, idx).unwrap();
                t.value(y).data()[0]
            };

            let mut t = Tape::new();
            let l = t.leaf(Array::vector(w.clone()));
            let ls = t.log_softmax(l).unwrap();
            let y = t.gather(ls, idx).unwrap();
            let g = t.backward(y).unwrap();

            let fd = finite_diff(eval, &w, 1e-5);
            assert_close_rel(&g.wrt(&t, l), &fd, 1e-4, 1e-7);
        }
    }

    #[test]
    fn random_compositions_match_finite_differences() {
        // Chains mixing every differentiable op, checked against central
        // differences. Inputs kept in ranges where ln/exp stay tame.
        let mut rng = StdRng::seed_from_u64(21);
        for case in 0..60 {
            let n = rng.gen_range(2..5);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..1.7)).collect();
            let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let ops: Vec<u8> = (0..4).map(|_| rng.gen_range(0..7)).collect();

            let build = |x: &[f64], m: &[f64]| -> (Tape, NodeId, NodeId, NodeId) {
                let mut t = Tape::new();
                let xv = t.leaf(Array::vector(x.to_vec()));
                let mv = t.leaf(Array::from_vec(m.to_vec(), n, n));
                let mut cur = t.matmul(mv, xv).unwrap();
                for op in &ops {
                    cur = match op {
                        0 => t.tanh(cur),
                        1 => {
                            let e = t.exp(cur);
                            t.scale(e, 0.5)
                        }
                        2 => t.softmax(cur).unwrap(),
                        3 => {
                            let s = t.square(cur);
                            t.add(s, xv).unwrap()
                        }
                        4 => t.neg(cur),
                        5 => t.relu(cur),
                        _ => {
                            let p = t.mul(cur, xv).unwrap();
                            t.sub(p, cur).unwrap()
                        }
                    };
                }
                let sq = t.square(cur);
                let root = t.mean(sq);
                (t, root, xv, mv)
            };

            let (t, root, xv, mv) = build(&x, &m);
            let g = t.backward(root).unwrap();

            let fd_x = finite_diff(
                |xs| {
                    let (t, root, _, _) = build(xs, &m);
                    t.value(root).data()[0]
                },
                &x,
                1e-5,
            );
            let fd_m = finite_diff(
                |ms| {
                    let (t, root, _, _) = build(&x, ms);
                    t.value(root).data()[0]
                },
                &m,
                1e-5,
            );
            assert_close_rel(&g.wrt(&t, xv), &fd_x, 1e-4, 1e-7);
            assert_close_rel(&g.wrt(&t, mv), &fd_m, 1e-4, 1e-7);
            let _ = case;
        }
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        // y = stop_gradient(x) * x at x = 3: value 9, d/dx = 3.
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let frozen = t.stop_gradient(x);
        let y = t.mul(frozen, x).unwrap();
        assert_eq!(t.value(y).data(), &[9.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x), vec![3.0]);
    }

    #[test]
    fn stop_gradient_blocks_all_ancestors() {
        // loss = (stop_gradient(f) - r)^2 where f = tanh(w): w gets exactly 0.
        let mut t = Tape::new();
        let w = t.leaf(Array::vector(vec![0.3, -0.7]));
        let f = t.tanh(w);
        let fz = t.stop_gradient(f);
        let r = t.leaf(Array::vector(vec![1.0, -1.0]));
        let d = t.sub(fz, r).unwrap();
        let sq = t.square(d);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, w), vec![0.0, 0.0]);
        assert!(!g.reached(w));
    }

    #[test]
    fn stop_gradient_is_transparent_forward() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let run = |detach: bool| {
                let mut t = Tape::new();
                let l = t.leaf(Array::vector(x.clone()));
                let h = t.tanh(l);
                let h = if detach { t.stop_gradient(h) } else { h };
                let p = t.softmax(h).unwrap();
                let s = t.sum(p);
                t.value(s).data()[0].to_bits()
            };
            assert_eq!(run(true), run(false), "forward value changed by stop_gradient");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut t = Tape::new();
            let l = t.leaf(Array::vector(x.clone()));
            let h = t.tanh(l);
            let p = t.softmax(h).unwrap();
            let lp = t.log_softmax(h).unwrap();
            let e = t.mul(p, lp).unwrap();
            let s = t.sum(e);
            let g = t.backward(s).unwrap();
            g.wrt(&t, l).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_norm_leaves_small_gradients_alone() {
        let mut m = AdjointMap::new();
        m.push("w", vec![0.3, 0.4]);
        let out = clip_global_norm(m, 2.0).unwrap();
        assert_eq!(out.get("w").unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_norm_scales_three_four_five() {
        let mut m = AdjointMap::new();
        m.push("w", vec![3.0, 4.0]);
        let out = clip_global_norm(m, 1.0).unwrap();
        let g = out.get("w").unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_norm_hits_target_on_large_random_vector() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut m = AdjointMap::new();
        m.push("w", (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = clip_global_norm(m, 0.37).unwrap();
        assert!((out.global_norm() - 0.37).abs() < 1e-9);
        assert!(out.global_norm() <= 0.37 + 1e-12);
    }

    #[test]
    fn clip_norm_rejects_non_finite_components() {
        let mut m = AdjointMap::new();
        m.push("policy.w", vec![1.0, f64::NAN]);
        let err = clip_global_norm(m, 1.0).unwrap_err();
        assert!(err.to_string().contains("policy.w"));
    }
}
