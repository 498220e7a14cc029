//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A `Tape` records forward operations in topological order; one backward
//! pass visits each node exactly once in reverse, accumulating gradients
//! into every trainable leaf. The op set is exactly what the unrolled
//! forward pass and classifier head need. Scalars live on the tape as 1x1
//! matrices. Gradient accumulation follows tape order, so replaying the
//! same tape is bitwise deterministic.

use std::sync::Arc;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;
use crate::prox;

pub type NodeId = usize;
pub type ParamId = usize;

/// A sparse operator used in tape products, paired with its transpose for
/// the backward pass. For symmetric operators the two sides share storage.
#[derive(Debug, Clone)]
pub struct SparseOperand {
    fwd: Arc<CsrMatrix>,
    bwd: Arc<CsrMatrix>,
}

impl SparseOperand {
    pub fn symmetric(m: Arc<CsrMatrix>) -> Self {
        debug_assert!(m.is_symmetric(1e-12));
        Self { fwd: m.clone(), bwd: m }
    }

    pub fn general(m: CsrMatrix) -> Self {
        let t = m.transpose();
        Self { fwd: Arc::new(m), bwd: Arc::new(t) }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.fwd
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(NodeId, NodeId),
    Spmm { s: SparseOperand, a: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Broadcast-add of a 1 x c row vector to every row of an n x c matrix.
    AddRow { a: NodeId, row: NodeId },
    ScaleConst(f64, NodeId),
    /// Scalar-parameter times matrix; the scalar is a 1x1 node.
    Scale { scalar: NodeId, a: NodeId },
    Relu(NodeId),
    Softplus(NodeId),
    ConcatCols(NodeId, NodeId),
    /// Elementwise shrinkage; gradient flows to the matrix input only,
    /// masked by |input| > lambda. No gradient reaches lambda.
    SoftThreshold { a: NodeId, lambda: NodeId },
    /// Straight-through: arbitrary forward value, identity backward.
    Passthrough(NodeId),
    Sum(NodeId),
    SoftmaxXent { logits: NodeId, labels: Arc<Vec<i64>>, mask: Arc<Vec<usize>> },
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Gradients for every trainable leaf, indexed by registration order.
/// Parameters that never reach the loss get explicit zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<DenseMatrix>,
}

impl Gradients {
    pub fn by_param(&self, p: ParamId) -> &DenseMatrix {
        &self.grads[p]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(DenseMatrix::is_finite)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op, what: &str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {what}")));
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Param ids follow registration order.
    pub fn param(&mut self, value: DenseMatrix) -> Result<NodeId> {
        let p = self.n_params;
        self.n_params += 1;
        self.push(value, Op::Leaf { param: Some(p) }, "param")
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Result<NodeId> {
        self.push(value, Op::Leaf { param: None }, "constant")
    }

    pub fn scalar_constant(&mut self, v: f64) -> Result<NodeId> {
        self.constant(DenseMatrix::new(1, 1, vec![v])?)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn spmm(&mut self, s: &SparseOperand, a: NodeId) -> Result<NodeId> {
        let v = s.matrix().spmm(self.value(a))?;
        self.push(v, Op::Spmm { s: s.clone(), a }, "spmm")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// `a + row` broadcast over rows; `row` must be 1 x a.n_cols.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.n_rows() != 1 || rv.n_cols() != av.n_cols() {
            return Err(Error::DimensionMismatch("add_row expects a matching row vector".into()));
        }
        let mut out = av.clone();
        let cols = out.n_cols();
        let rowdata: Vec<f64> = rv.data().to_vec();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += rowdata[k % cols];
        }
        self.push(out, Op::AddRow { a, row }, "add_row")
    }

    pub fn scale_const(&mut self, c: f64, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(v, Op::ScaleConst(c, a), "scale_const")
    }

    pub fn scale(&mut self, scalar: NodeId, a: NodeId) -> Result<NodeId> {
        let sv = self.value(scalar);
        if sv.shape() != (1, 1) {
            return Err(Error::DimensionMismatch("scale expects a 1x1 scalar node".into()));
        }
        let c = sv.get(0, 0);
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale { scalar, a }, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        // Stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
        let v = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(a), "softplus")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        self.push(v, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Soft-threshold with the shrinkage amount read from a 1x1 node.
    pub fn soft_threshold(&mut self, a: NodeId, lambda: NodeId) -> Result<NodeId> {
        let lv = self.value(lambda);
        if lv.shape() != (1, 1) {
            return Err(Error::DimensionMismatch("soft_threshold expects a 1x1 lambda node".into()));
        }
        let v = prox::soft_threshold(self.value(a), lv.get(0, 0))?;
        self.push(v, Op::SoftThreshold { a, lambda }, "soft_threshold")
    }

    /// Records `value` as a straight-through transformation of `a`:
    /// the forward output is `value`, the backward rule is the identity.
    pub fn passthrough(&mut self, a: NodeId, value: DenseMatrix) -> Result<NodeId> {
        if value.shape() != self.value(a).shape() {
            return Err(Error::DimensionMismatch("passthrough must preserve shape".into()));
        }
        self.push(value, Op::Passthrough(a), "passthrough")
    }

    /// Singular-value shrinkage with straight-through backward.
    pub fn nuclear_prox(&mut self, a: NodeId, lambda: NodeId) -> Result<NodeId> {
        let lv = self.value(lambda);
        if lv.shape() != (1, 1) {
            return Err(Error::DimensionMismatch("nuclear_prox expects a 1x1 lambda node".into()));
        }
        let v = prox::prox_nuclear(self.value(a), lv.get(0, 0))?;
        self.passthrough(a, v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = DenseMatrix::new(1, 1, vec![self.value(a).sum()])?;
        self.push(v, Op::Sum(a), "sum")
    }

    /// Mean over masked rows of the cross-entropy between row-softmax of
    /// `logits` and the integer labels. Numerically stabilized by row-max
    /// subtraction.
    pub fn softmax_cross_entropy_masked(
        &mut self,
        logits: NodeId,
        labels: Arc<Vec<i64>>,
        mask: Arc<Vec<usize>>,
    ) -> Result<NodeId> {
        if mask.is_empty() {
            return Err(Error::InvalidArgument("empty mask in cross-entropy".into()));
        }
        let lv = self.value(logits);
        let c = lv.n_cols();
        if labels.len() != lv.n_rows() {
            return Err(Error::DimensionMismatch("label count != logit rows".into()));
        }
        let mut total = 0.0;
        for &i in mask.iter() {
            let label = labels[i];
            if label < 0 || label as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range on masked row {i}"
                )));
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label as usize];
        }
        let v = DenseMatrix::new(1, 1, vec![total / mask.len() as f64])?;
        self.push(v, Op::SoftmaxXent { logits, labels, mask }, "softmax_cross_entropy")
    }

    /// Reverse pass from a scalar loss node. Clears the tape for reuse.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument("backward expects a scalar loss node".into()));
        }
        self.backward_from(loss, DenseMatrix::new(1, 1, vec![1.0])?)
    }

    /// Reverse pass seeded with an arbitrary cotangent at `node`.
    pub fn backward_from(&mut self, node: NodeId, seed: DenseMatrix) -> Result<Gradients> {
        if node >= self.nodes.len() {
            return Err(Error::InvalidArgument("node is not on the tape".into()));
        }
        if seed.shape() != self.value(node).shape() {
            return Err(Error::DimensionMismatch("seed shape != node shape".into()));
        }
        let mut adjoint: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[node] = Some(seed);

        for id in (0..=node).rev() {
            let g = match adjoint[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    adjoint[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.matmul(&self.value(b).transpose())?;
                    let db = self.value(a).transpose().matmul(&g)?;
                    accumulate(&mut adjoint[a], da)?;
                    accumulate(&mut adjoint[b], db)?;
                }
                Op::Spmm { s, a } => {
                    let a = *a;
                    let da = s.bwd.spmm(&g)?;
                    accumulate(&mut adjoint[a], da)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adjoint[a], g.clone())?;
                    accumulate(&mut adjoint[b], g)?;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adjoint[a], g.clone())?;
                    accumulate(&mut adjoint[b], g.scale(-1.0))?;
                }
                Op::AddRow { a, row } => {
                    let (a, row) = (*a, *row);
                    let cols = g.n_cols();
                    let mut rg = DenseMatrix::zeros(1, cols);
                    for i in 0..g.n_rows() {
                        for j in 0..cols {
                            rg.set(0, j, rg.get(0, j) + g.get(i, j));
                        }
                    }
                    accumulate(&mut adjoint[a], g)?;
                    accumulate(&mut adjoint[row], rg)?;
                }
                Op::ScaleConst(c, a) => {
                    let (c, a) = (*c, *a);
                    accumulate(&mut adjoint[a], g.scale(c))?;
                }
                Op::Scale { scalar, a } => {
                    let (scalar, a) = (*scalar, *a);
                    let c = self.value(scalar).get(0, 0);
                    let ds = DenseMatrix::new(1, 1, vec![g.dot(self.value(a))?])?;
                    accumulate(&mut adjoint[scalar], ds)?;
                    accumulate(&mut adjoint[a], g.scale(c))?;
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adjoint[a], g.hadamard(&mask)?)?;
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let sig = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
                    accumulate(&mut adjoint[a], g.hadamard(&sig)?)?;
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.value(a).n_cols();
                    let cb = self.value(b).n_cols();
                    let n = g.n_rows();
                    let mut da = DenseMatrix::zeros(n, ca);
                    let mut db = DenseMatrix::zeros(n, cb);
                    for i in 0..n {
                        for j in 0..ca {
                            da.set(i, j, g.get(i, j));
                        }
                        for j in 0..cb {
                            db.set(i, j, g.get(i, ca + j));
                        }
                    }
                    accumulate(&mut adjoint[a], da)?;
                    accumulate(&mut adjoint[b], db)?;
                }
                Op::SoftThreshold { a, lambda } => {
                    let (a, lambda) = (*a, *lambda);
                    let lam = self.value(lambda).get(0, 0);
                    let mask = self.value(a).map(|x| if x.abs() > lam { 1.0 } else { 0.0 });
                    accumulate(&mut adjoint[a], g.hadamard(&mask)?)?;
                }
                Op::Passthrough(a) => {
                    let a = *a;
                    accumulate(&mut adjoint[a], g)?;
                }
                Op::Sum(a) => {
                    let a = *a;
                    let c = g.get(0, 0);
                    let (r, k) = self.value(a).shape();
                    accumulate(&mut adjoint[a], DenseMatrix::new(r, k, vec![c; r * k])?)?;
                }
                Op::SoftmaxXent { logits, labels, mask } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let mask = mask.clone();
                    let scale = g.get(0, 0) / mask.len() as f64;
                    let lv = self.value(logits);
                    let c = lv.n_cols();
                    let mut dl = DenseMatrix::zeros(lv.n_rows(), c);
                    for &i in mask.iter() {
                        let row = lv.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        for j in 0..c {
                            let p = exps[j] / denom;
                            let onehot = if labels[i] as usize == j { 1.0 } else { 0.0 };
                            dl.set(i, j, scale * (p - onehot));
                        }
                    }
                    accumulate(&mut adjoint[logits], dl)?;
                }
            }
        }

        let mut grads: Vec<Option<DenseMatrix>> = (0..self.n_params).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                let g = adjoint[id]
                    .take()
                    .unwrap_or_else(|| DenseMatrix::zeros(node.value.n_rows(), node.value.n_cols()));
                grads[p] = Some(match grads[p].take() {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                });
            }
        }
        let grads = grads
            .into_iter()
            .map(|g| g.ok_or_else(|| Error::InvalidArgument("unregistered parameter".into())))
            .collect::<Result<Vec<_>>>()?;

        self.nodes.clear();
        self.n_params = 0;
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, delta: DenseMatrix) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&delta)?,
        None => delta,
    });
    Ok(())
}

/// Central-finite-difference validation of the analytic gradients produced
/// by `build`: returns the max over parameter entries of
/// `|analytic - fd| / max(1, |analytic|, |fd|)`.
///
/// `build` must construct a deterministic scalar loss from the given
/// parameter leaves (registered in slice order).
pub fn grad_check<F>(build: &F, params: &[DenseMatrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[DenseMatrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = ps
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss);
        if v.shape() != (1, 1) || !v.is_finite() {
            return Err(Error::NonFinite("loss in grad_check".into()));
        }
        Ok(v.get(0, 0))
    };

    let mut tape = Tape::new();
    let ids = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<DenseMatrix> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.data().len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = grads.by_param(pi).data()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            if !rel.is_finite() {
                return Err(Error::NonFinite("relative error in grad_check".into()));
            }
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
