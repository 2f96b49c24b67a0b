//! Tape-based reverse-mode differentiation over [`Array2`] values.
//!
//! Every primitive appends one node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse recording order, summing gradient contributions from all
//! paths. Nodes that do not depend on any leaf created with [`Tape::leaf`]
//! are skipped.

use crate::engine::array::Array2;
use crate::engine::hyper::{self, HyperedgeIndex, SenderWeighting};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalisation uses the batch's own statistics or fixed ones.
#[derive(Debug, Clone)]
pub enum NormStats<T> {
    Batch,
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSum(Var),
    RowMean(Var),
    RowVar(Var),
    Sum(Var),
    Mean(Var),
    SegmentSum(Var, Arc<Vec<usize>>),
    SegmentMean(Var, Arc<Vec<usize>>, Vec<usize>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    CrossEntropy(Var, Arc<Vec<usize>>),
    RowL2Normalize(Var, Vec<T>),
    RowNormalize(Var, Vec<T>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        batch: bool,
    },
    HyperAggregate {
        h: Var,
        v: Var,
        index: Arc<HyperedgeIndex>,
        beta: T,
        weighting: SenderWeighting,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], one slot per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; all zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Array2<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Array2::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_segments(op: &'static str, rows: usize, seg: &[usize], n_seg: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::dim(op, format!("{} segment ids for {rows} rows", seg.len())));
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
        return Err(Error::dim(op, format!("segment id {bad} >= {n_seg}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter or anything we want a gradient for).
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &str, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: name.to_string(),
                detail: format!("non-finite output of shape {:?}", value.shape()),
            });
        }
        let rg = self.needs(inputs);
        Ok(self.push_raw(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scalar_mul", out, Op::ScalarMul(a, c), &[a])
    }

    /// Adds a `1 x d` row to every row of an `n x d` array.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", xv.shape(), rv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.row(0)) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    /// Scales each row of an `n x d` array by the matching entry of an `n x 1` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(Error::dim("mul_col", format!("{:?} * {:?}", xv.shape(), cv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let c = cv[(i, 0)];
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        self.push("mul_col", out, Op::MulCol(x, col), &[x, col])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Array2::from_vec(rows, cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {}", xv.cols())));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Array2::from_vec(xv.rows(), len, data)?;
        self.push("slice_cols", out, Op::SliceCols(x, start), &[x])
    }

    /// `n x d -> n x 1` sums across columns.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|i| xv.row(i).iter().copied().sum()).collect();
        let out = Array2::from_vec(xv.rows(), 1, data)?;
        self.push("row_sum", out, Op::RowSum(x), &[x])
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::dim("row_mean", "zero columns"));
        }
        let d = T::of_usize(xv.cols());
        let data = (0..xv.rows())
            .map(|i| xv.row(i).iter().copied().sum::<T>() / d)
            .collect();
        let out = Array2::from_vec(xv.rows(), 1, data)?;
        self.push("row_mean", out, Op::RowMean(x), &[x])
    }

    /// Population variance of each row.
    pub fn row_var(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::dim("row_var", "zero columns"));
        }
        let d = T::of_usize(xv.cols());
        let data = (0..xv.rows())
            .map(|i| {
                let r = xv.row(i);
                let m = r.iter().copied().sum::<T>() / d;
                r.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / d
            })
            .collect();
        let out = Array2::from_vec(xv.rows(), 1, data)?;
        self.push("row_var", out, Op::RowVar(x), &[x])
    }

    /// Sum of all entries as a `1 x 1` array.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Array2::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::dim("mean", "empty input"));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::of_usize(xv.len());
        self.push("mean", Array2::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums rows sharing a segment id into `n_segments` output rows.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_sum", xv.rows(), &seg, n_segments)?;
        let mut out = Array2::zeros(n_segments, xv.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (o, &v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.push("segment_sum", out, Op::SegmentSum(x, seg), &[x])
    }

    /// Mean of rows per segment; empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_mean", xv.rows(), &seg, n_segments)?;
        let mut counts = vec![0usize; n_segments];
        let mut out = Array2::zeros(n_segments, xv.cols());
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for (o, &v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::of_usize(c);
                for o in out.row_mut(s) {
                    *o *= inv;
                }
            }
        }
        self.push("segment_mean", out, Op::SegmentMean(x, seg, counts), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&hyper::softmax(xv.row(i)));
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Softmax of an `n x 1` column within each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::dim("segment_softmax", "expects a single column"));
        }
        check_segments("segment_softmax", xv.rows(), &seg, n_segments)?;
        let mut max = vec![T::neg_infinity(); n_segments];
        for (r, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(xv[(r, 0)]);
        }
        let mut z = vec![T::zero(); n_segments];
        let mut e = vec![T::zero(); xv.rows()];
        for (r, &s) in seg.iter().enumerate() {
            e[r] = (xv[(r, 0)] - max[s]).exp();
            z[s] += e[r];
        }
        for (r, &s) in seg.iter().enumerate() {
            e[r] /= z[s];
        }
        let out = Array2::from_vec(xv.rows(), 1, e)?;
        self.push("segment_softmax", out, Op::SegmentSoftmax(x, seg), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        self.push("log", out, Op::Log(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::dim("gather_rows", format!("row {bad} >= {}", xv.rows())));
        }
        let out = xv.select_rows(&idx);
        self.push("gather_rows", out, Op::GatherRows(x, idx), &[x])
    }

    /// Mean softmax cross-entropy of `n x C` logits against class indices.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        if labels.len() != lv.rows() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        if labels.iter().any(|&y| y >= lv.cols()) {
            return Err(Error::dim("cross_entropy", "label index out of range"));
        }
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let r = lv.row(i);
            let max = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - r[y];
        }
        let loss = total / T::of_usize(lv.rows());
        self.push(
            "cross_entropy",
            Array2::scalar(loss),
            Op::CrossEntropy(logits, labels),
            &[logits],
        )
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let floor = T::of(1e-12);
        let norms: Vec<T> = (0..xv.rows())
            .map(|i| xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(floor))
            .collect();
        let mut out = xv.clone();
        for (i, &nrm) in norms.iter().enumerate() {
            for o in out.row_mut(i) {
                *o /= nrm;
            }
        }
        self.push("row_l2_normalize", out, Op::RowL2Normalize(x, norms), &[x])
    }

    /// Divides each row of a nonnegative array by its sum. Rows summing to
    /// zero become uniform and pass no gradient.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.cols();
        let sums: Vec<T> = (0..xv.rows()).map(|i| xv.row(i).iter().copied().sum()).collect();
        let mut out = xv.clone();
        for (i, &s) in sums.iter().enumerate() {
            for o in out.row_mut(i) {
                *o = if s > T::zero() {
                    *o / s
                } else {
                    T::one() / T::of_usize(k)
                };
            }
        }
        self.push("row_normalize", out, Op::RowNormalize(x, sums), &[x])
    }

    /// Column-wise normalisation followed by a learned affine map. Returns the
    /// output together with the statistics used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &NormStats<T>, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        for p in [gamma, beta] {
            if self.value(p).shape() != (1, d) {
                return Err(Error::dim("batch_norm", "affine parameters must be 1 x d"));
            }
        }
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if n == 0 {
                    return Err(Error::dim("batch_norm", "empty batch"));
                }
                let nt = T::of_usize(n);
                let mut mean = vec![T::zero(); d];
                for i in 0..n {
                    for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nt);
                let mut var = vec![T::zero(); d];
                for i in 0..n {
                    for l in 0..d {
                        let dv = xv[(i, l)] - mean[l];
                        var[l] += dv * dv;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nt);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::dim("batch_norm", "fixed statistics length mismatch"));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Array2::zeros(n, d);
        let mut out = Array2::zeros(n, d);
        let (g, b) = (self.value(gamma).row(0), self.value(beta).row(0));
        for i in 0..n {
            for l in 0..d {
                let xh = (xv[(i, l)] - mean[l]) * inv_std[l];
                xhat[(i, l)] = xh;
                out[(i, l)] = g[l] * xh + b[l];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mean,
            var,
            batch,
        };
        self.push("batch_norm", out, op, &[x, gamma, beta])
    }

    /// Mean and variance a batch-norm node normalised with.
    pub fn norm_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Novelty-weighted hyperedge message aggregation. `h` drives the edge
    /// statistics and attention; `v` holds the rows being sent.
    pub fn hyper_aggregate(
        &mut self,
        h: Var,
        v: Var,
        index: Arc<HyperedgeIndex>,
        beta: T,
        weighting: SenderWeighting,
    ) -> Result<Var> {
        let (hv, vv) = (self.value(h), self.value(v));
        if hv.rows() != index.n_nodes() || vv.rows() != index.n_nodes() {
            return Err(Error::dim(
                "hyper_aggregate",
                format!("{} / {} rows for {} nodes", hv.rows(), vv.rows(), index.n_nodes()),
            ));
        }
        let out = hyper::aggregate_forward(hv, vv, &index, beta, weighting);
        let op = Op::HyperAggregate {
            h,
            v,
            index,
            beta,
            weighting,
        };
        self.push("hyper_aggregate", out, op, &[h, v])
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Array2<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ScalarMul(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                let mut gr = Array2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *row, gr);
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let mut gx = g.clone();
                let mut gc = Array2::zeros(cv.rows(), 1);
                for i in 0..g.rows() {
                    let c = cv[(i, 0)];
                    let mut acc = T::zero();
                    for (l, o) in gx.row_mut(i).iter_mut().enumerate() {
                        acc += *o * xv[(i, l)];
                        *o *= c;
                    }
                    gc[(i, 0)] = acc;
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *col, gc);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Array2::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[start..start + w]);
                    }
                    self.accumulate(grads, p, gp);
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowSum(x) | Op::RowMean(x) => {
                let xv = self.value(*x);
                let scale = if matches!(op, Op::RowMean(_)) {
                    T::one() / T::of_usize(xv.cols())
                } else {
                    T::one()
                };
                let mut gx = Array2::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let gi = g[(i, 0)] * scale;
                    gx.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowVar(x) => {
                let xv = self.value(*x);
                let d = T::of_usize(xv.cols());
                let two = T::of(2.0);
                let mut gx = Array2::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let r = xv.row(i);
                    let m = r.iter().copied().sum::<T>() / d;
                    let gi = g[(i, 0)];
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(r) {
                        *o = gi * two * (v - m) / d;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) | Op::Mean(x) => {
                let xv = self.value(*x);
                let mut gi = g.item();
                if matches!(op, Op::Mean(_)) {
                    gi /= T::of_usize(xv.len());
                }
                self.accumulate(grads, *x, Array2::filled(xv.rows(), xv.cols(), gi));
            }
            Op::SegmentSum(x, seg) => {
                let gx = g.select_rows(seg);
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentMean(x, seg, counts) => {
                let mut gx = g.select_rows(seg);
                for (r, &s) in seg.iter().enumerate() {
                    let inv = T::one() / T::of_usize(counts[s]);
                    gx.row_mut(r).iter_mut().for_each(|o| *o *= inv);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Array2::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for (l, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = y[l] * (gy[l] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentSoftmax(x, seg) => {
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![T::zero(); n_seg];
                for (r, &s) in seg.iter().enumerate() {
                    dot[s] += out[(r, 0)] * g[(r, 0)];
                }
                let mut gx = Array2::zeros(out.rows(), 1);
                for (r, &s) in seg.iter().enumerate() {
                    gx[(r, 0)] = out[(r, 0)] * (g[(r, 0)] - dot[s]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(out, |gv, y| gv * (T::one() - y * y));
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, v| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y);
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = g.zip_map(self.value(*x), |gv, v| gv / v);
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let gx = g.zip_map(self.value(*x), |gv, v| two * v * gv);
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let scale = g.item() / T::of_usize(lv.rows());
                let mut gx = Array2::zeros(lv.rows(), lv.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let p = hyper::softmax(lv.row(i));
                    for (l, o) in gx.row_mut(i).iter_mut().enumerate() {
                        let t = if l == y { T::one() } else { T::zero() };
                        *o = (p[l] - t) * scale;
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::RowL2Normalize(x, norms) => {
                let mut gx = Array2::zeros(out.rows(), out.cols());
                for (i, &nrm) in norms.iter().enumerate() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for (l, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = (gy[l] - y[l] * dot) / nrm;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowNormalize(x, sums) => {
                let mut gx = Array2::zeros(out.rows(), out.cols());
                for (i, &s) in sums.iter().enumerate() {
                    if s <= T::zero() {
                        continue;
                    }
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for (l, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = (gy[l] - dot) / s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                ..
            } => {
                let (n, d) = xhat.shape();
                let gam = self.value(*gamma).row(0);
                let mut ggamma = Array2::zeros(1, d);
                let mut gbeta = Array2::zeros(1, d);
                for i in 0..n {
                    for l in 0..d {
                        ggamma[(0, l)] += g[(i, l)] * xhat[(i, l)];
                        gbeta[(0, l)] += g[(i, l)];
                    }
                }
                let mut gx = Array2::zeros(n, d);
                if *batch {
                    let nt = T::of_usize(n);
                    for l in 0..d {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..n {
                            let dxh = g[(i, l)] * gam[l];
                            s1 += dxh;
                            s2 += dxh * xhat[(i, l)];
                        }
                        for i in 0..n {
                            let dxh = g[(i, l)] * gam[l];
                            gx[(i, l)] = inv_std[l] * (dxh - s1 / nt - xhat[(i, l)] * s2 / nt);
                        }
                    }
                } else {
                    for i in 0..n {
                        for l in 0..d {
                            gx[(i, l)] = g[(i, l)] * gam[l] * inv_std[l];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, ggamma);
                self.accumulate(grads, *beta, gbeta);
            }
            Op::HyperAggregate {
                h,
                v,
                index,
                beta,
                weighting,
            } => {
                let (gh, gv) = hyper::aggregate_backward(self.value(*h), self.value(*v), index, *beta, *weighting, g);
                self.accumulate(grads, *h, gh);
                self.accumulate(grads, *v, gv);
            }
        }
        Ok(())
    }
}
