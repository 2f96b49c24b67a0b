//! Novelty-weighted hyperedge aggregation kernel.
//!
//! For every hyperedge the kernel computes the member center, the
//! per-dimension variance, a softmax gate over dimensions, per-member novelty
//! scores, and for each receiving member the attention-weighted sum of the
//! other members' projected rows. Per-node messages are the mean over the
//! node's incident hyperedges. The backward pass recomputes edge statistics
//! from the stored inputs instead of keeping them on the tape.

use crate::engine::array::Array2;
use crate::scalar::Scalar;
use rayon::prelude::*;

/// How senders inside a hyperedge are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SenderWeighting {
    /// Softmax over the senders' novelty scores.
    Novelty,
    /// Every sender gets `1 / (|e| - 1)`.
    Uniform,
}

/// Flattened hyperedge membership over a dense local node range `0..n_nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperedgeIndex {
    n_nodes: usize,
    members: Vec<usize>,
    offsets: Vec<usize>,
    degree: Vec<usize>,
}

impl HyperedgeIndex {
    /// Every edge must have at least two members, all `< n_nodes`.
    pub fn new<E: AsRef<[usize]>>(n_nodes: usize, edges: &[E]) -> Self {
        let mut members = Vec::new();
        let mut offsets = vec![0];
        let mut degree = vec![0; n_nodes];
        for e in edges {
            let e = e.as_ref();
            debug_assert!(e.len() >= 2, "hyperedge with fewer than two members");
            for &v in e {
                members.push(v);
                degree[v] += 1;
            }
            offsets.push(members.len());
        }
        HyperedgeIndex {
            n_nodes,
            members,
            offsets,
            degree,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_memberships(&self) -> usize {
        self.members.len()
    }

    pub fn edge(&self, e: usize) -> &[usize] {
        &self.members[self.offsets[e]..self.offsets[e + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degree[node]
    }

    /// Membership slot -> edge id, for composing the layer from primitives.
    pub fn member_edges(&self) -> Vec<usize> {
        (0..self.n_edges())
            .flat_map(|e| std::iter::repeat_n(e, self.edge(e).len()))
            .collect()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }
}

/// Per-edge quantities of one aggregation step.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState<T> {
    /// Member center.
    pub center: Vec<T>,
    /// Per-dimension variance of members around the center.
    pub variance: Vec<T>,
    /// Dimension gate, a distribution over dimensions.
    pub gate: Vec<T>,
    /// Novelty score per member, in member order.
    pub novelty: Vec<T>,
    /// `weights[i][j]` is the weight receiver `i` gives sender `j`; zero on the diagonal.
    pub weights: Vec<Vec<T>>,
}

/// Numerically stable softmax of a slice.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Computes the state of a single hyperedge given its members' rows.
pub fn edge_state<T: Scalar>(rows: &[&[T]], beta: T, weighting: SenderWeighting) -> EdgeState<T> {
    let k = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let kt = T::of_usize(k);
    let mut center = vec![T::zero(); d];
    for r in rows {
        for (c, &v) in center.iter_mut().zip(r.iter()) {
            *c += v;
        }
    }
    for c in center.iter_mut() {
        *c /= kt;
    }
    let mut variance = vec![T::zero(); d];
    for r in rows {
        for l in 0..d {
            let dev = r[l] - center[l];
            variance[l] += dev * dev;
        }
    }
    for v in variance.iter_mut() {
        *v /= kt;
    }
    let scaled: Vec<T> = variance.iter().map(|&v| beta * v).collect();
    let gate = softmax(&scaled);
    let novelty: Vec<T> = rows
        .iter()
        .map(|r| {
            let mut s = T::zero();
            for l in 0..d {
                let dev = r[l] - center[l];
                s += gate[l] * dev * dev;
            }
            s
        })
        .collect();
    let weights = sender_weights(&novelty, weighting);
    EdgeState {
        center,
        variance,
        gate,
        novelty,
        weights,
    }
}

fn sender_weights<T: Scalar>(novelty: &[T], weighting: SenderWeighting) -> Vec<Vec<T>> {
    let k = novelty.len();
    let mut weights = vec![vec![T::zero(); k]; k];
    match weighting {
        SenderWeighting::Uniform => {
            let u = T::one() / T::of_usize(k - 1);
            for (i, row) in weights.iter_mut().enumerate() {
                for (j, w) in row.iter_mut().enumerate() {
                    if i != j {
                        *w = u;
                    }
                }
            }
        }
        SenderWeighting::Novelty => {
            for (i, row) in weights.iter_mut().enumerate() {
                let max = novelty
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .fold(T::neg_infinity(), |m, (_, &s)| m.max(s));
                let mut z = T::zero();
                for (j, w) in row.iter_mut().enumerate() {
                    if j != i {
                        *w = (novelty[j] - max).exp();
                        z += *w;
                    }
                }
                for w in row.iter_mut() {
                    *w /= z;
                }
            }
        }
    }
    weights
}

fn edge_rows<'a, T: Scalar>(x: &'a Array2<T>, members: &[usize]) -> Vec<&'a [T]> {
    members.iter().map(|&m| x.row(m)).collect()
}

/// Per-member messages of one edge, `|e| x d` row-major.
fn edge_messages<T: Scalar>(state: &EdgeState<T>, v_rows: &[&[T]], d: usize) -> Vec<T> {
    let k = v_rows.len();
    let mut out = vec![T::zero(); k * d];
    for i in 0..k {
        let o = &mut out[i * d..(i + 1) * d];
        for (j, vr) in v_rows.iter().enumerate() {
            let a = state.weights[i][j];
            if i == j {
                continue;
            }
            for (ol, &vl) in o.iter_mut().zip(vr.iter()) {
                *ol += a * vl;
            }
        }
    }
    out
}

/// Forward pass: per-node mean of incident-edge messages (zero for isolated nodes).
pub fn aggregate_forward<T: Scalar>(
    h: &Array2<T>,
    v: &Array2<T>,
    index: &HyperedgeIndex,
    beta: T,
    weighting: SenderWeighting,
) -> Array2<T> {
    let d = v.cols();
    let per_edge: Vec<Vec<T>> = (0..index.n_edges())
        .into_par_iter()
        .map(|e| {
            let members = index.edge(e);
            let state = edge_state(&edge_rows(h, members), beta, weighting);
            edge_messages(&state, &edge_rows(v, members), d)
        })
        .collect();
    let mut out = Array2::zeros(h.rows(), d);
    for (e, msgs) in per_edge.iter().enumerate() {
        for (slot, &node) in index.edge(e).iter().enumerate() {
            let inv = T::one() / T::of_usize(index.degree(node));
            let row = out.row_mut(node);
            for (o, &m) in row.iter_mut().zip(&msgs[slot * d..(slot + 1) * d]) {
                *o += m * inv;
            }
        }
    }
    out
}

/// Backward pass. Returns gradients with respect to `h` and `v`.
pub fn aggregate_backward<T: Scalar>(
    h: &Array2<T>,
    v: &Array2<T>,
    index: &HyperedgeIndex,
    beta: T,
    weighting: SenderWeighting,
    grad_out: &Array2<T>,
) -> (Array2<T>, Array2<T>) {
    let d = v.cols();
    let dh_dim = h.cols();
    let per_edge: Vec<(Vec<T>, Vec<T>)> = (0..index.n_edges())
        .into_par_iter()
        .map(|e| {
            let members = index.edge(e);
            let k = members.len();
            let h_rows = edge_rows(h, members);
            let v_rows = edge_rows(v, members);
            let state = edge_state(&h_rows, beta, weighting);
            let msgs = edge_messages(&state, &v_rows, d);
            // upstream gradient of each member's per-edge message
            let dmsg: Vec<T> = members
                .iter()
                .flat_map(|&node| {
                    let inv = T::one() / T::of_usize(index.degree(node));
                    grad_out.row(node).iter().map(move |&g| g * inv)
                })
                .collect();
            let mut dv = vec![T::zero(); k * d];
            for i in 0..k {
                let dm_i = &dmsg[i * d..(i + 1) * d];
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let a = state.weights[i][j];
                    for (g, &dm) in dv[j * d..(j + 1) * d].iter_mut().zip(dm_i) {
                        *g += a * dm;
                    }
                }
            }
            let mut dh = vec![T::zero(); k * dh_dim];
            if weighting == SenderWeighting::Novelty {
                let mut ds = vec![T::zero(); k];
                for i in 0..k {
                    let dm_i = &dmsg[i * d..(i + 1) * d];
                    let msg_i = &msgs[i * d..(i + 1) * d];
                    let dm_dot_msg: T = dm_i.iter().zip(msg_i).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        if i == j {
                            continue;
                        }
                        let dm_dot_v: T = dm_i.iter().zip(v_rows[j].iter()).map(|(&a, &b)| a * b).sum();
                        ds[j] += state.weights[i][j] * (dm_dot_v - dm_dot_msg);
                    }
                }
                let kt = T::of_usize(k);
                let two = T::of(2.0);
                let mut dgate = vec![T::zero(); dh_dim];
                let mut ddev = vec![T::zero(); k * dh_dim];
                for i in 0..k {
                    for l in 0..dh_dim {
                        let dev = h_rows[i][l] - state.center[l];
                        dgate[l] += ds[i] * dev * dev;
                        ddev[i * dh_dim + l] = two * ds[i] * state.gate[l] * dev;
                    }
                }
                let gdot: T = state.gate.iter().zip(&dgate).map(|(&g, &dg)| g * dg).sum();
                let dvar: Vec<T> = (0..dh_dim).map(|l| beta * state.gate[l] * (dgate[l] - gdot)).collect();
                for i in 0..k {
                    for l in 0..dh_dim {
                        let dev = h_rows[i][l] - state.center[l];
                        ddev[i * dh_dim + l] += two / kt * dvar[l] * dev;
                    }
                }
                let mut mean_ddev = vec![T::zero(); dh_dim];
                for i in 0..k {
                    for l in 0..dh_dim {
                        mean_ddev[l] += ddev[i * dh_dim + l];
                    }
                }
                for m in mean_ddev.iter_mut() {
                    *m /= kt;
                }
                for i in 0..k {
                    for l in 0..dh_dim {
                        dh[i * dh_dim + l] = ddev[i * dh_dim + l] - mean_ddev[l];
                    }
                }
            }
            (dh, dv)
        })
        .collect();
    let mut grad_h = Array2::zeros(h.rows(), dh_dim);
    let mut grad_v = Array2::zeros(v.rows(), d);
    for (e, (dh, dv)) in per_edge.iter().enumerate() {
        for (slot, &node) in index.edge(e).iter().enumerate() {
            for (g, &x) in grad_h
                .row_mut(node)
                .iter_mut()
                .zip(&dh[slot * dh_dim..(slot + 1) * dh_dim])
            {
                *g += x;
            }
            for (g, &x) in grad_v.row_mut(node).iter_mut().zip(&dv[slot * d..(slot + 1) * d]) {
                *g += x;
            }
        }
    }
    (grad_h, grad_v)
}
