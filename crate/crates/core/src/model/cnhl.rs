//! Novelty-aware hypergraph layer.
//!
//! Within each hyperedge, members are compared with the hyperedge center.
//! Dimensions with high member variance get more weight in the novelty
//! score, and each member's message to a co-member is weighted by a softmax
//! over the senders' novelty. A node's message is the mean of its per-edge
//! messages; the update is `sigmoid(h + m)`.

use crate::engine::hyper::edge_state;
use crate::engine::{EdgeState, HyperedgeIndex, SenderWeighting, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use std::sync::Arc;

/// One layer on the tape: `sigmoid(H + aggregate(H, H·W))`.
pub fn cnhl_layer<T: Scalar>(
    tape: &mut Tape<T>,
    index: &Arc<HyperedgeIndex>,
    h: Var,
    w: Var,
    beta: T,
    weighting: SenderWeighting,
) -> Result<Var> {
    let v = tape.matmul(h, w)?;
    let m = tape.hyper_aggregate(h, v, index.clone(), beta, weighting)?;
    let pre = tape.add(h, m)?;
    tape.sigmoid(pre)
}

/// The same layer assembled from generic primitives (gather, segment
/// reductions, softmaxes). Used to cross-check the fused kernel.
pub fn cnhl_layer_composed<T: Scalar>(
    tape: &mut Tape<T>,
    index: &HyperedgeIndex,
    h: Var,
    w: Var,
    beta: T,
    weighting: SenderWeighting,
) -> Result<Var> {
    let n = index.n_nodes();
    let n_edges = index.n_edges();
    let n_slots = index.n_memberships();
    let member_nodes = Arc::new(index.members().to_vec());
    let member_edges = Arc::new(index.member_edges());

    let hm = tape.gather_rows(h, member_nodes.clone())?;
    let center = tape.segment_mean(hm, member_edges.clone(), n_edges)?;
    let center_m = tape.gather_rows(center, member_edges.clone())?;
    let dev = tape.sub(hm, center_m)?;
    let dev2 = tape.square(dev)?;
    let var = tape.segment_mean(dev2, member_edges.clone(), n_edges)?;
    let scaled = tape.scalar_mul(var, beta)?;
    let gate = tape.softmax_rows(scaled)?;
    let gate_m = tape.gather_rows(gate, member_edges)?;
    let weighted_dev = tape.mul(gate_m, dev2)?;
    let novelty = tape.row_sum(weighted_dev)?;

    // (receiver slot, sender slot) for every ordered pair of distinct co-members
    let mut receivers = Vec::new();
    let mut senders = Vec::new();
    let mut uniform = Vec::new();
    let mut offset = 0;
    for e in 0..n_edges {
        let k = index.edge(e).len();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    receivers.push(offset + i);
                    senders.push(offset + j);
                    uniform.push(T::one() / T::of_usize(k - 1));
                }
            }
        }
        offset += k;
    }
    let receivers = Arc::new(receivers);
    let senders = Arc::new(senders);
    let alpha = match weighting {
        SenderWeighting::Novelty => {
            let s_pair = tape.gather_rows(novelty, senders.clone())?;
            tape.segment_softmax(s_pair, receivers.clone(), n_slots)?
        }
        SenderWeighting::Uniform => {
            let len = uniform.len();
            tape.constant(crate::engine::Array2::from_vec(len, 1, uniform)?)
        }
    };
    let v = tape.matmul(h, w)?;
    let vm = tape.gather_rows(v, member_nodes.clone())?;
    let v_pair = tape.gather_rows(vm, senders)?;
    let weighted = tape.mul_col(v_pair, alpha)?;
    let per_edge = tape.segment_sum(weighted, receivers, n_slots)?;
    let m = tape.segment_mean(per_edge, member_nodes, n)?;
    let pre = tape.add(h, m)?;
    tape.sigmoid(pre)
}

/// Edge states of every hyperedge for the node rows `h`.
pub fn edge_states<T: Scalar>(
    index: &HyperedgeIndex,
    h: &crate::engine::Array2<T>,
    beta: T,
    weighting: SenderWeighting,
) -> Vec<EdgeState<T>> {
    (0..index.n_edges())
        .map(|e| {
            let rows: Vec<&[T]> = index.edge(e).iter().map(|&v| h.row(v)).collect();
            edge_state(&rows, beta, weighting)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Array2;

    #[test]
    fn identical_members_hit_the_fixed_point() {
        let h = Array2::<f64>::zeros(4, 3);
        let idx = Arc::new(HyperedgeIndex::new(4, &[vec![0, 1, 2, 3]]));
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let w = tape.constant(Array2::identity(3));
        let out = cnhl_layer(&mut tape, &idx, hv, w, 1.0, SenderWeighting::Novelty).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.5));
        let st = &edge_states(&idx, &h, 1.0, SenderWeighting::Novelty)[0];
        assert!(st.gate.iter().all(|&g| g == 1.0 / 3.0));
        assert!(st.novelty.iter().all(|&s| s == 0.0));
        for (i, row) in st.weights.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                assert_eq!(a, if i == j { 0.0 } else { 1.0 / 3.0 });
            }
        }
    }

    #[test]
    fn one_dimensional_hand_trace() {
        let idx = Arc::new(HyperedgeIndex::new(2, &[vec![0, 1]]));
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Array2::from_rows(&[[1.0], [3.0]]).unwrap());
        let w = tape.constant(Array2::identity(1));
        let out = cnhl_layer(&mut tape, &idx, h, w, 1.0, SenderWeighting::Novelty).unwrap();
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((tape.value(out)[(0, 0)] - expected).abs() < 1e-15);
        assert!((expected - 0.98201).abs() < 1e-5);
    }
}
