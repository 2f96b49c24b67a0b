use crate::engine::HyperedgeIndex;
use crate::hypergraph::HypergraphView;
use std::sync::Arc;

const ABSENT: usize = usize::MAX;

/// Sub-hypergraph a forward pass runs on, with nodes renumbered densely.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGraph {
    /// Global node id of every local node, ascending.
    pub nodes: Vec<usize>,
    /// Per-view hyperedges over local ids.
    pub views: Vec<Arc<HyperedgeIndex>>,
    /// Local ids of the rows to classify, in request order.
    pub targets: Vec<usize>,
}

impl BatchGraph {
    /// Every node and hyperedge of every view.
    pub fn full(views: &[HypergraphView], targets: &[usize]) -> Self {
        let n = views.first().map_or(0, |v| v.n_nodes());
        let indices = views
            .iter()
            .map(|v| Arc::new(HyperedgeIndex::new(n, &v.hyperedges)))
            .collect();
        BatchGraph {
            nodes: (0..n).collect(),
            views: indices,
            targets: targets.to_vec(),
        }
    }

    /// Smallest subgraph on which `hops` stacked layers give the targets the
    /// same outputs as the full graph.
    ///
    /// Per view, `S_0` is the target set and `S_{k+1}` adds every member of
    /// hyperedges incident to `S_k`. The subgraph keeps the hyperedges
    /// incident to `S_{hops-1}`, whose members all lie in `S_hops`.
    pub fn closure(views: &[HypergraphView], targets: &[usize], hops: usize) -> Self {
        let n = views.first().map_or(0, |v| v.n_nodes());
        let mut in_union = vec![false; n];
        for &t in targets {
            in_union[t] = true;
        }
        let mut per_view_edges: Vec<Vec<usize>> = Vec::with_capacity(views.len());
        for view in views {
            let mut in_set = vec![false; n];
            let mut frontier: Vec<usize> = Vec::new();
            for &t in targets {
                if !in_set[t] {
                    in_set[t] = true;
                    frontier.push(t);
                }
            }
            let mut edge_used = vec![false; view.n_edges()];
            let mut edges = Vec::new();
            for _ in 0..hops {
                let mut next = Vec::new();
                for &v in &frontier {
                    for &e in &view.node_to_edges[v] {
                        if edge_used[e] {
                            continue;
                        }
                        edge_used[e] = true;
                        edges.push(e);
                        for &u in &view.hyperedges[e] {
                            if !in_set[u] {
                                in_set[u] = true;
                                next.push(u);
                            }
                        }
                    }
                }
                if next.is_empty() {
                    break;
                }
                frontier = next;
            }
            edges.sort_unstable();
            for &e in &edges {
                for &u in &view.hyperedges[e] {
                    in_union[u] = true;
                }
            }
            per_view_edges.push(edges);
        }
        let nodes: Vec<usize> = (0..n).filter(|&i| in_union[i]).collect();
        let mut local = vec![ABSENT; n];
        for (li, &g) in nodes.iter().enumerate() {
            local[g] = li;
        }
        let indices = views
            .iter()
            .zip(&per_view_edges)
            .map(|(view, edges)| {
                let local_edges: Vec<Vec<usize>> = edges
                    .iter()
                    .map(|&e| view.hyperedges[e].iter().map(|&u| local[u]).collect())
                    .collect();
                Arc::new(HyperedgeIndex::new(nodes.len(), &local_edges))
            })
            .collect();
        BatchGraph {
            targets: targets.iter().map(|&t| local[t]).collect(),
            nodes,
            views: indices,
        }
    }

    pub fn n_local(&self) -> usize {
        self.nodes.len()
    }
}
