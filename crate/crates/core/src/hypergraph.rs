//! Per-view temporal hypergraphs built from per-category sliding windows.

use crate::error::{Error, Result};
use crate::ingest::TransactionTable;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Treatment of categories holding fewer nodes than the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WindowPolicy {
    /// A category with `2 <= size < w` nodes becomes one hyperedge.
    #[default]
    KeepUndersized,
    /// Only full windows of exactly `w` nodes are emitted.
    Strict,
}

/// Nodes grouped by category, groups in first-appearance order, members in time order.
pub type CategoryGroups = Vec<(String, Vec<usize>)>;

/// Groups the table's nodes by their category under `view_key`.
pub fn partition_by_category(table: &TransactionTable, view_key: &str) -> Result<CategoryGroups> {
    let v = table.view_index(view_key)?;
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut groups: CategoryGroups = Vec::new();
    // rows are already stably sorted by timestamp
    for r in table.rows() {
        let cat = r.categories[v].as_str();
        let g = *slot.entry(cat).or_insert_with(|| {
            groups.push((cat.to_string(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(r.id);
    }
    Ok(groups)
}

/// Stride-1 windows of `w` consecutive nodes over one time-ordered group.
pub fn sliding_window_hyperedges(group: &[usize], w: usize, policy: WindowPolicy) -> Result<Vec<Vec<usize>>> {
    if w < 2 {
        return Err(Error::Parameter(format!("window must be at least 2, got {w}")));
    }
    if group.len() >= w {
        Ok(group.windows(w).map(|win| win.to_vec()).collect())
    } else if group.len() >= 2 && policy == WindowPolicy::KeepUndersized {
        Ok(vec![group.to_vec()])
    } else {
        Ok(Vec::new())
    }
}

/// Hypergraph of one view over all table nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphView {
    pub view_key: String,
    pub window: usize,
    /// Node ids per hyperedge, in time order.
    pub hyperedges: Vec<Vec<usize>>,
    /// Category group each hyperedge came from (index into `categories`).
    pub edge_category: Vec<usize>,
    /// Incident hyperedge ids per node.
    pub node_to_edges: Vec<Vec<usize>>,
    pub categories: CategoryGroups,
}

impl HypergraphView {
    pub fn n_nodes(&self) -> usize {
        self.node_to_edges.len()
    }

    pub fn n_edges(&self) -> usize {
        self.hyperedges.len()
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.n_nodes() {
            return Err(Error::Node(node));
        }
        Ok(())
    }

    /// Sorted ids of every other node sharing at least one hyperedge with `node`.
    pub fn neighbors(&self, node: usize) -> Result<Vec<usize>> {
        self.check_node(node)?;
        let mut out: Vec<usize> = self.node_to_edges[node]
            .iter()
            .flat_map(|&e| self.hyperedges[e].iter().copied())
            .filter(|&j| j != node)
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn incident_edges(&self, node: usize) -> Result<&[usize]> {
        self.check_node(node)?;
        Ok(&self.node_to_edges[node])
    }
}

/// Builds the hypergraph of one view.
pub fn build_view(table: &TransactionTable, view_key: &str, w: usize, policy: WindowPolicy) -> Result<HypergraphView> {
    if w < 2 {
        return Err(Error::Parameter(format!("window must be at least 2, got {w}")));
    }
    let categories = partition_by_category(table, view_key)?;
    let mut hyperedges = Vec::new();
    let mut edge_category = Vec::new();
    for (c, (_, group)) in categories.iter().enumerate() {
        for e in sliding_window_hyperedges(group, w, policy)? {
            hyperedges.push(e);
            edge_category.push(c);
        }
    }
    let mut node_to_edges = vec![Vec::new(); table.len()];
    for (e, members) in hyperedges.iter().enumerate() {
        for &v in members {
            node_to_edges[v].push(e);
        }
    }
    Ok(HypergraphView {
        view_key: view_key.to_string(),
        window: w,
        hyperedges,
        edge_category,
        node_to_edges,
        categories,
    })
}

/// Builds every view of the table, in view-key order.
pub fn build_views(table: &TransactionTable, w: usize, policy: WindowPolicy) -> Result<Vec<HypergraphView>> {
    table
        .view_keys()
        .par_iter()
        .map(|k| build_view(table, k, w, policy))
        .collect()
}

/// Writes `view_key,category,node_ids...` lines, one per hyperedge.
pub fn write_dump<W: Write>(views: &[HypergraphView], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    for view in views {
        for (e, members) in view.hyperedges.iter().enumerate() {
            let mut rec = vec![view.view_key.clone(), view.categories[view.edge_category[e]].0.clone()];
            rec.extend(members.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dump_file(views: &[HypergraphView], path: &Path) -> Result<()> {
    write_dump(views, std::io::BufWriter::new(std::fs::File::create(path)?))
}
