//! Cross-view discrepancy features.
//!
//! For every node and every unordered pair of views we measure how much the
//! node's neighbourhoods disagree: on neighbour identity (Jaccard distance),
//! on the softmax distribution of mean neighbour features (a Jensen-Shannon
//! style divergence), and on neighbour risk entropy. Neighbour risk comes
//! from a small auxiliary classifier trained on training labels only, so no
//! ground-truth label of a neighbour is ever read. The three pairwise values
//! are averaged over view pairs and appended to the base features.

use crate::engine::hyper::softmax;
use crate::engine::{AdamConfig, AdamState, Array2, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::hypergraph::HypergraphView;
use crate::ingest::Label;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Direction of the KL terms in the feature divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Divergence {
    /// `½ KL(M‖p1) + ½ KL(M‖p2)` with `M` the midpoint.
    #[default]
    MidpointFirst,
    /// Textbook Jensen-Shannon, `½ KL(p1‖M) + ½ KL(p2‖M)`.
    Standard,
}

/// How neighbour risk vectors are combined before taking the entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RiskAggregation {
    /// Mean of the neighbours' predicted probability vectors.
    #[default]
    Mean,
    /// Class frequencies of the neighbours' predicted (argmax) labels.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyOptions {
    pub divergence: Divergence,
    pub aggregation: RiskAggregation,
    /// Smoothing inside the entropy logarithm.
    pub epsilon: f64,
}

impl Default for DiscrepancyOptions {
    fn default() -> Self {
        DiscrepancyOptions {
            divergence: Divergence::MidpointFirst,
            aggregation: RiskAggregation::Mean,
            epsilon: 1e-8,
        }
    }
}

/// `1 - |a ∩ b| / |a ∪ b|` over sorted, deduplicated id lists; 0 when both are empty.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Identity discrepancy of `node` between two views.
pub fn id_diff<T: Scalar>(view1: &HypergraphView, view2: &HypergraphView, node: usize) -> Result<T> {
    Ok(T::of(jaccard_distance(
        &view1.neighbors(node)?,
        &view2.neighbors(node)?,
    )))
}

/// Softmax of the mean neighbour feature row, or of the node's own row when it has no neighbours.
pub fn neighbor_feature_dist<T: Scalar>(view: &HypergraphView, node: usize, base: &Array2<T>) -> Result<Vec<T>> {
    let nb = view.neighbors(node)?;
    Ok(feature_dist_from(&nb, node, base))
}

fn feature_dist_from<T: Scalar>(neighbors: &[usize], node: usize, base: &Array2<T>) -> Vec<T> {
    if neighbors.is_empty() {
        return softmax(base.row(node));
    }
    let mut mean = vec![T::zero(); base.cols()];
    for &j in neighbors {
        for (m, &v) in mean.iter_mut().zip(base.row(j)) {
            *m += v;
        }
    }
    let k = T::of_usize(neighbors.len());
    mean.iter_mut().for_each(|m| *m /= k);
    softmax(&mean)
}

fn kl<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Divergence between two strictly positive distributions of equal length.
pub fn feat_diff<T: Scalar>(p1: &[T], p2: &[T], divergence: Divergence) -> Result<T> {
    if p1.len() != p2.len() {
        return Err(Error::dim("feat_diff", format!("{} vs {}", p1.len(), p2.len())));
    }
    let half = T::of(0.5);
    let m: Vec<T> = p1.iter().zip(p2).map(|(&a, &b)| half * (a + b)).collect();
    let v = match divergence {
        Divergence::MidpointFirst => half * kl(&m, p1) + half * kl(&m, p2),
        Divergence::Standard => half * kl(p1, &m) + half * kl(p2, &m),
    };
    // clamp rounding noise around identical inputs
    Ok(v.max(T::zero()))
}

/// `-Σ r·ln(r + ε)` of a risk distribution.
pub fn entropy<T: Scalar>(r: &[T], epsilon: T) -> T {
    -r.iter().map(|&v| v * (v + epsilon).ln()).sum::<T>()
}

/// Neighbourhood risk distribution of a node (falls back to its own prediction).
pub fn neighbor_risk<T: Scalar>(
    neighbors: &[usize],
    node: usize,
    risk: &Array2<T>,
    aggregation: RiskAggregation,
) -> Vec<T> {
    let rows: Vec<usize> = if neighbors.is_empty() {
        vec![node]
    } else {
        neighbors.to_vec()
    };
    let k = T::of_usize(rows.len());
    let mut r = vec![T::zero(); risk.cols()];
    for &j in &rows {
        match aggregation {
            RiskAggregation::Mean => {
                for (a, &p) in r.iter_mut().zip(risk.row(j)) {
                    *a += p;
                }
            }
            RiskAggregation::Majority => {
                let row = risk.row(j);
                let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                r[arg] += T::one();
            }
        }
    }
    r.iter_mut().for_each(|a| *a /= k);
    r
}

/// Entropy of the neighbourhood risk distribution of `node` in `view`.
pub fn label_entropy<T: Scalar>(
    view: &HypergraphView,
    node: usize,
    risk: &Array2<T>,
    options: &DiscrepancyOptions,
) -> Result<T> {
    let nb = view.neighbors(node)?;
    let r = neighbor_risk(&nb, node, risk, options.aggregation);
    Ok(entropy(&r, T::of(options.epsilon)))
}

pub fn label_diff<T: Scalar>(h1: T, h2: T) -> T {
    (h1 - h2).abs()
}

/// Hyperparameters of the auxiliary risk classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            hidden: 64,
            epochs: 100,
            batch_size: 512,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One-hidden-layer classifier producing fraud/legitimate probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel<T> {
    pub params: ParamStore<T>,
}

impl<T: Scalar> RiskModel<T> {
    fn new(d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        params.insert_glorot("risk.w1", d_in, hidden, rng);
        params.insert("risk.b1", Array2::zeros(1, hidden));
        params.insert_glorot("risk.w2", hidden, 2, rng);
        params.insert("risk.b2", Array2::zeros(1, 2));
        RiskModel { params }
    }

    fn logits(
        &self,
        tape: &mut Tape<T>,
        x: Array2<T>,
        learn: bool,
    ) -> Result<(crate::engine::Var, Vec<crate::engine::Var>)> {
        let leaves: Vec<_> = self
            .params
            .iter()
            .map(|(_, a)| {
                if learn {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        let x = tape.constant(x);
        let h = tape.matmul(x, leaves[0])?;
        let h = tape.add_row(h, leaves[1])?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, leaves[2])?;
        let z = tape.add_row(z, leaves[3])?;
        Ok((z, leaves))
    }

    /// Class probabilities, `n x 2` with column 1 the fraud probability.
    pub fn predict(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let (z, _) = self.logits(&mut tape, x.clone(), false)?;
        let p = tape.softmax_rows(z)?;
        Ok(tape.value(p).clone())
    }
}

/// Fits the risk classifier on the labelled rows among `train_rows`.
pub fn train_aux_risk_model<T: Scalar>(
    base: &Array2<T>,
    labels: &[Label],
    train_rows: &[usize],
    config: &RiskConfig,
) -> Result<RiskModel<T>> {
    let mut rows: Vec<usize> = train_rows
        .iter()
        .copied()
        .filter(|&i| labels[i].class().is_some())
        .collect();
    let n_fraud = rows.iter().filter(|&&i| labels[i] == Label::Fraud).count();
    if n_fraud == 0 || n_fraud == rows.len() {
        return Err(Error::Training(format!(
            "risk model needs both classes among {} labelled training rows ({n_fraud} fraud)",
            rows.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RiskModel::new(base.cols(), config.hidden, &mut rng);
    let mut adam = AdamState::new(config.adam, &model.params);
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        rows.shuffle(&mut rng);
        for chunk in rows.chunks(batch) {
            let mut tape = Tape::new();
            let (z, leaves) = model.logits(&mut tape, base.select_rows(chunk), true)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i].class().unwrap()).collect();
            let loss = tape.cross_entropy_with_logits(z, Arc::new(y))?;
            let g = tape.backward(loss)?;
            let grads: Vec<_> = leaves.iter().map(|&l| g.get(l)).collect();
            adam.step(&mut model.params, &grads)?;
        }
    }
    Ok(model)
}

/// Base features with the three averaged discrepancy columns appended.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedFeatureMatrix<T> {
    pub base: Array2<T>,
    pub id_diff: Vec<T>,
    pub feat_diff: Vec<T>,
    pub label_diff: Vec<T>,
    pub enhanced: Array2<T>,
}

impl<T: Scalar> EnhancedFeatureMatrix<T> {
    /// CSV with headers `f0..f{d-1},id_diff,feat_diff,label_diff`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.base.cols()).map(|i| format!("f{i}")).collect();
        header.extend(["id_diff", "feat_diff", "label_diff"].map(String::from));
        w.write_record(&header)?;
        for i in 0..self.enhanced.rows() {
            w.write_record(self.enhanced.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

struct ViewSummary<T> {
    neighbors: Vec<Vec<usize>>,
    dist: Vec<Vec<T>>,
    entropy: Vec<T>,
}

/// Computes the averaged discrepancy columns for every node.
///
/// `risk` holds the auxiliary model's `n x 2` predictions for all nodes.
pub fn enhance_features<T: Scalar>(
    views: &[HypergraphView],
    base: &Array2<T>,
    risk: &Array2<T>,
    options: &DiscrepancyOptions,
) -> Result<EnhancedFeatureMatrix<T>> {
    if views.len() < 2 {
        return Err(Error::Config(format!(
            "discrepancy features need at least two views, got {}",
            views.len()
        )));
    }
    let n = base.rows();
    if views.iter().any(|v| v.n_nodes() != n) || risk.rows() != n {
        return Err(Error::dim(
            "enhance_features",
            "views, features and risk disagree on node count",
        ));
    }
    let eps = T::of(options.epsilon);
    let summaries: Vec<ViewSummary<T>> = views
        .iter()
        .map(|v| {
            let neighbors: Vec<Vec<usize>> = (0..n)
                .into_par_iter()
                .map(|i| v.neighbors(i).expect("node in range"))
                .collect();
            let dist = (0..n)
                .into_par_iter()
                .map(|i| feature_dist_from(&neighbors[i], i, base))
                .collect();
            let entropy = (0..n)
                .into_par_iter()
                .map(|i| entropy(&neighbor_risk(&neighbors[i], i, risk, options.aggregation), eps))
                .collect();
            ViewSummary {
                neighbors,
                dist,
                entropy,
            }
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..views.len())
        .flat_map(|a| (a + 1..views.len()).map(move |b| (a, b)))
        .collect();
    let np = T::of_usize(pairs.len());
    let per_node: Vec<(T, T, T)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut id, mut fd, mut ld) = (T::zero(), T::zero(), T::zero());
            for &(a, b) in &pairs {
                let (sa, sb) = (&summaries[a], &summaries[b]);
                id += T::of(jaccard_distance(&sa.neighbors[i], &sb.neighbors[i]));
                fd += feat_diff(&sa.dist[i], &sb.dist[i], options.divergence).expect("equal lengths");
                ld += label_diff(sa.entropy[i], sb.entropy[i]);
            }
            (id / np, fd / np, ld / np)
        })
        .collect();
    let id_diff: Vec<T> = per_node.iter().map(|t| t.0).collect();
    let feat_diff: Vec<T> = per_node.iter().map(|t| t.1).collect();
    let label_diff: Vec<T> = per_node.iter().map(|t| t.2).collect();
    let d = base.cols();
    let mut enhanced = Array2::zeros(n, d + 3);
    for i in 0..n {
        let row = enhanced.row_mut(i);
        row[..d].copy_from_slice(base.row(i));
        row[d] = id_diff[i];
        row[d + 1] = feat_diff[i];
        row[d + 2] = label_diff[i];
    }
    Ok(EnhancedFeatureMatrix {
        base: base.clone(),
        id_diff,
        feat_diff,
        label_diff,
        enhanced,
    })
}

/// Wraps base features without discrepancy columns (the `no_hcdp` ablation).
pub fn passthrough<T: Scalar>(base: &Array2<T>) -> EnhancedFeatureMatrix<T> {
    let n = base.rows();
    EnhancedFeatureMatrix {
        base: base.clone(),
        id_diff: vec![T::zero(); n],
        feat_diff: vec![T::zero(); n],
        label_diff: vec![T::zero(); n],
        enhanced: base.clone(),
    }
}
