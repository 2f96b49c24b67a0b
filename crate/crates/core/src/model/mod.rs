//! The multi-view hypergraph classifier.
//!
//! One forward pass: project the (enhanced) node features, add label
//! embeddings of visible labelled nodes and L2-normalise; run a stack of
//! novelty-aware layers independently per view; fuse the per-view target
//! rows with attention plus per-view modulation; classify with a small MLP
//! head.

pub mod cnhl;
pub mod graph;

pub use cnhl::{cnhl_layer, cnhl_layer_composed, edge_states};
pub use graph::BatchGraph;

use crate::engine::{Array2, NormStats, ParamStore, SenderWeighting, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How per-view embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionMode {
    /// Attention weights refined by per-view modulation, normalised by absolute value.
    #[default]
    Attention,
    /// Unweighted mean over views.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub n_views: usize,
    pub beta: f64,
    pub dropout: f64,
    pub weighting: SenderWeighting,
    pub fusion: FusionMode,
    /// One projection per layer shared by all views.
    pub share_weights: bool,
    /// Hidden width of each view's modulation MLP.
    pub modulation_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden: usize, layers: usize, n_views: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden,
            layers,
            n_views,
            beta: 1.0,
            dropout: 0.2,
            weighting: SenderWeighting::Novelty,
            fusion: FusionMode::Attention,
            share_weights: false,
            modulation_hidden: (hidden / 8).max(4),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 || self.hidden == 0 || self.modulation_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.layers == 0 {
            return bad("at least one layer is required");
        }
        if self.n_views == 0 {
            return bad("at least one view is required");
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return bad("beta must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Forward-pass behaviour of the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout (seeded mask).
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    input_w: usize,
    input_b: usize,
    label: usize,
    /// First projection slot; layer `l` of view `a` sits at `cnhl + a * layers + l`
    /// (or `cnhl + l` when shared).
    cnhl: usize,
    fusion_g: usize,
    fusion_p: usize,
    /// Four slots per view: w1, b1, w2, b2.
    modulation: usize,
    head_w1: usize,
    head_b1: usize,
    bn_gamma: usize,
    bn_beta: usize,
    head_w2: usize,
    head_b2: usize,
}

/// Learnable state plus running normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    slots_: SlotsCell,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SlotsCell([usize; 13]);

impl SlotsCell {
    fn get(self) -> Slots {
        let s = self.0;
        Slots {
            input_w: s[0],
            input_b: s[1],
            label: s[2],
            cnhl: s[3],
            fusion_g: s[4],
            fusion_p: s[5],
            modulation: s[6],
            head_w1: s[7],
            head_b1: s[8],
            bn_gamma: s[9],
            bn_beta: s[10],
            head_w2: s[11],
            head_b2: s[12],
        }
    }
}

/// Everything a forward pass recorded that callers may inspect.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `targets x 2` class logits.
    pub logits: Var,
    /// `targets x views` fusion weights.
    pub view_weights: Var,
    /// Fused target embeddings.
    pub fused: Var,
    /// Initial node states over the whole batch graph.
    pub initial: Var,
    /// Input of every layer, per view.
    pub layer_inputs: Vec<Vec<Var>>,
    pub batch_norm: Var,
}

/// Parameters placed on a tape, aligned with the model's parameter slots.
#[derive(Debug, Clone)]
pub struct Leaves(pub Vec<Var>);

impl<T: Scalar> MultiViewModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let a = config.n_views;
        let mut p = ParamStore::new();
        let input_w = p.insert_glorot("input.w", config.input_dim, d, &mut rng);
        let input_b = p.insert("input.b", Array2::zeros(1, d));
        let label = p.insert_glorot("label.embed", 2, d, &mut rng);
        let mut cnhl = None;
        if config.share_weights {
            for l in 0..config.layers {
                let s = p.insert_glorot(format!("cnhl.l{l}.w"), d, d, &mut rng);
                cnhl.get_or_insert(s);
            }
        } else {
            for v in 0..a {
                for l in 0..config.layers {
                    let s = p.insert_glorot(format!("cnhl.v{v}.l{l}.w"), d, d, &mut rng);
                    cnhl.get_or_insert(s);
                }
            }
        }
        let fusion_g = p.insert_glorot("fusion.wg", a * d, a, &mut rng);
        let fusion_p = p.insert_glorot("fusion.wp", d, d, &mut rng);
        let mh = config.modulation_hidden;
        let mut modulation = None;
        for v in 0..a {
            let s = p.insert_glorot(format!("fusion.mod{v}.w1"), d, mh, &mut rng);
            p.insert(format!("fusion.mod{v}.b1"), Array2::zeros(1, mh));
            p.insert_glorot(format!("fusion.mod{v}.w2"), mh, 1, &mut rng);
            p.insert(format!("fusion.mod{v}.b2"), Array2::zeros(1, 1));
            modulation.get_or_insert(s);
        }
        let head_w1 = p.insert_glorot("head.w1", d, d, &mut rng);
        let head_b1 = p.insert("head.b1", Array2::zeros(1, d));
        let bn_gamma = p.insert("head.bn.gamma", Array2::filled(1, d, T::one()));
        let bn_beta = p.insert("head.bn.beta", Array2::zeros(1, d));
        // zero final layer: the untrained model predicts exactly [0.5, 0.5]
        let head_w2 = p.insert("head.w2", Array2::zeros(d, 2));
        let head_b2 = p.insert("head.b2", Array2::zeros(1, 2));
        let slots = SlotsCell([
            input_w,
            input_b,
            label,
            cnhl.expect("layers >= 1"),
            fusion_g,
            fusion_p,
            modulation.expect("views >= 1"),
            head_w1,
            head_b1,
            bn_gamma,
            bn_beta,
            head_w2,
            head_b2,
        ]);
        Ok(MultiViewModel {
            config,
            params: p,
            running_mean: vec![T::zero(); d],
            running_var: vec![T::one(); d],
            slots_: slots,
        })
    }

    fn slots(&self) -> Slots {
        self.slots_.get()
    }

    /// Puts every parameter on the tape (as leaves when `learn`, else constants).
    pub fn place(&self, tape: &mut Tape<T>, learn: bool) -> Leaves {
        Leaves(
            self.params
                .iter()
                .map(|(_, a)| {
                    if learn {
                        tape.leaf(a.clone())
                    } else {
                        tape.constant(a.clone())
                    }
                })
                .collect(),
        )
    }

    fn projection(&self, leaves: &Leaves, view: usize, layer: usize) -> Var {
        let base = self.slots().cnhl;
        if self.config.share_weights {
            leaves.0[base + layer]
        } else {
            leaves.0[base + view * self.config.layers + layer]
        }
    }

    /// Initial node states: `normalize(x·W + b + label_embedding[y])`, with the
    /// embedding added only where `visible` carries a class.
    pub fn fuse_labels(
        &self,
        tape: &mut Tape<T>,
        leaves: &Leaves,
        features: Array2<T>,
        visible: &[Option<usize>],
    ) -> Result<Var> {
        let s = self.slots();
        if features.rows() != visible.len() {
            return Err(Error::dim("fuse_labels", "one visibility entry per row required"));
        }
        if features.cols() != self.config.input_dim {
            return Err(Error::dim(
                "fuse_labels",
                format!(
                    "{} feature columns, model expects {}",
                    features.cols(),
                    self.config.input_dim
                ),
            ));
        }
        let x = tape.constant(features);
        let proj = tape.matmul(x, leaves.0[s.input_w])?;
        let proj = tape.add_row(proj, leaves.0[s.input_b])?;
        let mut onehot = Array2::zeros(visible.len(), 2);
        for (i, v) in visible.iter().enumerate() {
            if let Some(c) = *v {
                onehot[(i, c)] = T::one();
            }
        }
        let onehot = tape.constant(onehot);
        let emb = tape.matmul(onehot, leaves.0[s.label])?;
        let sum = tape.add(proj, emb)?;
        tape.row_l2_normalize(sum)
    }

    /// Combines per-view target embeddings. Returns `(fused, weights)`.
    pub fn multi_view_fuse(&self, tape: &mut Tape<T>, leaves: &Leaves, per_view: &[Var]) -> Result<(Var, Var)> {
        let s = self.slots();
        let a = per_view.len();
        if a != self.config.n_views {
            return Err(Error::dim(
                "multi_view_fuse",
                format!("{a} views, model has {}", self.config.n_views),
            ));
        }
        let n = tape.value(per_view[0]).rows();
        let mut total = per_view[0];
        for &v in &per_view[1..] {
            total = tape.add(total, v)?;
        }
        match self.config.fusion {
            FusionMode::Mean => {
                let fused = tape.scalar_mul(total, T::one() / T::of_usize(a))?;
                let w = tape.constant(Array2::filled(n, a, T::one() / T::of_usize(a)));
                Ok((fused, w))
            }
            FusionMode::Attention => {
                let cat = tape.concat_cols(per_view)?;
                let cat = tape.relu(cat)?;
                let att = tape.matmul(cat, leaves.0[s.fusion_g])?;
                let att = tape.softmax_rows(att)?;
                let ctx = tape.matmul(total, leaves.0[s.fusion_p])?;
                let ctx = tape.tanh(ctx)?;
                let mut deltas = Vec::with_capacity(a);
                for v in 0..a {
                    let base = s.modulation + 4 * v;
                    let h = tape.matmul(ctx, leaves.0[base])?;
                    let h = tape.add_row(h, leaves.0[base + 1])?;
                    let h = tape.relu(h)?;
                    let o = tape.matmul(h, leaves.0[base + 2])?;
                    deltas.push(tape.add_row(o, leaves.0[base + 3])?);
                }
                let delta = tape.concat_cols(&deltas)?;
                let adjusted = tape.add(att, delta)?;
                let adjusted = tape.abs(adjusted)?;
                let weights = tape.row_normalize(adjusted)?;
                let mut fused = None;
                for (v, &pv) in per_view.iter().enumerate() {
                    let col = tape.slice_cols(weights, v, 1)?;
                    let term = tape.mul_col(pv, col)?;
                    fused = Some(match fused {
                        None => term,
                        Some(f) => tape.add(f, term)?,
                    });
                }
                Ok((fused.expect("at least one view"), weights))
            }
        }
    }

    /// Classifier head: linear, batch norm, relu, dropout, linear.
    /// Returns `(logits, batch_norm_node)`.
    pub fn classify(&self, tape: &mut Tape<T>, leaves: &Leaves, h: Var, mode: Mode) -> Result<(Var, Var)> {
        let s = self.slots();
        let z = tape.matmul(h, leaves.0[s.head_w1])?;
        let z = tape.add_row(z, leaves.0[s.head_b1])?;
        let stats = match mode {
            Mode::Train { .. } => NormStats::Batch,
            Mode::Eval => NormStats::Fixed {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            },
        };
        let bn = tape.batch_norm(
            z,
            leaves.0[s.bn_gamma],
            leaves.0[s.bn_beta],
            &stats,
            T::of(self.config.bn_eps),
        )?;
        let mut z = tape.relu(bn)?;
        if let Mode::Train { seed } = mode {
            let p = self.config.dropout;
            if p > 0.0 {
                let (r, c) = tape.value(z).shape();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = T::of(1.0 / (1.0 - p));
                let mask = (0..r * c)
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                    .collect();
                let mask = tape.constant(Array2::from_vec(r, c, mask)?);
                z = tape.mul(z, mask)?;
            }
        }
        let logits = tape.matmul(z, leaves.0[s.head_w2])?;
        let logits = tape.add_row(logits, leaves.0[s.head_b2])?;
        Ok((logits, bn))
    }

    /// Full forward pass over a batch graph.
    ///
    /// `features` holds the rows of `graph.nodes`; `visible` marks, per local
    /// node, the label embedding it may use.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        leaves: &Leaves,
        graph: &BatchGraph,
        features: Array2<T>,
        visible: &[Option<usize>],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if graph.views.len() != self.config.n_views {
            return Err(Error::dim(
                "forward",
                format!(
                    "{} views in graph, model has {}",
                    graph.views.len(),
                    self.config.n_views
                ),
            ));
        }
        if graph.targets.is_empty() {
            return Err(Error::Contract("forward pass without target nodes".into()));
        }
        let initial = self.fuse_labels(tape, leaves, features, visible)?;
        let beta = T::of(self.config.beta);
        let targets = Arc::new(graph.targets.clone());
        let mut layer_inputs = Vec::with_capacity(graph.views.len());
        let mut per_view = Vec::with_capacity(graph.views.len());
        for (v, index) in graph.views.iter().enumerate() {
            let mut h = initial;
            let mut inputs = Vec::with_capacity(self.config.layers);
            for l in 0..self.config.layers {
                inputs.push(h);
                let w = self.projection(leaves, v, l);
                h = cnhl_layer(tape, index, h, w, beta, self.config.weighting)?;
            }
            layer_inputs.push(inputs);
            per_view.push(tape.gather_rows(h, targets.clone())?);
        }
        let (fused, view_weights) = self.multi_view_fuse(tape, leaves, &per_view)?;
        let (logits, batch_norm) = self.classify(tape, leaves, fused, mode)?;
        Ok(ForwardOutput {
            logits,
            view_weights,
            fused,
            initial,
            layer_inputs,
            batch_norm,
        })
    }

    /// Moves running statistics toward the batch statistics of a train-mode pass.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, bn: Var) {
        let Some((mean, var)) = tape.norm_stats(bn) else { return };
        let n = tape.value(bn).rows();
        let m = T::of(self.config.bn_momentum);
        let unbias = if n > 1 {
            T::of_usize(n) / T::of_usize(n - 1)
        } else {
            T::one()
        };
        for l in 0..mean.len() {
            self.running_mean[l] = (T::one() - m) * self.running_mean[l] + m * mean[l];
            self.running_var[l] = (T::one() - m) * self.running_var[l] + m * var[l] * unbias;
        }
    }

    /// Parameters plus running statistics, for checkpoints.
    pub fn checkpoint(&self) -> ParamStore<T> {
        let mut p = self.params.clone();
        let d = self.running_mean.len();
        p.insert(
            "head.bn.running_mean",
            Array2::from_vec(1, d, self.running_mean.clone()).expect("1 x d"),
        );
        p.insert(
            "head.bn.running_var",
            Array2::from_vec(1, d, self.running_var.clone()).expect("1 x d"),
        );
        p
    }

    /// Restores a checkpoint written by [`MultiViewModel::checkpoint`].
    pub fn restore(&mut self, ckpt: &ParamStore<T>) -> Result<()> {
        let missing = |n: &str| Error::Config(format!("checkpoint lacks {n}"));
        let mut learnable = ParamStore::new();
        for (name, a) in ckpt.iter() {
            if !name.starts_with("head.bn.running_") {
                learnable.insert(name, a.clone());
            }
        }
        self.params.assign_from(&learnable)?;
        self.running_mean = ckpt
            .by_name("head.bn.running_mean")
            .ok_or_else(|| missing("head.bn.running_mean"))?
            .data()
            .to_vec();
        self.running_var = ckpt
            .by_name("head.bn.running_var")
            .ok_or_else(|| missing("head.bn.running_var"))?
            .data()
            .to_vec();
        Ok(())
    }
}
