//! Data preparation, the mini-batch training loop, scoring, and run artefacts.

use crate::discrepancy::{
    enhance_features, passthrough, train_aux_risk_model, DiscrepancyOptions, Divergence, EnhancedFeatureMatrix,
    RiskConfig, RiskModel,
};
use crate::engine::{AdamConfig, AdamState, Array2, SenderWeighting, Tape};
use crate::error::{Error, Result};
use crate::eval;
use crate::hypergraph::{build_view, HypergraphView, WindowPolicy};
use crate::ingest::{chronological_split, encode_features, Label, SplitIndex, Standardizer, TransactionTable};
use crate::model::{BatchGraph, FusionMode, Mode, ModelConfig, MultiViewModel};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub views: usize,
    pub layers: usize,
    pub window: usize,
    pub beta: f64,
    pub dropout: f64,
    pub seed: u64,
    pub split: (f64, f64, f64),
    /// Base features only, no discrepancy columns.
    pub no_hcdp: bool,
    /// Uniform sender weights instead of novelty weights.
    pub no_cnhl: bool,
    /// Plain mean over views instead of attention fusion.
    pub no_mhf: bool,
    pub strict_window: bool,
    pub js_standard: bool,
    pub share_weights: bool,
    pub risk_hidden: usize,
    pub risk_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 50,
            batch_size: 512,
            hidden: 256,
            views: 4,
            layers: 3,
            window: 4,
            beta: 1.0,
            dropout: 0.2,
            seed: 0,
            split: (0.6, 0.1, 0.3),
            no_hcdp: false,
            no_cnhl: false,
            no_mhf: false,
            strict_window: false,
            js_standard: false,
            share_weights: false,
            risk_hidden: 64,
            risk_epochs: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.views == 0 || self.layers == 0 || self.risk_hidden == 0 {
            return bad("batch, hidden, views, layers and risk hidden must be positive".into());
        }
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!(
                "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
            ));
        }
        if !self.no_hcdp && self.views < 2 {
            return bad("discrepancy features need at least two views (or disable them)".into());
        }
        Ok(())
    }

    pub fn window_policy(&self) -> WindowPolicy {
        if self.strict_window {
            WindowPolicy::Strict
        } else {
            WindowPolicy::KeepUndersized
        }
    }

    pub fn discrepancy_options(&self) -> DiscrepancyOptions {
        DiscrepancyOptions {
            divergence: if self.js_standard {
                Divergence::Standard
            } else {
                Divergence::MidpointFirst
            },
            ..DiscrepancyOptions::default()
        }
    }

    pub fn risk_config(&self) -> RiskConfig {
        RiskConfig {
            hidden: self.risk_hidden,
            epochs: self.risk_epochs,
            batch_size: self.batch_size,
            adam: self.adam(),
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        let mut m = ModelConfig::new(input_dim, self.hidden, self.layers, self.views);
        m.beta = self.beta;
        m.dropout = self.dropout;
        m.share_weights = self.share_weights;
        if self.no_cnhl {
            m.weighting = SenderWeighting::Uniform;
        }
        if self.no_mhf {
            m.fusion = FusionMode::Mean;
        }
        m
    }
}

/// Everything derived from a table before the main model sees it.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub split: SplitIndex,
    pub standardizer: Standardizer,
    pub labels: Vec<Label>,
    pub views: Vec<HypergraphView>,
    /// `None` when discrepancy features are disabled.
    pub risk: Option<RiskModel<T>>,
    pub features: EnhancedFeatureMatrix<T>,
}

/// Split, standardise, build the first `config.views` hypergraphs and compute
/// discrepancy features. A supplied `risk` model is reused instead of refitted.
pub fn prepare<T: Scalar>(
    table: &TransactionTable,
    config: &TrainConfig,
    risk: Option<RiskModel<T>>,
) -> Result<Prepared<T>> {
    config.validate()?;
    if table.view_keys().len() < config.views {
        return Err(Error::Config(format!(
            "{} views requested but the table declares {}",
            config.views,
            table.view_keys().len()
        )));
    }
    let split = chronological_split(table.len(), config.split)?;
    let (base, standardizer) = encode_features::<T>(table, &split.train);
    let views = table.view_keys()[..config.views]
        .iter()
        .map(|k| build_view(table, k, config.window, config.window_policy()))
        .collect::<Result<Vec<_>>>()?;
    let labels = table.labels();
    let (risk, features) = if config.no_hcdp {
        (None, passthrough(&base))
    } else {
        let risk = match risk {
            Some(r) => r,
            None => train_aux_risk_model(&base, &labels, &split.train, &config.risk_config())?,
        };
        let scores = risk.predict(&base)?;
        let f = enhance_features(&views, &base, &scores, &config.discrepancy_options())?;
        (Some(risk), f)
    };
    Ok(Prepared {
        split,
        standardizer,
        labels,
        views,
        risk,
        features,
    })
}

/// Mean cross-entropy of `batch x 2` logits against class labels.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, logits: crate::engine::Var, labels: &[usize]) -> Result<crate::engine::Var> {
    tape.cross_entropy_with_logits(logits, Arc::new(labels.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `None` when the validation split lacks one of the classes.
    pub val_auc: Option<f64>,
    pub val_ap: Option<f64>,
    pub val_f1: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// `epoch,loss,val_auc,val_ap,val_f1`; wall time is left out so reruns compare equal.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "val_auc", "val_ap", "val_f1"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                opt(e.val_auc),
                opt(e.val_ap),
                opt(e.val_f1),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model at the epoch with the best validation AUC (or the last one if
    /// validation AUC was never defined).
    pub best: MultiViewModel<T>,
    pub last: MultiViewModel<T>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Labels visible to label fusion: classes of labelled training rows only.
pub fn training_visibility(labels: &[Label], split: &SplitIndex) -> Vec<Option<usize>> {
    let mut visible = vec![None; labels.len()];
    for &i in &split.train {
        visible[i] = labels[i].class();
    }
    visible
}

/// Features of the graph's nodes and their visible labels, with the targets' own labels hidden.
pub fn batch_inputs<T: Scalar>(
    graph: &BatchGraph,
    features: &Array2<T>,
    visible: &[Option<usize>],
) -> (Array2<T>, Vec<Option<usize>>) {
    let x = features.select_rows(&graph.nodes);
    let mut vis: Vec<Option<usize>> = graph.nodes.iter().map(|&g| visible[g]).collect();
    for &t in &graph.targets {
        vis[t] = None;
    }
    (x, vis)
}

/// Per-target outputs of an eval-mode pass.
#[derive(Debug, Clone)]
pub struct Scored<T> {
    /// Fraud-class probability per target.
    pub scores: Vec<T>,
    /// Fused embedding rows, `targets x hidden`.
    pub embeddings: Array2<T>,
    /// Fusion weights, `targets x views`.
    pub view_weights: Array2<T>,
}

/// Eval-mode scores for `targets`, processed in chunks of `chunk`. Each
/// chunk runs on its hop closure with the chunk's own labels hidden.
pub fn score_nodes<T: Scalar>(
    model: &MultiViewModel<T>,
    views: &[HypergraphView],
    features: &Array2<T>,
    visible: &[Option<usize>],
    targets: &[usize],
    chunk: usize,
) -> Result<Scored<T>> {
    let d = model.config.hidden;
    let a = model.config.n_views;
    let mut scores = Vec::with_capacity(targets.len());
    let mut emb = Vec::with_capacity(targets.len() * d);
    let mut weights = Vec::with_capacity(targets.len() * a);
    for part in targets.chunks(chunk.max(1)) {
        let graph = BatchGraph::closure(views, part, model.config.layers);
        let (x, vis) = batch_inputs(&graph, features, visible);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape, false);
        let out = model.forward(&mut tape, &leaves, &graph, x, &vis, Mode::Eval)?;
        let p = tape.softmax_rows(out.logits)?;
        let p = tape.value(p);
        scores.extend((0..p.rows()).map(|i| p[(i, 1)]));
        emb.extend_from_slice(tape.value(out.fused).data());
        weights.extend_from_slice(tape.value(out.view_weights).data());
    }
    Ok(Scored {
        scores,
        embeddings: Array2::from_vec(targets.len(), d, emb)?,
        view_weights: Array2::from_vec(targets.len(), a, weights)?,
    })
}

/// Labelled rows among `rows`, with their 0/1 labels.
pub fn labelled(rows: &[usize], labels: &[Label]) -> (Vec<usize>, Vec<u8>) {
    rows.iter()
        .filter_map(|&i| labels[i].class().map(|c| (i, c as u8)))
        .unzip()
}

/// Metrics of `model` on the labelled rows of `rows`.
pub fn evaluate_rows<T: Scalar>(
    model: &MultiViewModel<T>,
    prepared: &Prepared<T>,
    rows: &[usize],
    chunk: usize,
    sweep: bool,
) -> Result<eval::MetricsReport> {
    let (targets, y) = labelled(rows, &prepared.labels);
    if targets.is_empty() {
        return Err(Error::Metric("no labelled rows to evaluate".into()));
    }
    let visible = training_visibility(&prepared.labels, &prepared.split);
    let s = score_nodes(
        model,
        &prepared.views,
        &prepared.features.enhanced,
        &visible,
        &targets,
        chunk,
    )?;
    eval::evaluate(&s.scores, &y, sweep)
}

fn validation_metrics<T: Scalar>(
    model: &MultiViewModel<T>,
    prepared: &Prepared<T>,
    visible: &[Option<usize>],
    chunk: usize,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let (targets, y) = labelled(&prepared.split.val, &prepared.labels);
    let pos = y.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == y.len() {
        return Ok((None, None, None));
    }
    let s = score_nodes(
        model,
        &prepared.views,
        &prepared.features.enhanced,
        visible,
        &targets,
        chunk,
    )?;
    Ok((
        Some(eval::auc(&s.scores, &y)?),
        Some(eval::average_precision(&s.scores, &y)?),
        Some(eval::macro_f1(&s.scores, &y, eval::DEFAULT_THRESHOLD)?),
    ))
}

/// Mini-batch training over the labelled training rows.
///
/// Each batch runs on the hop closure of its targets; targets never see
/// their own label embedding. The model with the best validation AUC is kept
/// alongside the last one.
pub fn train<T: Scalar>(config: &TrainConfig, prepared: &Prepared<T>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (mut pool, ys) = labelled(&prepared.split.train, &prepared.labels);
    let n_fraud = ys.iter().filter(|&&l| l == 1).count();
    if n_fraud == 0 || n_fraud == ys.len() {
        return Err(Error::Training(format!(
            "training split needs both classes ({n_fraud} fraud of {} labelled)",
            ys.len()
        )));
    }
    let features = &prepared.features.enhanced;
    let visible = training_visibility(&prepared.labels, &prepared.split);
    let mut model = MultiViewModel::<T>::new(config.model_config(features.cols()), config.seed)?;
    let mut adam = AdamState::new(config.adam(), &model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        pool.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in pool.chunks(config.batch_size).enumerate() {
            let graph = BatchGraph::closure(&prepared.views, batch, config.layers);
            let (x, vis) = batch_inputs(&graph, features, &visible);
            let y: Vec<usize> = batch
                .iter()
                .map(|&i| prepared.labels[i].class().expect("labelled"))
                .collect();
            let at = |e: Error| match e {
                Error::Numeric { op, detail } => Error::Numeric {
                    op,
                    detail: format!("{detail} (epoch {epoch}, batch {})", b + 1),
                },
                other => other,
            };
            let mut tape = Tape::new();
            let leaves = model.place(&mut tape, true);
            let out = model
                .forward(
                    &mut tape,
                    &leaves,
                    &graph,
                    x,
                    &vis,
                    Mode::Train {
                        seed: dropout_rng.random(),
                    },
                )
                .map_err(at)?;
            let l = loss(&mut tape, out.logits, &y).map_err(at)?;
            let lv = tape.value(l).item().to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    op: "loss".into(),
                    detail: format!("non-finite loss at epoch {epoch}, batch {}", b + 1),
                });
            }
            let g = tape.backward(l).map_err(at)?;
            let grads: Vec<Array2<T>> = leaves.0.iter().map(|&v| g.get(v)).collect();
            adam.step(&mut model.params, &grads)?;
            model.update_running_stats(&tape, out.batch_norm);
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let (val_auc, val_ap, val_f1) = validation_metrics(&model, prepared, &visible, config.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            val_auc,
            val_ap,
            val_f1,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        match val_auc {
            Some(v) if v > best_auc => {
                best_auc = v;
                best = model.clone();
                best_epoch = epoch;
            }
            None if best_auc == f64::NEG_INFINITY => {
                best = model.clone();
                best_epoch = epoch;
            }
            _ => {}
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        history,
    })
}

/// Hex SHA-256 of a byte stream.
pub fn sha256_hex<R: std::io::Read>(mut r: R) -> Result<String> {
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = r.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    sha256_hex(std::fs::File::open(path)?)
}

/// Provenance record written next to every command's artefacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 of each input file, in argument order.
    pub input_hashes: Vec<(String, String)>,
    pub tool_version: String,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes `id,<hidden columns>` rows of fused embeddings.
pub fn write_embeddings<T: Scalar>(path: &Path, ids: &[usize], embeddings: &Array2<T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..embeddings.cols()).map(|i| format!("h{i}")));
    w.write_record(&header)?;
    for (k, &id) in ids.iter().enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(embeddings.row(k).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
