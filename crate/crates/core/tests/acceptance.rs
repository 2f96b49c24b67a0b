//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gated line fails.

// worked values such as 0.693147 are pinned to six decimals on purpose
#![allow(clippy::approx_constant, clippy::type_complexity)]

use hyperfraud::discrepancy::{
    feat_diff, id_diff, jaccard_distance, label_entropy, train_aux_risk_model, DiscrepancyOptions, Divergence,
    RiskConfig,
};
use hyperfraud::engine::hyper::edge_state;
use hyperfraud::engine::{check_tape_fn, Array2, HyperedgeIndex, NormStats, SenderWeighting, Tape, Var};
use hyperfraud::eval::{auc, average_precision, evaluate, macro_f1};
use hyperfraud::hypergraph::{build_view, HypergraphView, WindowPolicy};
use hyperfraud::ingest::{encode_features, Label, Standardizer, TransactionRecord, TransactionTable};
use hyperfraud::model::{
    cnhl_layer, cnhl_layer_composed, edge_states, BatchGraph, Leaves, Mode, ModelConfig, MultiViewModel,
};
use hyperfraud::synth::{generate, SynthConfig};
use hyperfraud::training::{
    batch_inputs, evaluate_rows, labelled, loss, prepare, train, training_visibility, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Instant;

#[derive(Default)]
struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, what: &str, pass: bool, detail: String) {
        println!("{} [{id}] {what}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_array(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Array2::from_vec(rows, cols, data).unwrap()
}

/// Random table with tied timestamps and small category alphabets.
fn random_table(r: &mut ChaCha8Rng, n: usize, views: usize) -> TransactionTable {
    let alphabet: Vec<usize> = (0..views).map(|_| r.random_range(1..=8)).collect();
    let rows = (0..n)
        .map(|i| TransactionRecord {
            id: i,
            external_id: i.to_string(),
            timestamp: r.random_range(0..(n as i64 / 2 + 1)),
            categories: alphabet.iter().map(|&k| format!("c{}", r.random_range(0..k))).collect(),
            features: vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            label: match r.random_range(0..3) {
                0 => Label::Fraud,
                1 => Label::Legit,
                _ => Label::Unlabeled,
            },
        })
        .collect();
    TransactionTable::new(
        rows,
        vec!["a".into(), "b".into()],
        (0..views).map(|v| format!("k{v}")).collect(),
    )
    .unwrap()
}

/// Windows found by scanning forward from every node for the next `w - 1`
/// nodes of the same category.
fn brute_force_windows(table: &TransactionTable, view: usize, w: usize, policy: WindowPolicy) -> BTreeSet<Vec<usize>> {
    let rows = table.rows();
    let mut out = BTreeSet::new();
    let mut sizes = std::collections::HashMap::<&str, Vec<usize>>::new();
    for (i, r) in rows.iter().enumerate() {
        sizes.entry(r.categories[view].as_str()).or_default().push(i);
        let mut members = vec![i];
        for (j, other) in rows.iter().enumerate().skip(i + 1) {
            if members.len() == w {
                break;
            }
            if other.categories[view] == r.categories[view] {
                members.push(j);
            }
        }
        if members.len() == w {
            out.insert(members);
        }
    }
    if policy == WindowPolicy::KeepUndersized {
        for members in sizes.into_values() {
            if members.len() >= 2 && members.len() < w {
                out.insert(members);
            }
        }
    }
    out
}

fn criterion_1(rep: &mut Report) {
    let started = Instant::now();
    let mut r = rng(1);
    let mut mismatches = 0;
    let mut edges = 0;
    for case in 0..100 {
        let n = r.random_range(1..=200);
        let views = r.random_range(1..=4);
        let w = r.random_range(2..=4);
        let policy = if case % 4 == 3 {
            WindowPolicy::Strict
        } else {
            WindowPolicy::KeepUndersized
        };
        let table = random_table(&mut r, n, views);
        for v in 0..views {
            let built = build_view(&table, &format!("k{v}"), w, policy).unwrap();
            let got: Vec<Vec<usize>> = built.hyperedges.clone();
            let got_set: BTreeSet<Vec<usize>> = got.iter().cloned().collect();
            let want = brute_force_windows(&table, v, w, policy);
            edges += got.len();
            if got_set != want || got_set.len() != got.len() {
                mismatches += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    rep.line(
        "1",
        "hypergraph oracle equivalence",
        mismatches == 0 && secs < 10.0,
        format!("100 tables, {edges} hyperedges, {mismatches} mismatching views, {secs:.2}s (limit 10s)"),
    );
}

fn oracle_neighbors(view: &HypergraphView, node: usize) -> HashSet<usize> {
    view.hyperedges
        .iter()
        .filter(|e| e.contains(&node))
        .flat_map(|e| e.iter().copied())
        .filter(|&u| u != node)
        .collect()
}

fn oracle_jaccard(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(b).count() as f64 / union as f64
}

fn oracle_js(p: &[f64], q: &[f64], standard: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        total += if standard {
            0.5 * p[i] * (p[i] / m).ln() + 0.5 * q[i] * (q[i] / m).ln()
        } else {
            0.5 * m * (m / p[i]).ln() + 0.5 * m * (m / q[i]).ln()
        };
    }
    total
}

fn random_distribution(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0f64).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn criterion_2(rep: &mut Report) {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut count = 0;
    let opts = DiscrepancyOptions::default();
    let mut table = random_table(&mut r, 60, 2);
    let mut views = Vec::new();
    let mut risk = Array2::zeros(0, 2);
    for i in 0..1000 {
        if i % 50 == 0 {
            let n = r.random_range(5..80);
            table = random_table(&mut r, n, 2);
            let w = r.random_range(2..=4);
            views = ["k0", "k1"]
                .iter()
                .map(|k| build_view(&table, k, w, WindowPolicy::KeepUndersized).unwrap())
                .collect();
            let data = (0..n).flat_map(|_| random_distribution(&mut r, 2)).collect();
            risk = Array2::from_vec(n, 2, data).unwrap();
        }
        let node = r.random_range(0..table.len());
        let (n1, n2) = (oracle_neighbors(&views[0], node), oracle_neighbors(&views[1], node));
        worst = worst.max((id_diff::<f64>(&views[0], &views[1], node).unwrap() - oracle_jaccard(&n1, &n2)).abs());

        let k = r.random_range(2..10);
        let (p, q) = (random_distribution(&mut r, k), random_distribution(&mut r, k));
        worst = worst.max((feat_diff(&p, &q, Divergence::MidpointFirst).unwrap() - oracle_js(&p, &q, false)).abs());
        worst = worst.max((feat_diff(&p, &q, Divergence::Standard).unwrap() - oracle_js(&p, &q, true)).abs());

        let nb: Vec<usize> = if n1.is_empty() {
            vec![node]
        } else {
            n1.into_iter().collect()
        };
        let mut mean = [0.0; 2];
        for &j in &nb {
            mean[0] += risk[(j, 0)] / nb.len() as f64;
            mean[1] += risk[(j, 1)] / nb.len() as f64;
        }
        let want: f64 = -mean.iter().map(|&v| v * (v + 1e-8).ln()).sum::<f64>();
        worst = worst.max((label_entropy(&views[0], node, &risk, &opts).unwrap() - want).abs());
        count += 1;
    }
    let a: HashSet<usize> = [1, 2, 3].into();
    let b: HashSet<usize> = [2, 3, 4].into();
    let jac = jaccard_distance(&[1, 2, 3], &[2, 3, 4]);
    let js: f64 = feat_diff(&[0.8, 0.2], &[0.2, 0.8], Divergence::MidpointFirst).unwrap();
    let ent: f64 = hyperfraud::discrepancy::entropy(&[0.5, 0.5], 1e-8);
    let worked = (jac - 0.5).abs() <= 1e-6
        && (oracle_jaccard(&a, &b) - 0.5).abs() <= 1e-6
        && (js - 0.223144).abs() <= 1e-6
        && (ent - 0.693147).abs() <= 1e-6;
    rep.line(
        "2",
        "discrepancy oracles",
        worst <= 1e-9 && worked,
        format!(
            "{count} random inputs, max |diff| {worst:.3e} (limit 1e-9); jaccard {jac}, divergence {js:.6}, entropy {ent:.6} (limit 1e-6)"
        ),
    );
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> hyperfraud::Result<Var>>;

/// Weighted sum with a fixed random matrix, so every output entry matters.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> hyperfraud::Result<Var> {
    let (rows, cols) = t.value(y).shape();
    let w = t.constant(random_array(&mut rng(seed), rows, cols, 1.0));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Array2<f64>>, Build)> {
    let mut r = rng(3);
    let a = random_array(&mut r, 4, 3, 1.0);
    let b = random_array(&mut r, 3, 5, 1.0);
    let c = random_array(&mut r, 4, 3, 1.0);
    let row = random_array(&mut r, 1, 3, 1.0);
    let col = random_array(&mut r, 4, 1, 1.0);
    let pos = a.map(|v| v.abs() + 0.5);
    let away = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let seg = Arc::new(vec![0, 2, 0, 1]);
    let idx = Arc::new(vec![3, 0, 0, 2, 1]);
    let labels = Arc::new(vec![1, 0, 1, 1]);
    let edges = Arc::new(HyperedgeIndex::new(5, &[vec![0, 1, 2], vec![2, 3], vec![1, 3, 4, 0]]));
    let h5 = random_array(&mut r, 5, 3, 1.0);
    let v5 = random_array(&mut r, 5, 3, 1.0);
    let gamma = random_array(&mut r, 1, 3, 1.0);
    let fixed = NormStats::Fixed {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 0.8],
    };
    let e2 = edges.clone();
    let e3 = edges.clone();
    let unary = |f: fn(&mut Tape<f64>, Var) -> hyperfraud::Result<Var>, s: u64| -> Build {
        Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y, s)
        })
    };
    vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 10)
            }),
        ),
        (
            "add",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 11)
            }),
        ),
        (
            "sub",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 12)
            }),
        ),
        (
            "mul",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 13)
            }),
        ),
        (
            "scalar_mul",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.scalar_mul(v[0], -1.7)?;
                project(t, y, 14)
            }),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, 15)
            }),
        ),
        (
            "mul_col",
            vec![a.clone(), col.clone()],
            Box::new(|t, v| {
                let y = t.mul_col(v[0], v[1])?;
                project(t, y, 16)
            }),
        ),
        (
            "concat_cols",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                project(t, y, 17)
            }),
        ),
        (
            "slice_cols",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.slice_cols(v[0], 1, 2)?;
                project(t, y, 18)
            }),
        ),
        ("row_sum", vec![a.clone()], unary(|t, x| t.row_sum(x), 19)),
        ("row_mean", vec![a.clone()], unary(|t, x| t.row_mean(x), 20)),
        ("row_var", vec![a.clone()], unary(|t, x| t.row_var(x), 21)),
        (
            "sum",
            vec![a.clone()],
            unary(
                |t, x| {
                    let y = t.square(x)?;
                    t.sum(y)
                },
                22,
            ),
        ),
        (
            "mean",
            vec![a.clone()],
            unary(
                |t, x| {
                    let y = t.square(x)?;
                    t.mean(y)
                },
                23,
            ),
        ),
        ("segment_sum", vec![a.clone()], {
            let s = seg.clone();
            Box::new(move |t, v| {
                let y = t.segment_sum(v[0], s.clone(), 3)?;
                project(t, y, 24)
            })
        }),
        ("segment_mean", vec![a.clone()], {
            let s = seg.clone();
            Box::new(move |t, v| {
                let y = t.segment_mean(v[0], s.clone(), 3)?;
                project(t, y, 25)
            })
        }),
        ("softmax_rows", vec![a.clone()], unary(|t, x| t.softmax_rows(x), 26)),
        ("segment_softmax", vec![col.clone()], {
            let s = seg.clone();
            Box::new(move |t, v| {
                let y = t.segment_softmax(v[0], s.clone(), 3)?;
                project(t, y, 27)
            })
        }),
        ("sigmoid", vec![a.clone()], unary(|t, x| t.sigmoid(x), 28)),
        ("tanh", vec![a.clone()], unary(|t, x| t.tanh(x), 29)),
        ("relu", vec![away.clone()], unary(|t, x| t.relu(x), 30)),
        ("exp", vec![a.clone()], unary(|t, x| t.exp(x), 31)),
        ("log", vec![pos.clone()], unary(|t, x| t.log(x), 32)),
        ("square", vec![a.clone()], unary(|t, x| t.square(x), 33)),
        ("abs", vec![away.clone()], unary(|t, x| t.abs(x), 34)),
        ("gather_rows", vec![h5.clone()], {
            let i = idx.clone();
            Box::new(move |t, v| {
                let y = t.gather_rows(v[0], i.clone())?;
                project(t, y, 35)
            })
        }),
        ("cross_entropy", vec![random_array(&mut r, 4, 2, 2.0)], {
            let l = labels.clone();
            Box::new(move |t, v| t.cross_entropy_with_logits(v[0], l.clone()))
        }),
        (
            "row_l2_normalize",
            vec![a.clone()],
            unary(|t, x| t.row_l2_normalize(x), 36),
        ),
        ("row_normalize", vec![pos.clone()], unary(|t, x| t.row_normalize(x), 37)),
        (
            "batch_norm (batch)",
            vec![a.clone(), gamma.clone(), row.clone()],
            Box::new(|t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], &NormStats::Batch, 1e-5)?;
                project(t, y, 38)
            }),
        ),
        (
            "batch_norm (fixed)",
            vec![a.clone(), gamma.clone(), row.clone()],
            Box::new(move |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], &fixed, 1e-5)?;
                project(t, y, 39)
            }),
        ),
        (
            "hyper_aggregate (novelty)",
            vec![h5.clone(), v5.clone()],
            Box::new(move |t, v| {
                let y = t.hyper_aggregate(v[0], v[1], e2.clone(), 1.3, SenderWeighting::Novelty)?;
                project(t, y, 40)
            }),
        ),
        (
            "hyper_aggregate (uniform)",
            vec![h5.clone(), v5.clone()],
            Box::new(move |t, v| {
                let y = t.hyper_aggregate(v[0], v[1], e3.clone(), 1.0, SenderWeighting::Uniform)?;
                project(t, y, 41)
            }),
        ),
    ]
}

/// 12 nodes, 2 views, window 2, one layer, hidden 3, every parameter randomised.
fn toy_instance() -> (
    MultiViewModel<f64>,
    BatchGraph,
    Array2<f64>,
    Vec<Option<usize>>,
    Vec<usize>,
) {
    let mut r = rng(4);
    let rows = (0..12)
        .map(|i| TransactionRecord {
            id: i,
            external_id: i.to_string(),
            timestamp: i as i64,
            categories: vec![format!("a{}", i % 3), format!("b{}", (i * 7) % 4)],
            features: vec![0.0],
            label: Label::Legit,
        })
        .collect();
    let table = TransactionTable::new(rows, vec!["x".into()], vec!["k0".into(), "k1".into()]).unwrap();
    let views: Vec<_> = ["k0", "k1"]
        .iter()
        .map(|k| build_view(&table, k, 2, WindowPolicy::KeepUndersized).unwrap())
        .collect();
    let targets = vec![0, 3, 5, 8, 11];
    let graph = BatchGraph::full(&views, &targets);
    let mut cfg = ModelConfig::new(4, 3, 1, 2);
    cfg.dropout = 0.0;
    let mut model = MultiViewModel::<f64>::new(cfg, 9).unwrap();
    for slot in 0..model.params.len() {
        let (a, b) = model.params.get(slot).shape();
        *model.params.get_mut(slot) = random_array(&mut r, a, b, 0.8);
    }
    model.running_mean = vec![0.1, -0.1, 0.2];
    model.running_var = vec![0.7, 1.3, 0.9];
    let x = random_array(&mut r, 12, 4, 1.0);
    let mut visible = vec![None; 12];
    visible[1] = Some(1);
    visible[4] = Some(0);
    visible[6] = Some(1);
    (model, graph, x, visible, vec![1, 0, 0, 1, 0])
}

fn criterion_3(rep: &mut Report) {
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut details = Vec::new();
    for (name, params, build) in primitive_cases() {
        let g = check_tape_fn(&params, build).unwrap();
        if g.max_rel_error > worst {
            worst = g.max_rel_error;
            worst_name = name;
        }
        if !g.passes(1e-6) {
            details.push(format!("{name} {:.2e}", g.max_rel_error));
        }
    }
    let (model, graph, x, visible, y) = toy_instance();
    let full = check_tape_fn(
        &model.params.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>(),
        |t, leaves| {
            let out = model.forward(t, &Leaves(leaves.to_vec()), &graph, x.clone(), &visible, Mode::Eval)?;
            loss(t, out.logits, &y)
        },
    )
    .unwrap();
    rep.line(
        "3",
        "gradient integrity",
        details.is_empty() && full.passes(1e-4),
        format!(
            "{} primitives, worst {worst:.2e} ({worst_name}) (limit 1e-6){}; full loss {:.2e} over {} coordinates (limit 1e-4)",
            primitive_cases().len(),
            if details.is_empty() { String::new() } else { format!(", failing: {}", details.join(", ")) },
            full.max_rel_error,
            full.coordinates
        ),
    );

    // the fused layer kernel against the same layer built from primitives
    let mut r = rng(5);
    let index = HyperedgeIndex::new(9, &[vec![0, 1, 2, 3], vec![2, 4, 5], vec![5, 6, 7, 8], vec![1, 8]]);
    let arc = Arc::new(index.clone());
    let h0 = random_array(&mut r, 9, 4, 1.0);
    let w0 = random_array(&mut r, 4, 4, 1.0);
    let probe = random_array(&mut r, 9, 4, 1.0);
    let mut worst_v = 0.0f64;
    let mut worst_g = 0.0f64;
    for weighting in [SenderWeighting::Novelty, SenderWeighting::Uniform] {
        let run = |fused: bool| {
            let mut t = Tape::new();
            let h = t.leaf(h0.clone());
            let w = t.leaf(w0.clone());
            let out = if fused {
                cnhl_layer(&mut t, &arc, h, w, 0.7, weighting).unwrap()
            } else {
                cnhl_layer_composed(&mut t, &index, h, w, 0.7, weighting).unwrap()
            };
            let p = t.constant(probe.clone());
            let prod = t.mul(out, p).unwrap();
            let l = t.sum(prod).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(out).clone(), g.get(h), g.get(w))
        };
        let (a, b) = (run(true), run(false));
        worst_v = worst_v.max(a.0.max_abs_diff(&b.0));
        worst_g = worst_g.max(a.1.max_abs_diff(&b.1)).max(a.2.max_abs_diff(&b.2));
    }
    rep.line(
        "3.dual",
        "fused layer kernel matches composed reference",
        worst_v <= 1e-12 && worst_g <= 1e-10,
        format!("values {worst_v:.2e} (limit 1e-12), gradients {worst_g:.2e} (limit 1e-10)"),
    );
}

#[derive(Default)]
struct Structural {
    passes: usize,
    worst_gate: f64,
    worst_alpha: f64,
    worst_weight_sum: f64,
    negative_weights: usize,
}

impl Structural {
    fn observe(
        &mut self,
        model: &MultiViewModel<f64>,
        t: &Tape<f64>,
        graph: &BatchGraph,
        out: &hyperfraud::model::ForwardOutput,
    ) {
        self.passes += 1;
        let beta = model.config.beta;
        for (v, inputs) in out.layer_inputs.iter().enumerate() {
            for &h in inputs {
                for st in edge_states(&graph.views[v], t.value(h), beta, model.config.weighting) {
                    self.worst_gate = self.worst_gate.max((st.gate.iter().sum::<f64>() - 1.0).abs());
                    if st.gate.iter().any(|&g| g <= 0.0) {
                        self.worst_gate = f64::INFINITY;
                    }
                    if st.weights.len() >= 2 {
                        for row in &st.weights {
                            self.worst_alpha = self.worst_alpha.max((row.iter().sum::<f64>() - 1.0).abs());
                        }
                    }
                }
            }
        }
        let w = t.value(out.view_weights);
        for i in 0..w.rows() {
            self.negative_weights += w.row(i).iter().filter(|&&x| x < 0.0).count();
            self.worst_weight_sum = self.worst_weight_sum.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
}

fn criterion_4(rep: &mut Report) {
    let mut st = Structural::default();
    let mut r = rng(6);
    for case in 0..12 {
        let n = r.random_range(20..80);
        let views = 2 + case % 3;
        let table = random_table(&mut r, n, views);
        let vs: Vec<_> = (0..views)
            .map(|v| build_view(&table, &format!("k{v}"), 2 + case % 3, WindowPolicy::KeepUndersized).unwrap())
            .collect();
        let targets: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let graph = BatchGraph::closure(&vs, &targets, 2);
        let mut cfg = ModelConfig::new(3, 8, 2, views);
        cfg.beta = [0.5, 1.0, 2.0][case % 3];
        let model = MultiViewModel::<f64>::new(cfg, case as u64).unwrap();
        let mut t = Tape::new();
        let leaves = model.place(&mut t, false);
        let x = random_array(&mut r, graph.n_local(), 3, 2.0);
        let vis: Vec<Option<usize>> = (0..graph.n_local())
            .map(|i| if i % 4 == 1 { Some(i % 2) } else { None })
            .collect();
        let mode = if case % 2 == 0 {
            Mode::Eval
        } else {
            Mode::Train { seed: case as u64 }
        };
        let out = model.forward(&mut t, &leaves, &graph, x, &vis, mode).unwrap();
        st.observe(&model, &t, &graph, &out);
    }
    let (model, graph, x, visible, _) = toy_instance();
    let mut t = Tape::new();
    let leaves = model.place(&mut t, false);
    let out = model.forward(&mut t, &leaves, &graph, x, &visible, Mode::Eval).unwrap();
    st.observe(&model, &t, &graph, &out);

    // identical members: zero novelty, uniform sender weights, output sigmoid(0)
    let index = Arc::new(HyperedgeIndex::new(7, &[vec![0, 1, 2, 3], vec![4, 5, 6]]));
    let mut h = Array2::zeros(7, 3);
    for i in 0..4 {
        h.row_mut(i).copy_from_slice(&[0.3, -0.2, 0.9]);
    }
    let mut fixed_point = edge_states(&index, &h, 1.0, SenderWeighting::Novelty).iter().all(|s| {
        let k = s.novelty.len();
        s.novelty.iter().all(|&v| v == 0.0)
            && s.weights.iter().enumerate().all(|(i, row)| {
                row.iter()
                    .enumerate()
                    .all(|(j, &a)| a == if i == j { 0.0 } else { 1.0 / (k - 1) as f64 })
            })
    });
    let mut t = Tape::new();
    let hv = t.constant(Array2::zeros(7, 3));
    let w = t.constant(Array2::identity(3));
    let o = cnhl_layer(&mut t, &index, hv, w, 1.0, SenderWeighting::Novelty).unwrap();
    fixed_point &= t.value(o).data().iter().all(|&v| v == 0.5);

    // Var = ((b - a) / 2)^2 has its unique maximum at dimension 1
    let (a, b) = ([0.0, 0.0, 0.0], [0.2, 1.0, 0.4]);
    let g: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&beta| edge_state(&[&a[..], &b[..]], beta, SenderWeighting::Novelty).gate[1])
        .collect();
    let monotone = g[0] < g[1] && g[1] < g[2];

    let pass = st.worst_gate <= 1e-12
        && st.worst_alpha <= 1e-12
        && st.worst_weight_sum <= 1e-12
        && st.negative_weights == 0
        && fixed_point
        && monotone;
    rep.line(
        "4",
        "structural invariants",
        pass,
        format!(
            "{} forward passes; |Σg-1| {:.1e}, |Σα-1| {:.1e}, |Σweights-1| {:.1e} (limit 1e-12), {} negative weights; fixed point {}; g_max at β=0.5,1,2: {:.6} < {:.6} < {:.6}",
            st.passes, st.worst_gate, st.worst_alpha, st.worst_weight_sum, st.negative_weights, fixed_point, g[0], g[1], g[2]
        ),
    );
}

fn flip(l: Label) -> Label {
    match l {
        Label::Fraud => Label::Legit,
        Label::Legit => Label::Fraud,
        Label::Unlabeled => Label::Unlabeled,
    }
}

fn criterion_5(rep: &mut Report) {
    let table = generate(&SynthConfig {
        n_rows: 400,
        n_views: 3,
        inconsistency_rate: 0.5,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        views: 3,
        hidden: 16,
        risk_epochs: 20,
        ..TrainConfig::default()
    };
    let p = prepare::<f64>(&table, &cfg, None).unwrap();
    let mut model = MultiViewModel::<f64>::new(cfg.model_config(p.features.enhanced.cols()), 1).unwrap();
    // a non-zero head so logits depend on the inputs
    let mut r = rng(55);
    let slot = model.params.position("head.w2").unwrap();
    *model.params.get_mut(slot) = random_array(&mut r, cfg.hidden, 2, 1.0);
    let (pool, _) = labelled(&p.split.train, &p.labels);
    let mut identical = 0;
    let mut compared = 0;
    for batch in pool.chunks(40).take(5) {
        let graph = BatchGraph::closure(&p.views, batch, cfg.layers);
        for &target in batch.iter().take(4) {
            let mut flipped = p.labels.clone();
            flipped[target] = flip(flipped[target]);
            let run = |labels: &[Label]| {
                let visible = training_visibility(labels, &p.split);
                let (x, vis) = batch_inputs(&graph, &p.features.enhanced, &visible);
                let mut t = Tape::new();
                let leaves = model.place(&mut t, false);
                let out = model
                    .forward(&mut t, &leaves, &graph, x, &vis, Mode::Train { seed: 3 })
                    .unwrap();
                t.value(out.logits).clone()
            };
            let (a, b) = (run(&p.labels), run(&flipped));
            compared += 1;
            if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
                identical += 1;
            }
        }
    }

    // perturb every val/test row; training-side statistics must not move
    let mut r = rng(56);
    let mut rows = table.rows().to_vec();
    let n_train = p.split.train.len();
    for row in rows.iter_mut().skip(n_train) {
        row.features
            .iter_mut()
            .for_each(|f| *f = *f * 10.0 + r.random_range(-5.0..5.0));
        row.label = flip(row.label);
    }
    let perturbed = TransactionTable::new(rows, table.feature_names().to_vec(), table.view_keys().to_vec()).unwrap();
    let same_stats = Standardizer::fit(&table, &p.split.train) == Standardizer::fit(&perturbed, &p.split.train);
    let (base_a, _) = encode_features::<f64>(&table, &p.split.train);
    let (base_b, _) = encode_features::<f64>(&perturbed, &p.split.train);
    let rc = RiskConfig {
        epochs: 20,
        ..RiskConfig::default()
    };
    let risk_a = train_aux_risk_model(&base_a, &table.labels(), &p.split.train, &rc).unwrap();
    let risk_b = train_aux_risk_model(&base_b, &perturbed.labels(), &p.split.train, &rc).unwrap();
    let same_risk = risk_a.params == risk_b.params;
    rep.line(
        "5",
        "leakage guards",
        identical == compared && same_stats && same_risk,
        format!(
            "{identical}/{compared} label flips left batch logits bit-identical; encoding stats unchanged: {same_stats}; risk model unchanged: {same_risk}"
        ),
    );
}

fn block_medians(losses: &[f64], width: usize) -> Vec<f64> {
    losses
        .chunks(width)
        .filter(|c| c.len() == width)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[width / 2]
        })
        .collect()
}

fn criterion_6(rep: &mut Report) {
    let table = generate(&SynthConfig {
        n_rows: 500,
        n_views: 2,
        camouflage_strength: 0.0,
        seed: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        views: 2,
        epochs: 200,
        seed: 6,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let p = prepare::<f64>(&table, &cfg, None).unwrap();
    let out = train(&cfg, &p).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let train_auc = evaluate_rows(&out.last, &p, &p.split.train, cfg.batch_size, false)
        .unwrap()
        .auc;
    rep.line(
        "6",
        "overfit gate",
        train_auc >= 0.99 && secs < 300.0,
        format!("500 rows, 2 views, 200 epochs: train AUC {train_auc:.4} (limit 0.99), {secs:.1}s (limit 300s)"),
    );
    let medians = block_medians(&out.history.losses(), 5);
    let rises = medians.windows(2).filter(|w| w[1] > w[0]).count();
    rep.line(
        "6.loss",
        "smoothed training loss non-increasing",
        rises == 0,
        format!(
            "{} five-epoch block medians, {rises} increases; first {:.4}, last {:.4}",
            medians.len(),
            medians.first().copied().unwrap_or(f64::NAN),
            medians.last().copied().unwrap_or(f64::NAN)
        ),
    );
}

/// Mean over hyperedges and receivers of the largest gap between a sender
/// weight and the uniform weight.
fn mean_alpha_gap(model: &MultiViewModel<f64>, p: &hyperfraud::training::Prepared<f64>) -> f64 {
    let (pool, _) = labelled(&p.split.train, &p.labels);
    let batch = &pool[..pool.len().min(256)];
    let graph = BatchGraph::closure(&p.views, batch, model.config.layers);
    let visible = training_visibility(&p.labels, &p.split);
    let (x, vis) = batch_inputs(&graph, &p.features.enhanced, &visible);
    let mut t = Tape::new();
    let leaves = model.place(&mut t, false);
    let out = model.forward(&mut t, &leaves, &graph, x, &vis, Mode::Eval).unwrap();
    let (mut total, mut count) = (0.0, 0usize);
    for (v, inputs) in out.layer_inputs.iter().enumerate() {
        for &h in inputs {
            for st in edge_states(&graph.views[v], t.value(h), model.config.beta, SenderWeighting::Novelty) {
                let k = st.weights.len();
                if k < 3 {
                    continue;
                }
                for (i, row) in st.weights.iter().enumerate() {
                    let gap = row
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &a)| (a - 1.0 / (k - 1) as f64).abs())
                        .fold(0.0, f64::max);
                    total += gap;
                    count += 1;
                }
            }
        }
    }
    total / count.max(1) as f64
}

fn criterion_7(rep: &mut Report) {
    let base = TrainConfig {
        hidden: 32,
        epochs: 20,
        ..TrainConfig::default()
    };
    let run = |tail: f64, ablate: fn(&mut TrainConfig)| -> (Vec<f64>, f64) {
        let mut aucs = Vec::new();
        let mut gap = 0.0;
        for seed in 0..5u64 {
            let table = generate(&SynthConfig {
                n_rows: 5000,
                n_views: 4,
                camouflage_strength: 1.0,
                inconsistency_rate: 0.8,
                tail_exponent: tail,
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let mut cfg = TrainConfig { seed, ..base };
            ablate(&mut cfg);
            let p = prepare::<f64>(&table, &cfg, None).unwrap();
            let out = train(&cfg, &p).unwrap();
            aucs.push(
                evaluate_rows(&out.best, &p, &p.split.test, cfg.batch_size, false)
                    .unwrap()
                    .auc,
            );
            if !cfg.no_cnhl {
                gap += mean_alpha_gap(&out.best, &p) / 5.0;
            }
        }
        (aucs, gap)
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ");

    let (full, _) = run(1.2, |_| {});
    let (no_hcdp, _) = run(1.2, |c| c.no_hcdp = true);
    let d = mean(&full) - mean(&no_hcdp);
    rep.line(
        "7a",
        "ablation: full beats no-hcdp",
        d >= 0.02,
        format!(
            "mean test AUC {:.4} vs {:.4}, gap {d:+.4} (limit +0.02); per seed full [{}] no-hcdp [{}]",
            mean(&full),
            mean(&no_hcdp),
            fmt(&full),
            fmt(&no_hcdp)
        ),
    );

    let (full_tail, alpha_gap) = run(2.5, |_| {});
    let (no_cnhl, _) = run(2.5, |c| c.no_cnhl = true);
    let d = mean(&full_tail) - mean(&no_cnhl);
    rep.line(
        "7b",
        "ablation: full beats no-cnhl on a long tail",
        d >= 0.02,
        format!(
            "mean test AUC {:.4} vs {:.4}, gap {d:+.4} (limit +0.02); per seed full [{}] no-cnhl [{}]; mean max |α - uniform| in trained layers {alpha_gap:.2e}",
            mean(&full_tail),
            mean(&no_cnhl),
            fmt(&full_tail),
            fmt(&no_cnhl)
        ),
    );
}

fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Mean over positives of the precision at that positive's score.
fn brute_ap(s: &[f64], y: &[u8]) -> f64 {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| y[i] == 1).collect();
    pos.iter()
        .map(|&i| {
            let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
            above.iter().filter(|&&j| y[j] == 1).count() as f64 / above.len() as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

fn criterion_8(rep: &mut Report) {
    let (s, y) = ([0.9, 0.8, 0.7, 0.1], [1u8, 0, 1, 0]);
    let (a, ap, f1) = (
        auc(&s, &y).unwrap(),
        average_precision(&s, &y).unwrap(),
        macro_f1(&s, &y, 0.5).unwrap(),
    );
    let hand = (a - 0.75).abs() <= 1e-9
        && (ap - 0.833333).abs() <= 1e-6
        && (ap - 5.0 / 6.0).abs() <= 1e-9
        && (f1 - 0.733333).abs() <= 1e-6
        && (f1 - 11.0 / 15.0).abs() <= 1e-9;
    let mut r = rng(8);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 200 {
        let n = r.random_range(2..=50);
        let levels = r.random_range(2..=12);
        let s: Vec<f64> = (0..n)
            .map(|_| r.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if y.iter().all(|&v| v == y[0]) {
            continue;
        }
        worst = worst.max((auc(&s, &y).unwrap() - brute_auc(&s, &y)).abs());
        worst = worst.max((average_precision(&s, &y).unwrap() - brute_ap(&s, &y)).abs());
        done += 1;
    }
    rep.line(
        "8",
        "metric oracles",
        hand && worst <= 1e-12,
        format!("hand case AUC {a} AP {ap:.9} macro-F1 {f1:.9} (limit 1e-9); 200 random instances, max |diff| {worst:.2e} (limit 1e-12)"),
    );
}

fn criterion_9(rep: &mut Report) {
    let table = generate(&SynthConfig {
        n_rows: 600,
        n_views: 4,
        inconsistency_rate: 0.5,
        camouflage_strength: 0.5,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        hidden: 32,
        epochs: 6,
        batch_size: 128,
        seed: 9,
        ..TrainConfig::default()
    };
    let once = || {
        let p = prepare::<f64>(&table, &cfg, None).unwrap();
        let out = train(&cfg, &p).unwrap();
        let mut csv = Vec::new();
        out.history.write_csv(&mut csv).unwrap();
        let m = evaluate_rows(&out.best, &p, &p.split.test, cfg.batch_size, false).unwrap();
        (csv, serde_json::to_vec(&m).unwrap())
    };
    let (a, b) = (once(), once());
    rep.line(
        "9",
        "determinism",
        a == b,
        format!(
            "history CSV identical: {} ({} bytes); metrics JSON identical: {} ({} bytes)",
            a.0 == b.0,
            a.0.len(),
            a.1 == b.1,
            a.1.len()
        ),
    );
}

fn criterion_10() {
    match (std::env::var("HYPERFRAUD_SFFSD"), std::env::var("HYPERFRAUD_SPARKOV")) {
        (Err(_), Err(_)) => println!(
            "INFO [10] stretch reproduction: not run; set HYPERFRAUD_SFFSD / HYPERFRAUD_SPARKOV to a directory holding data.csv and schema.json"
        ),
        (sffsd, sparkov) => {
            for (name, dir, target) in [("S-FFSD", sffsd, 0.8883), ("Sparkov", sparkov, 0.9821)] {
                let Ok(dir) = dir else { continue };
                let dir = std::path::PathBuf::from(dir);
                let schema = hyperfraud::ingest::SchemaConfig::from_json_file(&dir.join("schema.json")).unwrap();
                let (table, _) = hyperfraud::ingest::load_transactions(&dir.join("data.csv"), &schema).unwrap();
                let cfg = TrainConfig {
                    views: table.view_keys().len().min(4),
                    ..TrainConfig::default()
                };
                let started = Instant::now();
                let p = prepare::<f64>(&table, &cfg, None).unwrap();
                let out = train(&cfg, &p).unwrap();
                let m = evaluate(
                    &hyperfraud::training::score_nodes(
                        &out.best,
                        &p.views,
                        &p.features.enhanced,
                        &training_visibility(&p.labels, &p.split),
                        &labelled(&p.split.test, &p.labels).0,
                        cfg.batch_size,
                    )
                    .unwrap()
                    .scores,
                    &labelled(&p.split.test, &p.labels).1,
                    false,
                )
                .unwrap();
                println!(
                    "INFO [10] {name}: test AUC {:.4} (reference {target:.4} ± 0.03), {:.0}s",
                    m.auc,
                    started.elapsed().as_secs_f64()
                );
            }
        }
    }
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture; none apply here
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f == id);
    let mut rep = Report::default();
    let criteria: [(&str, fn(&mut Report)); 9] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("5", criterion_5),
        ("6", criterion_6),
        ("7", criterion_7),
        ("8", criterion_8),
        ("9", criterion_9),
    ];
    for (id, f) in criteria {
        if wanted(id) {
            f(&mut rep);
        }
    }
    if wanted("10") {
        criterion_10();
    }
    if rep.failed.is_empty() {
        println!("acceptance: all gated criteria passed");
    } else {
        println!("acceptance: failed {}", rep.failed.join(", "));
        std::process::exit(1);
    }
}
