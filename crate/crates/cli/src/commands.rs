use crate::{
    Command, DataArgs, EvalArgs, IngestArgs, PipelineArgs, PredictArgs, SplitSet, SynthArgs, TrainFlags, Which,
};
use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use hyperfraud::discrepancy::RiskModel;
use hyperfraud::engine::ParamStore;
use hyperfraud::hypergraph::{build_view, write_dump_file};
use hyperfraud::ingest::{
    chronological_split, encode_features, load_transactions, write_encoded_csv, IngestReport, SchemaConfig,
    TransactionTable,
};
use hyperfraud::model::MultiViewModel;
use hyperfraud::synth::{write_dataset, SynthConfig};
use hyperfraud::training::{
    evaluate_rows, file_hash, prepare, score_nodes, train, training_visibility, write_embeddings, Prepared,
    RunManifest, TrainConfig,
};
use hyperfraud::Error;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn run(command: Command, m: &ArgMatches) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::Ingest(a) => ingest(a, started),
        Command::Build(a) => build(a, m, started),
        Command::Featurize(a) => featurize(a, m, started),
        Command::Train(a) => train_cmd(a, m, started),
        Command::Eval(a) => eval_cmd(a, started),
        Command::Predict(a) => predict(a, started),
        Command::Synth(a) => synth(a, started),
    }
}

fn parse_split(raw: &str) -> Result<(f64, f64, f64), Error> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("--split expects three numbers, got {raw:?}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("--split expects three numbers, got {raw:?}"))),
    }
}

/// Defaults, then the `--config` file, then flags given on the command line.
pub fn resolve_config(flags: &TrainFlags, m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    if given("lr") {
        cfg.lr = flags.lr;
    }
    if given("epochs") {
        cfg.epochs = flags.epochs;
    }
    if given("batch") {
        cfg.batch_size = flags.batch;
    }
    if given("hidden") {
        cfg.hidden = flags.hidden;
    }
    if given("views") {
        cfg.views = flags.views;
    }
    if given("layers") {
        cfg.layers = flags.layers;
    }
    if given("w") {
        cfg.window = flags.w;
    }
    if given("beta") {
        cfg.beta = flags.beta;
    }
    if given("dropout") {
        cfg.dropout = flags.dropout;
    }
    if given("seed") {
        cfg.seed = flags.seed;
    }
    if given("split") {
        cfg.split = parse_split(&flags.split)?;
    }
    for (id, value, slot) in [
        ("no_hcdp", flags.no_hcdp, &mut cfg.no_hcdp),
        ("no_cnhl", flags.no_cnhl, &mut cfg.no_cnhl),
        ("no_mhf", flags.no_mhf, &mut cfg.no_mhf),
        ("strict_window", flags.strict_window, &mut cfg.strict_window),
        ("js_standard", flags.js_standard, &mut cfg.js_standard),
        ("share_weights", flags.share_weights, &mut cfg.share_weights),
    ] {
        if given(id) {
            *slot = value;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    table: TransactionTable,
    report: IngestReport,
    hashes: Vec<(String, String)>,
}

fn load(data: &DataArgs) -> Result<Loaded> {
    let schema = SchemaConfig::from_json_file(&data.schema)
        .with_context(|| format!("reading schema {}", data.schema.display()))?;
    let (table, report) =
        load_transactions(&data.input, &schema).with_context(|| format!("loading {}", data.input.display()))?;
    let hashes = vec![hash_entry(&data.input)?, hash_entry(&data.schema)?];
    std::fs::create_dir_all(&data.out).with_context(|| format!("creating {}", data.out.display()))?;
    Ok(Loaded { table, report, hashes })
}

fn hash_entry(path: &Path) -> Result<(String, String)> {
    Ok((path.display().to_string(), file_hash(path)?))
}

fn manifest(
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    hashes: Vec<(String, String)>,
    started: Instant,
    out: &Path,
) -> Result<()> {
    RunManifest {
        command: command.into(),
        config,
        seed,
        input_hashes: hashes,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out.join("manifest.json"))?;
    Ok(())
}

fn ingest(a: IngestArgs, started: Instant) -> Result<()> {
    let ratios = parse_split(&a.split)?;
    let mut l = load(&a.data)?;
    let split = chronological_split(l.table.len(), ratios)?;
    let (encoded, standardizer) = encode_features::<f64>(&l.table, &split.train);
    write_encoded_csv(&a.data.out.join("encoded.csv"), &l.table, &split, &encoded)?;
    l.report.split_sizes = Some(split.sizes());
    std::fs::write(a.data.out.join("report.json"), serde_json::to_string_pretty(&l.report)?)?;
    std::fs::write(
        a.data.out.join("standardizer.json"),
        serde_json::to_string_pretty(&standardizer)?,
    )?;
    println!(
        "{} rows accepted, {} rejected; split {:?}",
        l.report.rows_accepted,
        l.report.rows_rejected,
        split.sizes()
    );
    manifest(
        "ingest",
        json!({ "split": ratios }),
        None,
        l.hashes,
        started,
        &a.data.out,
    )
}

fn build(a: PipelineArgs, m: &ArgMatches, started: Instant) -> Result<()> {
    let cfg = resolve_config(&a.train, m)?;
    let l = load(&a.data)?;
    let keys = l.table.view_keys();
    if keys.len() < cfg.views {
        return Err(Error::Config(format!(
            "{} views requested but the schema declares {}",
            cfg.views,
            keys.len()
        ))
        .into());
    }
    for key in &keys[..cfg.views] {
        let view = build_view(&l.table, key, cfg.window, cfg.window_policy())?;
        write_dump_file(
            std::slice::from_ref(&view),
            &a.data.out.join(format!("hypergraph_{key}.csv")),
        )?;
        println!(
            "{key}: {} hyperedges over {} categories",
            view.n_edges(),
            view.categories.len()
        );
    }
    manifest(
        "build",
        json!({ "w": cfg.window, "views": cfg.views, "strict_window": cfg.strict_window }),
        None,
        l.hashes,
        started,
        &a.data.out,
    )
}

fn featurize(a: PipelineArgs, m: &ArgMatches, started: Instant) -> Result<()> {
    let cfg = resolve_config(&a.train, m)?;
    let l = load(&a.data)?;
    let p = prepare::<f64>(&l.table, &cfg, None)?;
    p.features.write_csv(&a.data.out.join("enhanced.csv"))?;
    if let Some(risk) = &p.risk {
        risk.params.save(&a.data.out.join("risk.json"))?;
    }
    manifest(
        "featurize",
        serde_json::to_value(cfg)?,
        Some(cfg.seed),
        l.hashes,
        started,
        &a.data.out,
    )
}

fn train_cmd(a: PipelineArgs, m: &ArgMatches, started: Instant) -> Result<()> {
    let cfg = resolve_config(&a.train, m)?;
    let l = load(&a.data)?;
    let p = prepare::<f64>(&l.table, &cfg, None)?;
    let outcome = train(&cfg, &p)?;
    let out = &a.data.out;
    outcome.best.checkpoint().save(&out.join("checkpoint_best.json"))?;
    outcome.last.checkpoint().save(&out.join("checkpoint_last.json"))?;
    if let Some(risk) = &p.risk {
        risk.params.save(&out.join("risk.json"))?;
    }
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    outcome
        .history
        .write_csv(std::fs::File::create(out.join("history.csv"))?)?;
    match outcome.history.epochs.last() {
        Some(e) => println!(
            "{} epochs, final loss {:.6}, best epoch {}",
            outcome.history.len(),
            e.loss,
            outcome.best_epoch
        ),
        None => println!("0 epochs; wrote the initialised model"),
    }
    manifest(
        "train",
        serde_json::to_value(cfg)?,
        Some(cfg.seed),
        l.hashes,
        started,
        out,
    )
}

struct Restored {
    cfg: TrainConfig,
    prepared: Prepared<f64>,
    model: MultiViewModel<f64>,
    hashes: Vec<(String, String)>,
}

fn restore(data: &DataArgs, run: &Path, which: Which) -> Result<Restored> {
    let cfg_path = run.join("config.json");
    let cfg: TrainConfig = serde_json::from_str(
        &std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?,
    )?;
    let l = load(data)?;
    let risk = if cfg.no_hcdp {
        None
    } else {
        Some(RiskModel {
            params: ParamStore::load(&run.join("risk.json"))?,
        })
    };
    let prepared = prepare::<f64>(&l.table, &cfg, risk)?;
    let ckpt_path: PathBuf = run.join(match which {
        Which::Best => "checkpoint_best.json",
        Which::Last => "checkpoint_last.json",
    });
    let mut model = MultiViewModel::new(cfg.model_config(prepared.features.enhanced.cols()), cfg.seed)?;
    model.restore(&ParamStore::load(&ckpt_path)?)?;
    let mut hashes = l.hashes;
    hashes.push(hash_entry(&ckpt_path)?);
    Ok(Restored {
        cfg,
        prepared,
        model,
        hashes,
    })
}

fn eval_cmd(a: EvalArgs, started: Instant) -> Result<()> {
    let r = restore(&a.data, &a.run, a.checkpoint)?;
    let rows = match a.on {
        SplitSet::Train => &r.prepared.split.train,
        SplitSet::Val => &r.prepared.split.val,
        SplitSet::Test => &r.prepared.split.test,
    };
    let report = evaluate_rows(&r.model, &r.prepared, rows, r.cfg.batch_size, a.sweep_threshold)?;
    report.write_dir(&a.data.out)?;
    println!(
        "auc {:.6}  ap {:.6}  macro-f1 {:.6} (threshold {}{})",
        report.auc,
        report.ap,
        report.macro_f1,
        report.threshold,
        if report.threshold_swept { ", swept" } else { "" }
    );
    let config = json!({
        "train": r.cfg,
        "split": format!("{:?}", a.on).to_lowercase(),
        "checkpoint": format!("{:?}", a.checkpoint).to_lowercase(),
        "sweep_threshold": a.sweep_threshold,
    });
    manifest("eval", config, Some(r.cfg.seed), r.hashes, started, &a.data.out)
}

fn predict(a: PredictArgs, started: Instant) -> Result<()> {
    let r = restore(&a.data, &a.run, a.checkpoint)?;
    let p = &r.prepared;
    let n = p.labels.len();
    let all: Vec<usize> = (0..n).collect();
    let visible = training_visibility(&p.labels, &p.split);
    let scored = score_nodes(
        &r.model,
        &p.views,
        &p.features.enhanced,
        &visible,
        &all,
        r.cfg.batch_size,
    )?;
    let tags = p.split.assignment(n);
    let mut w = csv::Writer::from_path(a.data.out.join("predictions.csv"))?;
    w.write_record(["node", "split", "fraud_probability"])?;
    for i in 0..n {
        w.write_record([
            i.to_string(),
            ["train", "val", "test"][tags[i] as usize].to_string(),
            scored.scores[i].to_string(),
        ])?;
    }
    w.flush()?;
    if a.embeddings {
        write_embeddings(&a.data.out.join("embeddings.csv"), &all, &scored.embeddings)?;
    }
    let config = json!({
        "train": r.cfg,
        "checkpoint": format!("{:?}", a.checkpoint).to_lowercase(),
        "embeddings": a.embeddings,
    });
    manifest("predict", config, Some(r.cfg.seed), r.hashes, started, &a.data.out)
}

fn synth(a: SynthArgs, started: Instant) -> Result<()> {
    let cfg = SynthConfig {
        n_rows: a.rows,
        n_views: a.views,
        categories_per_view: a.categories,
        tail_exponent: a.tail_exponent,
        fraud_rate: a.fraud_rate,
        camouflage_strength: a.camouflage,
        inconsistency_rate: a.inconsistency,
        feature_dim: a.feature_dim,
        seed: a.seed,
        margin: a.margin,
        legit_noise: a.legit_noise,
        unlabeled_rate: a.unlabeled_rate,
        ..SynthConfig::default()
    };
    let table = write_dataset(&cfg, &a.out, &a.name)?;
    let c = table.class_counts();
    println!(
        "{} rows: {} fraud, {} legit, {} unlabeled",
        table.len(),
        c.fraud,
        c.legit,
        c.unlabeled
    );
    manifest(
        "synth",
        serde_json::to_value(cfg)?,
        Some(cfg.seed),
        Vec::new(),
        started,
        &a.out,
    )
}
