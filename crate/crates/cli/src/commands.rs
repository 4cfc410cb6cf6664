//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use mcft::encoder::{count_costs, load_checkpoint, load_model, save_checkpoint, save_model, EncoderState, SCHEMA_VERSION};
use mcft::eval::{
    evaluate, layer_similarity, markdown_summary, measure_throughput, repeat_runs, results_csv, sample_split,
    similarity_csv, similarity_svg, Dataset, Protocol, ResultRow, RunSummary, SimilarityMode,
};
use mcft::mcft::{pretrain_masked, train, view_patches, EpochMetrics, TrainOptions, TrainState};
use mcft::pointcloud::{export_dataset, generate_dataset, load_dataset_dir, PatchSet, PointCloud, SyntheticSpec};
use serde_json::{json, Value};

use crate::config::{config_error, Method, RunConfig};
use crate::rundir::{self, MetricsWriter};
use crate::{BenchArgs, Command, Common, DescribeArgs, EvalArgs, FinetuneArgs, ReportArgs, SimilarityArgs};

pub fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => {
            let cfg = resolve(&a.common, vec![])?;
            let out = a.common.out.clone().unwrap_or_else(|| cfg.output_root().join(format!("data-s{}", cfg.seed)));
            gen_data(&cfg, &out)
        }
        Command::Pretrain(a) => {
            let mut o = vec![];
            push(&mut o, &["pretrain", "epochs"], a.epochs);
            push(&mut o, &["pretrain_per_class"], a.per_class);
            let cfg = resolve(&a.common, o)?;
            let out = a
                .common
                .out
                .clone()
                .unwrap_or_else(|| cfg.output_root().join(format!("pretrain-s{}", cfg.seed)));
            let path = pretrain(&cfg, &out)?;
            println!("{}", json!({ "event": "pretrain_done", "checkpoint": path }));
            Ok(())
        }
        Command::Finetune(a) => {
            let cfg = resolve(&a.common, finetune_overrides(&a))?;
            let out = a
                .common
                .out
                .clone()
                .unwrap_or_else(|| cfg.output_root().join(format!("{}-s{}", cfg.method.name(), cfg.seed)));
            let summary = finetune(&cfg, &out)?;
            println!(
                "{}",
                json!({ "event": "finetune_done", "run_dir": out, "mean": summary.mean, "std": summary.std,
                        "accuracies": summary.accuracies, "failures": summary.failures })
            );
            if summary.ok() {
                Ok(())
            } else {
                anyhow::bail!("{} of {} runs failed", summary.failures.len(), cfg.runs)
            }
        }
        Command::Eval(a) => eval(&a),
        Command::Similarity(a) => similarity(&a),
        Command::Bench(a) => bench(&a),
        Command::Report(a) => report(&a),
        Command::Describe(a) => describe(&a),
    }
}

type Overrides = Vec<(&'static [&'static str], Value)>;

fn push<V: serde::Serialize>(o: &mut Overrides, path: &'static [&'static str], v: Option<V>) {
    if let Some(v) = v {
        o.push((path, serde_json::to_value(v).expect("plain values serialize")));
    }
}

fn finetune_overrides(a: &FinetuneArgs) -> Overrides {
    let mut o = vec![];
    push(&mut o, &["method"], a.method);
    push(&mut o, &["checkpoint"], a.checkpoint.clone());
    push(&mut o, &["shots"], a.shots);
    push(&mut o, &["runs"], a.runs);
    push(&mut o, &["protocol"], a.n_way.map(|n_way| Protocol::NWayMShot { n_way }));
    push(&mut o, &["mcft", "total_epochs"], a.epochs);
    push(&mut o, &["mcft", "warmup_epochs"], a.warmup);
    push(&mut o, &["mcft", "optim", "learning_rate"], a.lr);
    push(&mut o, &["mcft", "lambda"], a.lambda);
    push(&mut o, &["mcft", "alpha"], a.alpha);
    push(&mut o, &["mcft", "eval_every"], a.eval_every);
    push(&mut o, &["semi", "tau"], a.tau);
    push(&mut o, &["semi", "omega"], a.omega);
    push(&mut o, &["prune", "budget"], a.budget);
    push(&mut o, &["prune", "interval"], a.prune_interval);
    o
}

fn resolve(common: &Common, mut overrides: Overrides) -> anyhow::Result<RunConfig> {
    push(&mut overrides, &["seed"], common.seed);
    let refs: Vec<(&[&str], Value)> = overrides.into_iter().map(|(p, v)| (p, v)).collect();
    RunConfig::resolve(common.config.as_deref(), &refs)
}

/// User-named input files must exist; a missing one is a configuration error.
fn input(path: &Path) -> anyhow::Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(config_error(format!("{} does not exist", path.display())))
    }
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let Some(dir) = &cfg.data_dir else {
        return Ok(Dataset::synthetic(&cfg.data, cfg.train_per_class, cfg.test_per_class)?);
    };
    let (train, mut names) = load_dataset_dir(input(&dir.join("train"))?)?;
    let (test, test_names) = load_dataset_dir(input(&dir.join("test"))?)?;
    if test_names.len() > names.len() {
        names = test_names;
    }
    if names.len() != cfg.encoder.num_classes {
        return Err(config_error(format!(
            "{} has {} classes but encoder.num_classes is {}",
            dir.display(),
            names.len(),
            cfg.encoder.num_classes
        )));
    }
    Ok(Dataset { train, test, class_names: names })
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let dataset = Dataset::synthetic(&cfg.data, cfg.train_per_class, cfg.test_per_class)?;
    export_dataset(&dataset.train, &dataset.class_names, out.join("train"))?;
    export_dataset(&dataset.test, &dataset.class_names, out.join("test"))?;
    rundir::write_json(&out.join("config.json"), cfg)?;
    println!(
        "{}",
        json!({ "event": "gen_data_done", "dir": out, "train": dataset.train.len(), "test": dataset.test.len() })
    );
    Ok(())
}

/// Pretrains on a dedicated synthetic set and writes `checkpoints/pretrained.bin`.
pub fn pretrain(cfg: &RunConfig, run_dir: &Path) -> anyhow::Result<PathBuf> {
    rundir::create(run_dir)?;
    rundir::write_json(&run_dir.join("config.json"), cfg)?;
    let spec = SyntheticSpec { seed: cfg.pretrain_data_seed, ..cfg.data.clone() };
    let clouds = generate_dataset(&spec, cfg.pretrain_per_class)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = cfg.seed;
    let started = Instant::now();
    let (state, report) = pretrain_masked::<f32>(&cfg.encoder, &pcfg, &clouds)?;
    let mut csv = String::from("epoch,loss_local,loss_global\n");
    for (e, (l, g)) in report.epoch_losses.iter().zip(&report.global_losses).enumerate() {
        csv.push_str(&format!("{e},{l},{g}\n"));
    }
    fs::write(run_dir.join("metrics.csv"), csv)?;
    let path = run_dir.join("checkpoints").join("pretrained.bin");
    save_checkpoint(&state, &path)?;
    log::info!("pretrained {} clouds in {:.1}s", clouds.len(), started.elapsed().as_secs_f64());
    Ok(path)
}

/// Runs `cfg.runs` seeded subruns under `run_dir/seed-{s}` and writes the
/// aggregate reports.
pub fn finetune(cfg: &RunConfig, run_dir: &Path) -> anyhow::Result<RunSummary> {
    let path = cfg.checkpoint.as_deref().ok_or_else(|| {
        config_error("finetune needs a checkpoint (--checkpoint or \"checkpoint\"); create one with `mcft pretrain`")
    })?;
    let ckpt = load_checkpoint::<f32>(input(path)?)?;
    let mut want = cfg.encoder.clone();
    want.num_classes = ckpt.config.num_classes;
    if let Some((field, expected, found)) = want.first_difference(&ckpt.config) {
        return Err(config_error(format!(
            "checkpoint {} has {field}={found}, config has {field}={expected}",
            path.display()
        )));
    }
    let dataset = load_dataset(cfg)?;
    // Surface impossible protocols as configuration errors before training.
    sample_split(&dataset, cfg.protocol, cfg.shots, cfg.seed).map_err(|e| config_error(e.to_string()))?;

    rundir::create(run_dir)?;
    rundir::write_json(&run_dir.join("config.json"), cfg)?;
    let protocol = cfg.protocol.describe(cfg.shots);
    let mut rows = Vec::new();
    let summary = repeat_runs(&protocol, cfg.runs, cfg.seed, |seed| {
        let dir = run_dir.join(format!("seed-{seed}"));
        let oa = finetune_one(cfg, &dataset, &ckpt, seed, &dir).map_err(|e| mcft::Error::State(format!("{e:#}")))?;
        rows.push(ResultRow { method: cfg.method.name().into(), protocol: protocol.clone(), shots: cfg.shots, seed, oa });
        Ok(oa)
    })?;
    let reports = run_dir.join("reports");
    fs::write(reports.join("results.csv"), results_csv(&rows))?;
    fs::write(reports.join("summary.md"), markdown_summary(&rows))?;
    rundir::write_json(&reports.join("summary.json"), &summary)?;
    log::info!("{} {protocol}: {} over {} run(s)", cfg.method.name(), summary.format_pct(), summary.accuracies.len());
    Ok(summary)
}

fn finetune_one(
    cfg: &RunConfig,
    dataset: &Dataset,
    ckpt: &EncoderState<f32>,
    seed: u64,
    dir: &Path,
) -> anyhow::Result<f64> {
    rundir::create(dir)?;
    let split = sample_split(dataset, cfg.protocol, cfg.shots, seed)?;
    rundir::write_json(&dir.join("split.json"), &split)?;
    let data = split.materialize(dataset);
    let mut start = ckpt.clone();
    start.config.num_classes = split.classes.len();
    let mut mcfg = cfg.mcft.clone();
    mcfg.seed = seed;
    let pool: Vec<PointCloud> = data.pool.iter().map(|c| PointCloud { label: None, ..c.clone() }).collect();

    let prune_path = dir.join("prune_log.jsonl");
    fs::write(&prune_path, "")?;
    let checkpoints = dir.join("checkpoints");
    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let mut logged = 0;
    let mut best = f64::NEG_INFINITY;
    let mut on_epoch = |m: &EpochMetrics, st: &TrainState<f32>| -> mcft::Result<()> {
        writer.append(m, st.student.active_layers())?;
        for report in &st.prune_log[logged..] {
            rundir::append_prune_record(&prune_path, report)?;
        }
        logged = st.prune_log.len();
        if let Some(acc) = m.eval_acc {
            if acc > best {
                best = acc;
                save_model(&st.student, Some(&st.head), &checkpoints.join("best.bin"))?;
            }
        }
        Ok(())
    };
    let opts = TrainOptions {
        eval_set: Some(&data.test),
        semi: (cfg.method == Method::McftSsl).then_some((&cfg.semi, &pool[..])),
        prune: (cfg.method == Method::McftPrune).then_some(&cfg.prune),
        on_epoch: Some(&mut on_epoch),
    };
    let state = train(cfg.method.mode(), &mcfg, &start, &data.support, opts)?;
    save_model(&state.student, Some(&state.head), &checkpoints.join("final.bin"))?;
    if state.student.active_layers() < state.student.config.num_layers {
        save_model(&state.student.compact()?, Some(&state.head), &checkpoints.join("final_compact.bin"))?;
    }
    state
        .history
        .last()
        .and_then(|m| m.eval_acc)
        .context("training produced no final evaluation")
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.common, vec![])?;
    let (state, head) = load_model::<f32>(input(&a.model)?)?;
    let head = head.ok_or_else(|| config_error(format!("{} has no classifier head", a.model.display())))?;
    let dataset = load_dataset(&cfg)?;
    if state.config.num_classes != dataset.num_classes() {
        return Err(config_error(format!(
            "model predicts {} classes but the dataset has {}",
            state.config.num_classes,
            dataset.num_classes()
        )));
    }
    let acc = evaluate(&state, &head, &dataset.test)?;
    println!("{}", json!({ "event": "eval", "model": a.model, "oa": acc.overall, "per_class": acc.per_class }));
    Ok(())
}

/// Splits a repeatable `name=path` argument.
fn named_paths(items: &[String]) -> anyhow::Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
            _ => Err(config_error(format!("expected name=path, got '{s}'"))),
        })
        .collect()
}

fn similarity(a: &SimilarityArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.common, vec![])?;
    let mode = match a.mode.as_str() {
        "cls" => SimilarityMode::Cls,
        "token-mean" => SimilarityMode::TokenMean,
        other => return Err(config_error(format!("unknown similarity mode '{other}'"))),
    };
    let models = named_paths(&a.models)?;
    let reference = load_checkpoint::<f32>(input(&a.checkpoint)?)?;
    let dataset = load_dataset(&cfg)?;
    let probes: Vec<PatchSet> = dataset
        .test
        .iter()
        .take(a.probes.max(1))
        .map(|c| view_patches(&reference.config, c, None, 0))
        .collect::<mcft::Result<_>>()?;
    let mut series = Vec::new();
    for (name, path) in &models {
        let mut model = load_checkpoint::<f32>(input(path)?)?;
        // Head width does not enter the encoder comparison.
        model.config.num_classes = reference.config.num_classes;
        series.push((name.clone(), layer_similarity(&reference, &model, &probes, mode)?));
    }
    let out = a.common.out.clone().unwrap_or_else(|| cfg.output_root().join("similarity"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("similarity.csv"), similarity_csv(&series))?;
    fs::write(out.join("similarity.svg"), similarity_svg("Layer similarity to checkpoint", &series))?;
    for (name, values) in &series {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("{}", json!({ "event": "similarity", "model": name, "per_layer": values, "mean": mean }));
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> anyhow::Result<()> {
    let models = named_paths(&a.models)?;
    let mut table = String::from("| model | layers | params | FLOPs | frames/s |\n|---|---|---|---|---|\n");
    let mut csv = String::from("model,active_layers,params,flops,frames_per_s\n");
    for (name, path) in &models {
        let (state, head) = load_model::<f32>(input(path)?)?;
        let state = if state.active_layers() < state.config.num_layers { state.compact()? } else { state };
        let costs = count_costs(&state, head.as_ref());
        let t = measure_throughput(&state, head.as_ref(), a.batch, a.warmup, a.iters)?;
        let layers = state.active_layers();
        table.push_str(&format!(
            "| {name} | {layers} | {} | {} | {:.1} |\n",
            costs.param_count, costs.flops_per_forward, t.median
        ));
        csv.push_str(&format!("{name},{layers},{},{},{:.3}\n", costs.param_count, costs.flops_per_forward, t.median));
    }
    if let Some(out) = &a.common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.csv"), &csv)?;
        fs::write(out.join("bench.md"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in &a.runs {
        rows.extend(rundir::read_results(input(run)?)?);
    }
    let table = markdown_summary(&rows);
    if let Some(out) = &a.common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("results.csv"), results_csv(&rows))?;
        fs::write(out.join("summary.md"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn describe(a: &DescribeArgs) -> anyhow::Result<()> {
    let (state, head) = load_model::<f32>(input(&a.model)?)?;
    let costs = count_costs(&state, head.as_ref());
    let record = json!({
        "schema_version": SCHEMA_VERSION,
        "config": state.config,
        "layer_mask": state.layer_mask,
        "active_layers": state.active_layers(),
        "has_head": head.is_some(),
        "param_count": costs.param_count,
        "flops_per_forward": costs.flops_per_forward,
    });
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}
