use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use runtime_oracle::conformal::{build_calibration, load_calibration, save_calibration};
use runtime_oracle::dataset::{
    generate_synthetic, load_dataset, load_split, make_split, save_dataset, save_split, Dataset, DatasetFormat, Split,
};
use runtime_oracle::evaluation::{
    export_embeddings, fit_model, load_report, run_experiment, score_bounds, score_mean, summarize, write_run,
    RunStatus,
};
use runtime_oracle::format::to_json_pretty;
use runtime_oracle::model::{load_model, save_model, RuntimeModel};
use runtime_oracle::training::save_log;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    CalibrateArgs, Command, EvaluateArgs, ExportArgs, FormatArg, ModeArg, SplitArgs, SummarizeArgs, SynthArgs,
    TrainArgs,
};
use crate::config::{require_path, resolve_seed, resolve_spec, resolve_synthetic, Given, RunConfig};
use crate::CliError;

pub fn run(command: Command, cfg: &RunConfig, m: &ArgMatches) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(&a, cfg, m),
        Command::Split(a) => split(&a, cfg, m),
        Command::Train(a) => train(&a, cfg, m),
        Command::Calibrate(a) => calibrate(&a, cfg),
        Command::Evaluate(a) => evaluate(&a, cfg, m),
        Command::Summarize(a) => summarize_runs(&a, cfg),
        Command::ExportEmbeddings(a) => export(&a, cfg),
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json_pretty(value).map_err(runtime)?;
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Resolved settings and inputs of the command that produced a directory.
/// No timestamps, so reruns rewrite it byte for byte.
fn write_manifest(dir: &Path, command: &str, config: Value) -> Result<(), CliError> {
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("config types serialize to JSON")
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn open_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory not found: {}",
            dir.display()
        )));
    }
    let format = DatasetFormat::detect(dir).ok_or_else(|| {
        CliError::Usage(format!(
            "{} holds neither observations.jsonl nor observations.csv",
            dir.display()
        ))
    })?;
    Ok(load_dataset(dir, format)?)
}

fn open_split(path: &Path, dataset: &Dataset) -> Result<Split, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("split file not found: {}", path.display())));
    }
    let split = load_split(path)?;
    if split.len() != dataset.len() {
        return Err(CliError::Usage(format!(
            "split covers {} observations but the dataset has {}",
            split.len(),
            dataset.len()
        )));
    }
    Ok(split)
}

fn open_model(path: &Path) -> Result<RuntimeModel, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("model file not found: {}", path.display())));
    }
    Ok(load_model(path)?)
}

fn check_entities(model: &RuntimeModel, dataset: &Dataset) -> Result<(), CliError> {
    if model.n_workloads() != dataset.n_workloads() || model.n_platforms() != dataset.n_platforms() {
        return Err(CliError::Usage(format!(
            "model covers {}x{} workloads x platforms but the dataset has {}x{}",
            model.n_workloads(),
            model.n_platforms(),
            dataset.n_workloads(),
            dataset.n_platforms()
        )));
    }
    Ok(())
}

fn synth(a: &SynthArgs, cfg: &RunConfig, m: &ArgMatches) -> Result<(), CliError> {
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let config = resolve_synthetic(cfg, m, a);
    config.validate()?;
    let (dataset, oracle) = generate_synthetic(&config, seed)?;
    create_dir(&out)?;
    let format = match a.format {
        FormatArg::Jsonl => DatasetFormat::CanonicalJsonl,
        FormatArg::Csv => DatasetFormat::CanonicalCsv,
    };
    save_dataset(&dataset, &out, format)?;
    write_json(&out.join("oracle.json"), &oracle)?;
    write_manifest(
        &out,
        "synth",
        json!({ "seed": seed, "synthetic": to_value(&config), "format": format!("{:?}", a.format).to_lowercase() }),
    )?;
    println!("wrote {} observations to {}", dataset.len(), out.display());
    Ok(())
}

fn split(a: &SplitArgs, cfg: &RunConfig, m: &ArgMatches) -> Result<(), CliError> {
    let data_dir = require_path(&a.data, &cfg.paths.data, "data")?;
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let fraction = match cfg.split.train_fraction {
        Some(f) if !Given(m).has("train_fraction") => f,
        _ => a.train_fraction,
    };
    let dataset = open_dataset(&data_dir)?;
    let split = make_split(&dataset, fraction, seed)?;
    create_dir(&out)?;
    save_split(&split, out.join("split.json"))?;
    write_manifest(
        &out,
        "split",
        json!({ "seed": seed, "train_fraction": fraction, "data": display(&data_dir) }),
    )?;
    println!(
        "split {} observations: {} train, {} calval, {} test",
        split.len(),
        split.train.len(),
        split.calval.len(),
        split.test.len()
    );
    Ok(())
}

fn train(a: &TrainArgs, cfg: &RunConfig, m: &ArgMatches) -> Result<(), CliError> {
    let data_dir = require_path(&a.data, &cfg.paths.data, "data")?;
    let split_path = require_path(&a.split, &cfg.paths.split, "split")?;
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let mut spec = resolve_spec(cfg, m, &a.model);
    if Given(m).has("mode") || cfg.network.is_none() {
        spec.network.mean_mode = a.mode == ModeArg::Mean;
    }
    let mean_mode = spec.network.mean_mode;
    spec.network.validate()?;
    spec.train.validate()?;
    spec.loss.validate()?;

    let dataset = open_dataset(&data_dir)?;
    let split = open_split(&split_path, &dataset)?;
    let outcome = fit_model(&dataset, &split, &spec, mean_mode, seed)?;

    create_dir(&out)?;
    save_model(&outcome.best, out.join("best.json"))?;
    save_model(&outcome.last, out.join("final.json"))?;
    save_log(&outcome.log, out.join("training_log.csv"))?;
    write_json(&out.join("baseline.json"), &outcome.best.baseline)?;
    write_manifest(
        &out,
        "train",
        json!({
            "seed": seed,
            "mode": if mean_mode { "mean" } else { "quantile" },
            "data": display(&data_dir),
            "split": display(&split_path),
            "objective": to_value(&spec.objective),
            "use_workload_features": spec.use_workload_features,
            "use_platform_features": spec.use_platform_features,
            "interference": to_value(&spec.interference),
            "network": to_value(&spec.network),
            "train": to_value(&spec.train),
            "loss": to_value(&spec.loss),
            "baseline_max_sweeps": spec.baseline_max_sweeps,
            "baseline_tol": spec.baseline_tol,
            "best_step": outcome.best_step,
        }),
    )?;
    println!(
        "best checkpoint at step {} written to {}",
        outcome.best_step,
        out.display()
    );
    Ok(())
}

fn calibrate(a: &CalibrateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = require_path(&a.model, &cfg.paths.model, "model")?;
    let data_dir = require_path(&a.data, &cfg.paths.data, "data")?;
    let split_path = require_path(&a.split, &cfg.paths.split, "split")?;
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let model = open_model(&model_path)?;
    if model.config.mean_mode {
        return Err(CliError::Usage("quantile-mode model required".to_string()));
    }
    let dataset = open_dataset(&data_dir)?;
    check_entities(&model, &dataset)?;
    let split = open_split(&split_path, &dataset)?;
    let table = build_calibration(&model, &dataset, &split.calval, &a.epsilon)?;
    create_dir(&out)?;
    save_calibration(&table, out.join("calibration.json"))?;
    write_manifest(
        &out,
        "calibrate",
        json!({
            "model": display(&model_path),
            "data": display(&data_dir),
            "split": display(&split_path),
            "epsilons": a.epsilon,
        }),
    )?;
    println!("calibrated {} pools into {}", table.pools.len(), out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs, cfg: &RunConfig, m: &ArgMatches) -> Result<(), CliError> {
    match a.model.clone().or_else(|| cfg.paths.model.clone()) {
        Some(model_path) => evaluate_checkpoint(a, cfg, &model_path),
        None => evaluate_grid(a, cfg, m),
    }
}

fn evaluate_checkpoint(a: &EvaluateArgs, cfg: &RunConfig, model_path: &Path) -> Result<(), CliError> {
    let data_dir = require_path(&a.data, &cfg.paths.data, "data")?;
    let split_path = require_path(&a.split, &cfg.paths.split, "split")?;
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let model = open_model(model_path)?;
    let dataset = open_dataset(&data_dir)?;
    check_entities(&model, &dataset)?;
    let split = open_split(&split_path, &dataset)?;

    let mut inputs = json!({
        "model": display(model_path),
        "data": display(&data_dir),
        "split": display(&split_path),
    });
    let report = if model.config.mean_mode {
        let scores = score_mean(&model, &dataset, &split.test)?;
        json!({
            "mode": "mean",
            "n_test": split.test.len(),
            "mape_no_interference": scores.no_interference,
            "mape_interference": scores.interference,
            "mape_by_pool": scores.by_pool,
        })
    } else {
        let cal_path = require_path(&a.calibration, &cfg.paths.calibration, "calibration")?;
        if !cal_path.is_file() {
            return Err(CliError::Usage(format!(
                "calibration file not found: {}",
                cal_path.display()
            )));
        }
        let table = load_calibration(&cal_path)?;
        let epsilons = a.epsilon.clone().unwrap_or_else(|| table.epsilons.clone());
        let scores = score_bounds(&model, &table, &dataset, &split.test, &epsilons)?;
        inputs["calibration"] = json!(display(&cal_path));
        inputs["epsilons"] = json!(epsilons);
        json!({
            "mode": "quantile",
            "n_test": split.test.len(),
            "bounds": to_value(&scores.metrics),
        })
    };
    create_dir(&out)?;
    write_json(&out.join("evaluation.json"), &report)?;
    write_manifest(&out, "evaluate", inputs)?;
    println!("wrote {}", out.join("evaluation.json").display());
    Ok(())
}

/// `fraction_<f>_replicate_<r>`
fn run_dir_name(fraction: f64, replicate: usize) -> String {
    format!("fraction_{fraction}_replicate_{replicate}")
}

fn evaluate_grid(a: &EvaluateArgs, cfg: &RunConfig, m: &ArgMatches) -> Result<(), CliError> {
    let data_dir = require_path(&a.data, &cfg.paths.data, "data")?;
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let g = Given(m);
    let mut spec = resolve_spec(cfg, m, &a.model_args);
    spec.seed = resolve_seed(a.seed, cfg.seed)?;
    g.set("fractions", &mut spec.train_fractions, &a.fractions);
    g.set("replicates", &mut spec.replicates, &a.replicates);
    g.set("label", &mut spec.label, &a.label);
    g.set("mean_model", &mut spec.mean_model, &a.mean_model);
    g.set("quantile_model", &mut spec.quantile_model, &a.quantile_model);
    if let Some(eps) = &a.epsilon {
        spec.epsilons = eps.clone();
    }
    spec.validate()?;

    let dataset = open_dataset(&data_dir)?;
    let outputs = run_experiment(&dataset, &spec, a.jobs)?;
    create_dir(&out)?;
    let mut failed = Vec::new();
    for output in &outputs {
        let r = &output.report;
        let dir = out.join(run_dir_name(r.train_fraction, r.replicate));
        write_run(output, &dir)?;
        write_manifest(
            &dir,
            "evaluate",
            json!({ "data": display(&data_dir), "train_fraction": r.train_fraction, "replicate": r.replicate,
                    "seed": r.seed, "experiment": to_value(&spec) }),
        )?;
        if r.status == RunStatus::Failed {
            failed.push(format!(
                "{}: {}",
                run_dir_name(r.train_fraction, r.replicate),
                r.error.as_deref().unwrap_or("unknown error")
            ));
        }
    }
    write_manifest(
        &out,
        "evaluate",
        json!({ "data": display(&data_dir), "jobs": a.jobs, "experiment": to_value(&spec) }),
    )?;
    println!("wrote {} runs to {}", outputs.len(), out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} run(s) failed:\n{}",
            failed.len(),
            failed.join("\n")
        )))
    }
}

/// `report.json` files directly in `dir` or one level below it.
fn find_reports(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let direct = dir.join("report.json");
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("run directory not found: {}", dir.display())));
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Usage(format!("no report.json in or below {}", dir.display())));
    }
    Ok(found)
}

fn summarize_runs(a: &SummarizeArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let mut paths = Vec::new();
    for dir in &a.runs {
        paths.extend(find_reports(dir)?);
    }
    let reports = paths.iter().map(load_report).collect::<Result<Vec<_>, _>>()?;
    create_dir(&out)?;
    summarize(&reports, &out)?;
    let runs: Vec<String> = paths.iter().map(|p| display(p)).collect();
    write_manifest(&out, "summarize", json!({ "reports": runs }))?;
    println!("summarized {} reports into {}", reports.len(), out.display());
    Ok(())
}

fn export(a: &ExportArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = require_path(&a.model, &cfg.paths.model, "model")?;
    let out = require_path(&a.out, &cfg.paths.out, "out")?;
    let model = open_model(&model_path)?;
    let data_dir = a.data.clone().or_else(|| cfg.paths.data.clone());
    let dataset = match &data_dir {
        Some(dir) => {
            let d = open_dataset(dir)?;
            check_entities(&model, &d)?;
            Some(d)
        }
        None => None,
    };
    create_dir(&out)?;
    export_embeddings(
        &model,
        &out,
        dataset.as_ref().and_then(|d| d.workload_names.as_deref()),
        dataset.as_ref().and_then(|d| d.platform_names.as_deref()),
    )?;
    write_manifest(
        &out,
        "export-embeddings",
        json!({ "model": display(&model_path), "data": data_dir.as_deref().map(display) }),
    )?;
    println!("wrote embeddings to {}", out.display());
    Ok(())
}
