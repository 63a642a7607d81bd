use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use genclass::checkpoint::Checkpoint;
use genclass::conditioning::ConditioningMatrix;
use genclass::counterfactual::{delta_adjust, heatmap, mean_error_tensors, overlay};
use genclass::data::toy::ToyDatasetSpec;
use genclass::data::{generate_toy_dataset, load_image, save_image, DatasetManifest, Split};
use genclass::diffusion::sample;
use genclass::evaluation::experiment::{classify_items, train_checkpoint, training_sets};
use genclass::evaluation::{metrics_report, run_experiment, turing_metrics, ExperimentKind, ExperimentSpec, Judgment};
use genclass::exec::derive_seed;
use genclass::train::TrainConfig;
use genclass::uncertainty::{bin_performance, fit_psychometric, normalize_confidences, PriorSpec};
use genclass::{Execution, NoisePredictor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::*;

pub const SCHEMA_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

pub fn run(command: Command, seed: Option<u64>, exec: Execution) -> Result<Value> {
    match command {
        Command::GenToy(a) => gen_toy(&a, seed.unwrap_or(0)),
        Command::Train(a) => train(&a, seed, exec),
        Command::Classify(a) => classify(&a, seed.unwrap_or(0), exec),
        Command::Evaluate(a) => evaluate(&a, seed.unwrap_or(0), exec),
        Command::Anomaly(a) => anomaly(&a, seed.unwrap_or(0), exec),
        Command::Efficiency(a) => efficiency(&a, exec),
        Command::Experiment(a) => experiment(&a, seed, exec),
        Command::Heatmap(a) => heatmap_cmd(&a, seed.unwrap_or(0)),
        Command::Sample(a) => sample_cmd(&a, seed.unwrap_or(0), exec),
        Command::FitPsychometric(a) => fit_psychometric_cmd(&a, seed),
        Command::TuringReport(a) => turing_report(&a, seed),
        Command::Serve(a) => serve(&a, seed),
    }
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os("GENCLASS_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".genclass-cache"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(rows)
}

/// `<path>.config.json`, for commands whose output is a single file.
fn sibling_config(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

fn write_run_config(path: &Path, command: &str, seed: Option<u64>, args: &impl Serialize, extra: Value) -> Result<()> {
    write_json(
        path,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "seed": seed,
            "args": args,
            "resolved": extra,
        }),
    )
}

/// The path itself if it exists, otherwise the same relative path inside
/// the checkpoint cache.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    let cached = cache_dir().join(path);
    if path.is_relative() && cached.exists() {
        return Ok(cached);
    }
    Err(genclass::Error::Checkpoint(format!("{} not found", path.display())).into())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let p = resolve_checkpoint(path)?;
    Checkpoint::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn collect_images(input: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(input).with_context(|| format!("input {}", input.display()))?;
    if meta.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![input.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            {
                out.push(p);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        bail!(genclass::Error::InsufficientData(format!("no images under {}", input.display())));
    }
    Ok(out)
}

fn class_index(ckpt: &Checkpoint, name: &str) -> Result<usize> {
    ckpt.class_names
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| {
            genclass::Error::InvalidArgument(format!("unknown class {name:?}; known: {}", ckpt.class_names.join(", "))).into()
        })
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| genclass::Error::Config(format!("expected KEY=VALUE, got {s:?}")).into())
}

fn gen_toy(a: &GenToyArgs, seed: u64) -> Result<Value> {
    let mut spec = ToyDatasetSpec::new(a.k, a.n, seed)?;
    spec.image_size = a.size;
    let mut manifest = generate_toy_dataset(&spec, &a.out)?;
    let names = spec.class_names();
    let mut held = Vec::new();
    for h in &a.held_out {
        let name = match h.parse::<usize>() {
            Ok(i) => names.get(i).cloned(),
            Err(_) => names.iter().find(|n| *n == h).cloned(),
        }
        .ok_or_else(|| genclass::Error::InvalidArgument(format!("unknown toy class {h:?}")))?;
        held.push(name);
    }
    if !held.is_empty() {
        manifest = manifest.filtered(|r| r.split == Split::Test || !held.contains(&r.label));
        manifest.save(&a.out.join("manifest.jsonl"))?;
    }
    write_run_config(&a.out.join("gen-toy.config.json"), "gen-toy", Some(seed), a, serde_json::to_value(&spec)?)?;
    Ok(json!({
        "manifest": a.out.join("manifest.jsonl"),
        "classes": names,
        "held_out": held,
        "n_records": manifest.records.len(),
    }))
}

fn train_config(a: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse_kv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = split_kv(o)?;
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Cache key over the manifest bytes and the resolved training config.
fn cache_key(manifest: &Path, cfg: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(b"genclass-train\0");
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(fs::read(manifest)?);
    h.update(cfg.to_kv().as_bytes());
    Ok(hex::encode(&h.finalize()[..12]))
}

fn train(a: &TrainArgs, seed: Option<u64>, exec: Execution) -> Result<Value> {
    let cfg = train_config(a, seed)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (cached, out) = match &a.out {
        Some(p) => (false, p.clone()),
        None => {
            let p = cache_dir().join(format!("model-{}.ckpt", cache_key(&a.manifest, &cfg)?));
            (p.exists() && !a.force, p)
        }
    };
    let ckpt = if cached {
        log::info!("using cached checkpoint {}", out.display());
        Checkpoint::load(&out)?
    } else {
        let (names, train_data, val_data) = training_sets(&manifest)?;
        let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("log.jsonl"));
        if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
        let ckpt = train_checkpoint(&train_data, &val_data, names, &cfg, exec, Some(&mut log as &mut dyn Write))?;
        log.sync_all()?;
        ckpt.save(&out)?;
        fs::write(out.with_extension("cfg"), cfg.to_kv())?;
        ckpt
    };
    Ok(json!({
        "checkpoint": out,
        "cached": cached,
        "classes": ckpt.class_names,
        "steps": ckpt.step,
        "final_loss": ckpt.metadata.get("final_loss"),
        "final_val_loss": ckpt.metadata.get("final_val_loss"),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifyRow {
    path: String,
    predicted: String,
    predicted_index: usize,
    confidence_raw: f64,
    per_class_mean_error: Vec<f64>,
    draws_used: usize,
}

fn classify(a: &ClassifyArgs, seed: u64, exec: Execution) -> Result<Value> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = a.classifier.config(seed)?;
    let paths = collect_images(&a.input)?;
    let images = paths
        .iter()
        .map(|p| load_image(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let results = classify_items(&ckpt, &images, &cfg, exec)?;
    let rows: Vec<ClassifyRow> = paths
        .iter()
        .zip(&results)
        .map(|(p, r)| ClassifyRow {
            path: p.display().to_string(),
            predicted: ckpt.class_names[r.predicted_class].clone(),
            predicted_index: r.predicted_class,
            confidence_raw: r.confidence_raw,
            per_class_mean_error: r.per_class_mean_error.clone(),
            draws_used: r.draws_used,
        })
        .collect();
    write_jsonl(&a.out, &rows)?;
    write_run_config(
        &sibling_config(&a.out),
        "classify",
        Some(seed),
        a,
        json!({ "classifier": cfg.to_kv(), "class_names": ckpt.class_names }),
    )?;
    Ok(json!({ "out": a.out, "n_items": rows.len() }))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    path: String,
    label: String,
    predicted: String,
    correct: bool,
    confidence_raw: f64,
    /// Raw confidence divided by the largest raw confidence of the run.
    confidence: f64,
    draws_used: usize,
}

fn evaluate(a: &EvaluateArgs, seed: u64, exec: Execution) -> Result<Value> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = a.classifier.config(seed)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let records = manifest.split(a.split.into());
    if records.is_empty() {
        bail!(genclass::Error::InsufficientData(format!("{:?} split is empty", a.split)));
    }
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        labels.push(class_index(&ckpt, &r.label)?);
        images.push(manifest.load_record(r)?);
    }
    let results = classify_items(&ckpt, &images, &cfg, exec)?;
    let preds: Vec<usize> = results.iter().map(|r| r.predicted_class).collect();
    let metrics = metrics_report(&preds, &labels, ckpt.class_names.len())?;
    let raw: Vec<f64> = results.iter().map(|r| r.confidence_raw).collect();
    let norm = normalize_confidences(&raw)?;
    let scores: Vec<ScoreRow> = records
        .iter()
        .zip(&results)
        .zip(&norm.values)
        .map(|((rec, r), &c)| ScoreRow {
            path: rec.path.clone(),
            label: rec.label.clone(),
            predicted: ckpt.class_names[r.predicted_class].clone(),
            correct: ckpt.class_names[r.predicted_class] == rec.label,
            confidence_raw: r.confidence_raw,
            confidence: c,
            draws_used: r.draws_used,
        })
        .collect();
    let mean_draws = results.iter().map(|r| r.draws_used as f64).sum::<f64>() / results.len() as f64;
    write_json(
        &a.out.join("metrics.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "class_names": ckpt.class_names,
            "split": a.split,
            "n_items": results.len(),
            "mean_draws_used": mean_draws,
            "metrics": metrics,
        }),
    )?;
    write_jsonl(&a.out.join("scores.jsonl"), &scores)?;
    write_run_config(
        &a.out.join("evaluate.config.json"),
        "evaluate",
        Some(seed),
        a,
        json!({ "classifier": cfg.to_kv(), "class_names": ckpt.class_names }),
    )?;
    Ok(json!({
        "out": a.out,
        "balanced_accuracy": metrics.balanced_accuracy,
        "accuracy": metrics.accuracy,
        "mean_draws_used": mean_draws,
    }))
}

fn apply_overrides(spec: &mut ExperimentSpec, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = split_kv(o)?;
        spec.set(k, v, Path::new(""))?;
    }
    Ok(())
}

fn anomaly(a: &AnomalyArgs, seed: u64, exec: Execution) -> Result<Value> {
    let mut spec = ExperimentSpec::new(ExperimentKind::Anomaly, &a.manifest, &a.out);
    spec.held_out_class = Some(a.held_out.clone());
    spec.checkpoint = a.checkpoint.clone();
    spec.seeds = vec![seed];
    spec.classifier = a.classifier.config(seed)?;
    apply_overrides(&mut spec, &a.overrides)?;
    let outcome = run_experiment(&spec, exec)?;
    let r = &outcome.report["result"];
    Ok(json!({
        "out": a.out,
        "auc": r["anomaly"]["auc"],
        "baseline_auc": r["baseline_auc"],
        "baseline_gap_auc": r["baseline_gap_auc"],
    }))
}

fn efficiency(a: &EfficiencyArgs, exec: Execution) -> Result<Value> {
    let mut spec = ExperimentSpec::new(ExperimentKind::Efficiency, &a.manifest, &a.out);
    spec.n_per_class = a.n_per_class.clone();
    spec.set("seeds", &a.seeds, Path::new(""))?;
    spec.classifier = a.classifier.config(spec.seeds[0])?;
    apply_overrides(&mut spec, &a.overrides)?;
    let outcome = run_experiment(&spec, exec)?;
    Ok(json!({ "out": a.out, "points": outcome.report["result"]["points"].as_array().map_or(0, Vec::len) }))
}

fn experiment(a: &ExperimentArgs, seed: Option<u64>, exec: Execution) -> Result<Value> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let base = a.spec.parent().unwrap_or(Path::new(""));
    let mut spec = ExperimentSpec::parse(&text, base)?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    let outcome = run_experiment(&spec, exec)?;
    Ok(json!({
        "out": spec.output_dir,
        "kind": spec.kind.name(),
        "n_curve_rows": outcome.curves.len(),
    }))
}

fn heatmap_cmd(a: &HeatmapArgs, seed: u64) -> Result<Value> {
    if !(0.0..=1.0).contains(&a.quantile) {
        bail!(genclass::Error::InvalidArgument(format!("quantile {} outside [0, 1]", a.quantile)));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model(true)?;
    let s = ckpt.noise_schedule()?;
    let image = load_image(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let k = ckpt.class_names.len();
    let classes: Vec<usize> = (0..k).collect();
    let tensors = mean_error_tensors(&image, &classes, &model, &ckpt.codec, &s, a.n, seed)?;
    let errors: Vec<f64> = tensors.iter().map(|t| t.mean_squared_error).collect();
    let predicted = errors
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .expect("at least one class");
    let deltas: BTreeMap<usize, _> = tensors.into_iter().map(|t| (t.class_index, t.delta)).collect();
    let adjusted = delta_adjust(&deltas, predicted)?;
    let targets: Vec<usize> = if a.target == "all" {
        classes
    } else {
        vec![class_index(&ckpt, &a.target)?]
    };
    fs::create_dir_all(&a.out)?;
    let mut entries = Vec::new();
    for t in targets {
        let name = &ckpt.class_names[t];
        let h = heatmap(&adjusted[&t], &ckpt.codec, predicted, t)?;
        let max_abs = h.values.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let vis = if max_abs > 0.0 { h.values.scale(1.0 / max_abs) } else { h.values.clone() };
        let heat_file = format!("heatmap_{name}.png");
        let overlay_file = format!("overlay_{name}.png");
        save_image(&vis, &a.out.join(&heat_file))?;
        let (ov, marked) = overlay(&image, &h, a.quantile)?;
        save_image(&ov, &a.out.join(&overlay_file))?;
        entries.push(json!({
            "class": name,
            "heatmap": heat_file,
            "overlay": overlay_file,
            "max_abs": max_abs,
            "n_marked": marked,
        }));
    }
    write_json(
        &a.out.join("heatmap.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "input": a.input,
            "class_names": ckpt.class_names,
            "predicted": ckpt.class_names[predicted],
            "predicted_index": predicted,
            "per_class_mean_error": errors,
            "n": a.n,
            "quantile": a.quantile,
            "targets": entries,
        }),
    )?;
    write_run_config(&a.out.join("heatmap.config.json"), "heatmap", Some(seed), a, Value::Null)?;
    Ok(json!({ "out": a.out, "predicted": ckpt.class_names[predicted] }))
}

fn sample_cmd(a: &SampleArgs, seed: u64, exec: Execution) -> Result<Value> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model(true)?;
    let s = ckpt.noise_schedule()?;
    let class = class_index(&ckpt, &a.class)?;
    let cond = ConditioningMatrix::one_hot(class, model.conditioning_layout())?;
    let images = exec.map_range(a.n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        sample(&cond, a.steps, &model, &s, &ckpt.codec, &mut rng)
    });
    let mut files = Vec::with_capacity(a.n);
    for (i, img) in images.into_iter().enumerate() {
        let file = format!("sample_{}_{i:03}.png", a.class);
        save_image(&img?, &a.out.join(&file))?;
        files.push(file);
    }
    write_run_config(&a.out.join("sample.config.json"), "sample", Some(seed), a, Value::Null)?;
    Ok(json!({ "out": a.out, "files": files }))
}

#[derive(Debug, Deserialize)]
struct ScoreInput {
    confidence: f64,
    correct: bool,
}

fn fit_psychometric_cmd(a: &FitPsychometricArgs, seed: Option<u64>) -> Result<Value> {
    let rows: Vec<ScoreInput> = read_jsonl(&a.input)?;
    let conf: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
    let correct: Vec<bool> = rows.iter().map(|r| r.correct).collect();
    let bins = bin_performance(&conf, &correct, a.bins)?;
    let prior = PriorSpec::default();
    let post = fit_psychometric(&bins, a.gamma, &prior)?;
    write_json(
        &a.out,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "n_trials": rows.len(),
            "gamma": a.gamma,
            "grid": {
                "prior": prior,
                "m": post.m_grid,
                "w": post.w_grid,
                "lambda": post.lambda_grid,
            },
            "map": post.map_estimate,
            "threshold80_map": post.threshold80_map(),
            "ci95": {
                "m": post.ci95_m,
                "w": post.ci95_w,
                "lambda": post.ci95_lambda,
                "threshold80": post.ci95_threshold80,
            },
            "marginals": {
                "m": post.marginal_m,
                "w": post.marginal_w,
                "lambda": post.marginal_lambda,
            },
            "kl_from_prior": post.kl_from_prior(),
            "width_unidentifiable": post.width_unidentifiable,
            "bins": post.bins,
        }),
    )?;
    write_run_config(&sibling_config(&a.out), "fit-psychometric", seed, a, Value::Null)?;
    Ok(json!({
        "out": a.out,
        "m": post.map_estimate.m,
        "w": post.map_estimate.w,
        "lambda": post.map_estimate.lambda,
    }))
}

fn turing_report(a: &TuringReportArgs, seed: Option<u64>) -> Result<Value> {
    let judgments: Vec<Judgment> = read_jsonl(&a.input)?;
    let report = turing_metrics(&judgments)?;
    write_json(&a.out, &json!({ "schema_version": SCHEMA_VERSION, "report": report }))?;
    write_run_config(&sibling_config(&a.out), "turing-report", seed, a, Value::Null)?;
    Ok(json!({
        "out": a.out,
        "n": report.n,
        "accuracy": report.accuracy,
        "ci95": report.ci95,
    }))
}

fn serve(a: &ServeArgs, seed: Option<u64>) -> Result<Value> {
    let store = genclass_service::Store::open(&a.data_dir, &a.image_root)?;
    write_run_config(&a.data_dir.join("serve.config.json"), "serve", seed, a, Value::Null)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    eprintln!("listening on http://{}", a.addr);
    rt.block_on(genclass_service::serve(a.addr, Arc::new(store)))
        .map_err(|e| anyhow!(e).context(format!("serving on {}", a.addr)))?;
    Ok(json!({ "stopped": true }))
}
