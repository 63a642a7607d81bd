//! Experiment runners: in-domain, anomaly, low-data efficiency and domain
//! shift. Each run writes `report.json`, `curves.jsonl` (rows of
//! `{x, y, series}`) and a frozen `experiment.cfg` into the output directory.
//!
//! Spec files are `key=value` lines (`#` starts a comment):
//!
//! ```text
//! kind=efficiency            # in_domain | anomaly | efficiency | domain_shift
//! train_manifest=data/manifest.jsonl
//! test_manifest=other/manifest.jsonl   # domain_shift only; defaults to train_manifest
//! checkpoint=model.ckpt      # loaded if present, otherwise trained and saved here
//! seeds=0..=4                # comma list, a..b or a..=b
//! n_per_class=10,20          # efficiency only
//! held_out_class=bilobed     # anomaly only
//! output_dir=runs/eff
//! train.steps=2000           # any training key, prefixed with train.
//! classify.max_iters=500     # any classifier key, prefixed with classify.
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{ClassificationResult, ClassifierConfig, DiffusionClassifier};
use crate::codec::{LatentCodec, PcaCodec};
use crate::conditioning::ConditioningLayout;
use crate::data::{DatasetManifest, Split};
use crate::denoiser::{ArchConfig, ResidualMlp};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{metrics_report, MetricsReport};
use crate::evaluation::roc::{roc_auc, AnomalyReport};
use crate::exec::Execution;
use crate::tensor::LatentTensor;
use crate::train::{train, TrainConfig};
use crate::uncertainty::confidence::normalize_confidences;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    InDomain,
    Anomaly,
    Efficiency,
    DomainShift,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::InDomain => "in_domain",
            ExperimentKind::Anomaly => "anomaly",
            ExperimentKind::Efficiency => "efficiency",
            ExperimentKind::DomainShift => "domain_shift",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "in_domain" => ExperimentKind::InDomain,
            "anomaly" => ExperimentKind::Anomaly,
            "efficiency" => ExperimentKind::Efficiency,
            "domain_shift" => ExperimentKind::DomainShift,
            other => return Err(Error::Config(format!("unknown experiment kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub n_per_class: Vec<usize>,
    pub held_out_class: Option<String>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seeds {v:?}"));
    if let Some((a, b)) = v.split_once("..=") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..=b).collect());
    }
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    v.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, train_manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            train_manifest: train_manifest.into(),
            test_manifest: None,
            checkpoint: None,
            seeds: vec![0],
            n_per_class: Vec::new(),
            held_out_class: None,
            output_dir: output_dir.into(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }

    /// Parses a spec file. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kind = None;
        let mut train_manifest = None;
        let mut output_dir = None;
        let mut rest = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "kind" => kind = Some(ExperimentKind::from_name(v)?),
                "train_manifest" => train_manifest = Some(base.join(v)),
                "output_dir" => output_dir = Some(base.join(v)),
                _ => rest.push((k.to_string(), v.to_string())),
            }
        }
        let missing = |k: &str| Error::Config(format!("missing key {k}"));
        let mut spec = Self::new(
            kind.ok_or_else(|| missing("kind"))?,
            train_manifest.ok_or_else(|| missing("train_manifest"))?,
            output_dir.ok_or_else(|| missing("output_dir"))?,
        );
        for (k, v) in rest {
            spec.set(&k, &v, base)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        match key {
            "test_manifest" => self.test_manifest = Some(base.join(v)),
            "checkpoint" => self.checkpoint = Some(base.join(v)),
            "seeds" => self.seeds = parse_seeds(v)?,
            "n_per_class" => self.n_per_class = parse_list(key, v)?,
            "held_out_class" => self.held_out_class = Some(v.to_string()),
            k => {
                if let Some(t) = k.strip_prefix("train.") {
                    self.train.set(t, v)?;
                } else if let Some(c) = k.strip_prefix("classify.") {
                    self.classifier.set(c, v)?;
                } else {
                    return Err(Error::Config(format!("unknown experiment key {k:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        match self.kind {
            ExperimentKind::Efficiency if self.n_per_class.is_empty() => {
                Err(Error::Config("efficiency needs n_per_class".into()))
            }
            ExperimentKind::Anomaly if self.held_out_class.is_none() => {
                Err(Error::Config("anomaly needs held_out_class".into()))
            }
            _ => {
                self.train.validate()?;
                self.classifier.validate()
            }
        }
    }

    /// The resolved spec in `parse` syntax, with absolute paths.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind={}", self.kind.name());
        let _ = writeln!(out, "train_manifest={}", self.train_manifest.display());
        if let Some(p) = &self.test_manifest {
            let _ = writeln!(out, "test_manifest={}", p.display());
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint={}", p.display());
        }
        let _ = writeln!(out, "seeds={}", join(&self.seeds));
        if !self.n_per_class.is_empty() {
            let _ = writeln!(out, "n_per_class={}", join(&self.n_per_class));
        }
        if let Some(h) = &self.held_out_class {
            let _ = writeln!(out, "held_out_class={h}");
        }
        let _ = writeln!(out, "output_dir={}", self.output_dir.display());
        for line in self.train.to_kv().lines() {
            let _ = writeln!(out, "train.{line}");
        }
        for line in self.classifier.to_kv().lines() {
            let _ = writeln!(out, "classify.{line}");
        }
        out
    }
}

/// One plot-ready curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Trains a denoiser (and the PCA codec when `cfg.latent_dim > 0`) on
/// labelled images whose indices refer to `class_names`.
pub fn train_checkpoint(
    train_data: &[(LatentTensor, usize)],
    val_data: &[(LatentTensor, usize)],
    class_names: Vec<String>,
    cfg: &TrainConfig,
    exec: Execution,
    log_sink: Option<&mut dyn std::io::Write>,
) -> Result<Checkpoint> {
    let first = train_data
        .first()
        .ok_or_else(|| Error::InsufficientData("training set is empty".into()))?;
    let image_shape = first.0.shape();
    let codec = if cfg.latent_dim > 0 {
        let images: Vec<LatentTensor> = train_data.iter().map(|(x, _)| x.clone()).collect();
        LatentCodec::Pca(PcaCodec::fit(&images, cfg.latent_dim)?)
    } else {
        LatentCodec::Identity
    };
    let latent = codec.latent_shape(image_shape);
    let arch = ArchConfig {
        channels: latent.0,
        height: latent.1,
        width: latent.2,
        hidden: cfg.hidden,
        blocks: cfg.blocks,
        time_dim: cfg.time_dim,
        conditioning: ConditioningLayout::for_classes(class_names.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ResidualMlp::new(arch, &mut rng)?;
    let outcome = train(model, train_data, val_data, &codec, cfg, exec, log_sink)?;
    let last = outcome.log.last();
    Ok(Checkpoint {
        arch,
        schedule_steps: cfg.timesteps,
        schedule: cfg.schedule_kind,
        step: cfg.steps,
        class_names,
        codec,
        params: outcome.model.params().to_vec(),
        ema_params: outcome.ema.params().to_vec(),
        metadata: serde_json::json!({
            "train_config": cfg.to_kv(),
            "final_loss": last.map(|l| l.loss),
            "final_val_loss": last.and_then(|l| l.val_loss),
        }),
    })
}

/// Classifies `items` with the EMA weights of `ckpt`.
pub fn classify_items(
    ckpt: &Checkpoint,
    images: &[LatentTensor],
    cfg: &ClassifierConfig,
    exec: Execution,
) -> Result<Vec<ClassificationResult>> {
    let model = ckpt.model(true)?;
    let s = ckpt.noise_schedule()?;
    let clf = DiffusionClassifier::new(&model, &ckpt.codec, &s, ckpt.class_names.len())?;
    clf.classify_batch(images, cfg, exec)
}

/// Test images of `manifest` relabelled into `class_names` order. Labels
/// unknown to `class_names` map to `None`.
fn labelled_split(manifest: &DatasetManifest, split: Split, class_names: &[String]) -> Result<Vec<(LatentTensor, Option<usize>)>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| Ok((manifest.load_record(r)?, class_names.iter().position(|c| *c == r.label))))
        .collect()
}

/// Train/val images for the classes that occur in the training split, with
/// the sorted class names their labels index into.
pub fn training_sets(manifest: &DatasetManifest) -> Result<(Vec<String>, Vec<(LatentTensor, usize)>, Vec<(LatentTensor, usize)>)> {
    let mut names: Vec<String> = manifest.split(Split::Train).iter().map(|r| r.label.clone()).collect();
    names.sort();
    names.dedup();
    let load = |split| -> Result<Vec<(LatentTensor, usize)>> {
        labelled_split(manifest, split, &names)?
            .into_iter()
            .map(|(x, c)| {
                c.map(|c| (x, c))
                    .ok_or_else(|| Error::InsufficientData("validation class absent from training split".into()))
            })
            .collect()
    };
    let train = load(Split::Train)?;
    let val = load(Split::Val)?;
    Ok((names, train, val))
}

fn obtain_checkpoint(spec: &ExperimentSpec, manifest: &DatasetManifest, exec: Execution) -> Result<Checkpoint> {
    if let Some(p) = &spec.checkpoint {
        if p.exists() {
            return Checkpoint::load(p);
        }
    }
    let (names, train_data, val_data) = training_sets(manifest)?;
    let ckpt = train_checkpoint(&train_data, &val_data, names, &spec.train, exec, None)?;
    let path = spec
        .checkpoint
        .clone()
        .unwrap_or_else(|| spec.output_dir.join("model.ckpt"));
    ckpt.save(&path)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRun {
    pub metrics: MetricsReport,
    pub mean_draws_used: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

fn evaluate_test_split(
    ckpt: &Checkpoint,
    test: &DatasetManifest,
    cfg: &ClassifierConfig,
    exec: Execution,
) -> Result<ClassificationRun> {
    let items = labelled_split(test, Split::Test, &ckpt.class_names)?;
    if items.is_empty() {
        return Err(Error::InsufficientData("test split is empty".into()));
    }
    let mut images = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for ((x, c), r) in items.into_iter().zip(test.split(Split::Test)) {
        let c = c.ok_or_else(|| {
            Error::InsufficientData(format!("test label {:?} unknown to the model", r.label))
        })?;
        images.push(x);
        labels.push(c);
    }
    let results = classify_items(ckpt, &images, cfg, exec)?;
    let predictions: Vec<usize> = results.iter().map(|r| r.predicted_class).collect();
    let draws = results.iter().map(|r| r.draws_used as f64).sum::<f64>() / results.len() as f64;
    Ok(ClassificationRun {
        metrics: metrics_report(&predictions, &labels, ckpt.class_names.len())?,
        mean_draws_used: draws,
        predictions,
        labels,
    })
}

/// Pixel-space nearest-centroid scores: the negated distance to the nearest
/// class centroid, and the gap between the two nearest centroid distances.
pub fn pixel_centroid_scores(train: &[(LatentTensor, usize)], k: usize, test: &[LatentTensor]) -> Result<Vec<(f64, f64)>> {
    let p = train
        .first()
        .ok_or_else(|| Error::InsufficientData("no training images for centroids".into()))?
        .0
        .len();
    let mut centroids = vec![vec![0.0; p]; k];
    let mut counts = vec![0usize; k];
    for (x, c) in train {
        for (a, v) in centroids[*c].iter_mut().zip(x.as_slice()) {
            *a += v;
        }
        counts[*c] += 1;
    }
    for (cent, &n) in centroids.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::InsufficientData("class without training images".into()));
        }
        cent.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(test
        .iter()
        .map(|x| {
            let mut d: Vec<f64> = centroids
                .iter()
                .map(|c| x.as_slice().iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            let gap = if d.len() > 1 { d[1] - d[0] } else { 0.0 };
            (-d[0], gap)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyExperimentReport {
    pub held_out_class: String,
    pub anomaly: AnomalyReport,
    /// AUC of the negated nearest-centroid pixel distance.
    pub baseline_auc: f64,
    /// AUC of the gap between the two nearest pixel centroids.
    pub baseline_gap_auc: f64,
    pub normal_metrics: MetricsReport,
}

/// Scores every test record of `manifest` by normalized model confidence;
/// normals are the positive class.
pub fn anomaly_experiment(
    manifest: &DatasetManifest,
    held_out: &str,
    ckpt: &Checkpoint,
    cfg: &ClassifierConfig,
    exec: Execution,
) -> Result<AnomalyExperimentReport> {
    if manifest
        .records
        .iter()
        .any(|r| r.label == held_out && r.split != Split::Test)
        || ckpt.class_names.iter().any(|c| c == held_out)
    {
        return Err(Error::HeldOutLeak(held_out.to_string()));
    }
    let test: Vec<(LatentTensor, bool)> = manifest
        .split(Split::Test)
        .into_iter()
        .map(|r| Ok((manifest.load_record(r)?, r.label != held_out)))
        .collect::<Result<_>>()?;
    if !test.iter().any(|(_, n)| !n) {
        return Err(Error::InsufficientData(format!("no test records of class {held_out:?}")));
    }
    let images: Vec<LatentTensor> = test.iter().map(|(x, _)| x.clone()).collect();
    let results = classify_items(ckpt, &images, cfg, exec)?;
    let raw: Vec<f64> = results.iter().map(|r| r.confidence_raw).collect();
    let conf = normalize_confidences(&raw)?.values;
    let split_scores = |scores: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (s, (_, normal)) in scores.iter().zip(&test) {
            if *normal {
                pos.push(*s);
            } else {
                neg.push(*s);
            }
        }
        (pos, neg)
    };
    let (pos, neg) = split_scores(&conf);
    let anomaly = roc_auc(&pos, &neg)?;

    let (_, train_data, _) = training_sets(manifest)?;
    let baseline = pixel_centroid_scores(&train_data, ckpt.class_names.len(), &images)?;
    let (bp, bn) = split_scores(&baseline.iter().map(|b| b.0).collect::<Vec<_>>());
    let (gp, gn) = split_scores(&baseline.iter().map(|b| b.1).collect::<Vec<_>>());

    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in results.iter().zip(manifest.split(Split::Test)) {
        if let Some(c) = ckpt.class_names.iter().position(|c| *c == rec.label) {
            preds.push(r.predicted_class);
            labels.push(c);
        }
    }
    Ok(AnomalyExperimentReport {
        held_out_class: held_out.to_string(),
        anomaly,
        baseline_auc: roc_auc(&bp, &bn)?.auc,
        baseline_gap_auc: roc_auc(&gp, &gn)?.auc,
        normal_metrics: metrics_report(&preds, &labels, ckpt.class_names.len())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub n_per_class: usize,
    pub seeds: Vec<u64>,
    pub balanced_accuracy: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub mean_balanced_accuracy: f64,
    pub std_balanced_accuracy: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outputs of [`run_experiment`], also written to `spec.output_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: serde_json::Value,
    pub curves: Vec<CurveRow>,
}

fn curve(series: &str, pts: impl IntoIterator<Item = (f64, f64)>) -> Vec<CurveRow> {
    pts.into_iter()
        .map(|(x, y)| CurveRow {
            x,
            y,
            series: series.to_string(),
        })
        .collect()
}

fn recall_curve(m: &MetricsReport) -> Vec<CurveRow> {
    curve(
        "per_class_recall",
        m.per_class_recall
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|r| (i as f64, r))),
    )
}

pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(&spec.output_dir)?;
    fs::write(spec.output_dir.join("experiment.cfg"), spec.to_kv())?;
    let manifest = DatasetManifest::load(&spec.train_manifest)?;
    let seed = spec.seeds[0];
    let classifier = ClassifierConfig {
        seed,
        ..spec.classifier.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let single = ExperimentSpec {
        train: train_cfg,
        ..spec.clone()
    };
    let (body, curves) = match spec.kind {
        ExperimentKind::InDomain | ExperimentKind::DomainShift => {
            let ckpt = obtain_checkpoint(&single, &manifest, exec)?;
            let test = match (&spec.kind, &spec.test_manifest) {
                (ExperimentKind::DomainShift, Some(p)) => DatasetManifest::load(p)?,
                _ => manifest.clone(),
            };
            let run = evaluate_test_split(&ckpt, &test, &classifier, exec)?;
            let curves = recall_curve(&run.metrics);
            (
                serde_json::json!({
                    "class_names": ckpt.class_names,
                    "classification": run,
                }),
                curves,
            )
        }
        ExperimentKind::Anomaly => {
            let held = spec.held_out_class.as_deref().expect("validated");
            if manifest.records.iter().any(|r| r.label == held && r.split != Split::Test) {
                return Err(Error::HeldOutLeak(held.to_string()));
            }
            let ckpt = obtain_checkpoint(&single, &manifest, exec)?;
            let report = anomaly_experiment(&manifest, held, &ckpt, &classifier, exec)?;
            let mut curves = curve("roc", report.anomaly.roc.iter().copied());
            for (name, k) in [("kde_normal", &report.anomaly.kde_normal), ("kde_abnormal", &report.anomaly.kde_abnormal)] {
                curves.extend(curve(name, k.x.iter().copied().zip(k.density.iter().copied())));
            }
            (serde_json::to_value(&report)?, curves)
        }
        ExperimentKind::Efficiency => {
            let mut points = Vec::new();
            let mut curves = Vec::new();
            for &n in &spec.n_per_class {
                let mut bal = Vec::new();
                let mut acc = Vec::new();
                for &s in &spec.seeds {
                    let sub = manifest.subsample_split(Split::Train, n, s)?;
                    let (names, tr, va) = training_sets(&sub)?;
                    let cfg = TrainConfig {
                        seed: s,
                        ..spec.train.clone()
                    };
                    let ckpt = train_checkpoint(&tr, &va, names, &cfg, exec, None)?;
                    let ccfg = ClassifierConfig {
                        seed: s,
                        ..spec.classifier.clone()
                    };
                    let run = evaluate_test_split(&ckpt, &sub, &ccfg, exec)?;
                    log::info!("n={n} seed={s} balanced_accuracy={}", run.metrics.balanced_accuracy);
                    curves.push(CurveRow {
                        x: n as f64,
                        y: run.metrics.balanced_accuracy,
                        series: format!("seed_{s}"),
                    });
                    bal.push(run.metrics.balanced_accuracy);
                    acc.push(run.metrics.accuracy);
                }
                let (mb, sb) = mean_std(&bal);
                let (ma, sa) = mean_std(&acc);
                curves.push(CurveRow {
                    x: n as f64,
                    y: mb,
                    series: "mean".into(),
                });
                points.push(EfficiencyPoint {
                    n_per_class: n,
                    seeds: spec.seeds.clone(),
                    balanced_accuracy: bal,
                    accuracy: acc,
                    mean_balanced_accuracy: mb,
                    std_balanced_accuracy: sb,
                    mean_accuracy: ma,
                    std_accuracy: sa,
                });
            }
            (serde_json::json!({ "points": points }), curves)
        }
    };
    let report = serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": spec.kind.name(),
        "result": body,
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(spec.output_dir.join("report.json"), text)?;
    let mut lines = String::new();
    for row in &curves {
        lines.push_str(&serde_json::to_string(row)?);
        lines.push('\n');
    }
    fs::write(spec.output_dir.join("curves.jsonl"), lines)?;
    Ok(ExperimentOutcome { report, curves })
}
