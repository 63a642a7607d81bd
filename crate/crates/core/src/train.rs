//! Denoiser training: AdamW with linear warmup, EMA weights, validation
//! logging and fail-fast divergence handling.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::conditioning::{ConditioningLayout, ConditioningMatrix};
use crate::data::augment::{augment, AugmentationSpec};
use crate::denoiser::ResidualMlp;
use crate::diffusion::{assemble_loss_batch, sample_training_draws, TrainingExample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::LatentTensor;

/// Rows per gradient chunk; fixed so results do not depend on thread count.
const GRAD_CHUNK: usize = 16;
const VAL_SEED: u64 = 0x7661_6c69_6461_7465;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to 10% after warmup.
    pub cosine_decay: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub image_size: usize,
    pub timesteps: usize,
    pub schedule_kind: ScheduleKind,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// 0 selects the identity codec; otherwise the number of PCA components.
    pub latent_dim: usize,
    pub val_interval: usize,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 200,
            cosine_decay: true,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ema_decay: 0.999,
            image_size: 32,
            timesteps: 1000,
            schedule_kind: ScheduleKind::default(),
            hidden: 256,
            blocks: 2,
            time_dim: 32,
            latent_dim: 0,
            val_interval: 200,
            seed: 0,
            augmentation: AugmentationSpec {
                color_jitter: crate::data::ColorJitter::NONE,
                ..AugmentationSpec::default()
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
}

impl TrainConfig {
    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let aug = &mut self.augmentation;
        match key {
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "cosine_decay" => self.cosine_decay = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "T" => self.timesteps = parse(key, v)?,
            "schedule_kind" => self.schedule_kind = ScheduleKind::from_name(v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "time_dim" => self.time_dim = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "val_interval" => self.val_interval = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "flips" => aug.flips = parse(key, v)?,
            "rotation_degrees" => aug.rotation_degrees = parse(key, v)?,
            "brightness" => aug.color_jitter.brightness = parse(key, v)?,
            "contrast" => aug.color_jitter.contrast = parse(key, v)?,
            "saturation" => aug.color_jitter.saturation = parse(key, v)?,
            "hue" => aug.color_jitter.hue = parse(key, v)?,
            "mixup_alpha" => aug.mixup_alpha = parse(key, v)?,
            "mixup_prob" => aug.mixup_prob = parse(key, v)?,
            "policy_augment" => aug.policy_augment = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Serializes every key in `parse_kv` syntax.
    pub fn to_kv(&self) -> String {
        let a = &self.augmentation;
        let j = &a.color_jitter;
        let mut out = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("cosine_decay", self.cosine_decay.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("image_size", self.image_size.to_string()),
            ("T", self.timesteps.to_string()),
            ("schedule_kind", self.schedule_kind.name().to_string()),
            ("hidden", self.hidden.to_string()),
            ("blocks", self.blocks.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("val_interval", self.val_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("flips", a.flips.to_string()),
            ("rotation_degrees", a.rotation_degrees.to_string()),
            ("brightness", j.brightness.to_string()),
            ("contrast", j.contrast.to_string()),
            ("saturation", j.saturation.to_string()),
            ("hue", j.hue.to_string()),
            ("mixup_alpha", a.mixup_alpha.to_string()),
            ("mixup_prob", a.mixup_prob.to_string()),
            ("policy_augment", a.policy_augment.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if self.timesteps == 0 || self.image_size == 0 || self.hidden == 0 {
            return Err(Error::Config("T, image_size and hidden must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be positive and even".into()));
        }
        self.augmentation.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.timesteps, self.schedule_kind)
    }

    /// Learning rate at a 0-based optimizer step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay || self.steps <= self.warmup_steps {
            return self.lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.lr * (0.1 + 0.9 * cos)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// Labelled pixel-space images.
pub type LabelledImages = [(LatentTensor, usize)];

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ResidualMlp,
    pub ema: ResidualMlp,
    pub log: Vec<LogEntry>,
}

/// AdamW moment buffers.
#[derive(Debug, Clone)]
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + Self::EPS) + weight_decay * params[i]);
        }
    }
}

/// In-place EMA update: ema = decay * ema + (1 - decay) * params.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Loss and gradient over a batch, computed in fixed-size row chunks so the
/// sum is identical under sequential and parallel execution.
fn batch_loss_and_grad(
    model: &ResidualMlp,
    examples: &[TrainingExample],
    draws: &[crate::diffusion::TrainingDraw],
    s: &NoiseSchedule,
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    let lb = assemble_loss_batch(examples, draws, s)?;
    let n = examples.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(GRAD_CHUNK).map(|a| (a, (a + GRAD_CHUNK).min(n))).collect();
    let parts = exec.map(&chunks, |_, &(a, b)| {
        let (l, g) = model.loss_and_grad(
            lb.z_t.slice(s![a..b, ..]),
            &lb.t[a..b],
            lb.cond.slice(s![a..b, ..]),
            lb.eps.slice(s![a..b, ..]),
            &lb.weights[a..b],
        );
        (l * (b - a) as f64, g, (b - a) as f64)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for (l, g, rows) in parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v * rows;
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Validation loss with draws fixed by a constant seed, so values are
/// comparable across steps.
pub fn validation_loss(
    model: &ResidualMlp,
    data: &LabelledImages,
    codec: &LatentCodec,
    s: &NoiseSchedule,
    layout: ConditioningLayout,
    exec: Execution,
) -> Result<f64> {
    let examples = data
        .iter()
        .map(|(img, c)| {
            Ok(TrainingExample {
                z0: codec.encode(img)?,
                condition: ConditioningMatrix::one_hot(*c, layout)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED);
    let draws = sample_training_draws(&examples, s, &mut rng);
    Ok(batch_loss_and_grad(model, &examples, &draws, s, exec)?.0)
}

/// Trains `model` on labelled pixel-space images. Each step draws a batch
/// with replacement, augments it (mixup partners come from the same batch),
/// encodes through `codec` and takes one AdamW step.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: ResidualMlp,
    train_data: &LabelledImages,
    val_data: &LabelledImages,
    codec: &LatentCodec,
    cfg: &TrainConfig,
    exec: Execution,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let s = cfg.schedule()?;
    let layout = model.arch().conditioning;
    let mut model = model;
    let mut ema = model.clone();
    let mut opt = AdamW::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let conds: Vec<ConditioningMatrix> = (0..layout.cols.max(1))
        .map(|c| ConditioningMatrix::one_hot(c, layout))
        .collect::<Result<_>>()?;

    let mut emit = |entry: LogEntry, log: &mut Vec<LogEntry>| -> Result<()> {
        if let Some(w) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(entry);
        Ok(())
    };

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train_data.len())).collect();
        let mut examples = Vec::with_capacity(picks.len());
        for &i in &picks {
            let (img, c) = &train_data[i];
            let partner = if cfg.augmentation.mixup_alpha > 0.0 && cfg.augmentation.mixup_prob > 0.0 {
                let j = picks[rng.random_range(0..picks.len())];
                let (pimg, pc) = &train_data[j];
                Some((pimg, &conds[*pc]))
            } else {
                None
            };
            let (aug, cond, _) = augment(img, &conds[*c], partner, &cfg.augmentation, &mut rng)?;
            examples.push(TrainingExample {
                z0: codec.encode(&aug)?,
                condition: cond,
            });
        }
        let draws = sample_training_draws(&examples, &s, &mut rng);
        let (loss, mut grad) = batch_loss_and_grad(&model, &examples, &draws, &s, exec)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: step + 1, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        opt.step(model.params_mut(), &grad, cfg.lr_at(step), cfg.weight_decay);
        ema_update(ema.params_mut(), model.params(), cfg.ema_decay);

        let done = step + 1;
        let at_interval = cfg.val_interval > 0 && done % cfg.val_interval == 0;
        if at_interval || done == cfg.steps {
            let val_loss = if val_data.is_empty() {
                None
            } else {
                Some(validation_loss(&ema, val_data, codec, &s, layout, exec)?)
            };
            log::info!("step {done} loss {loss:.5} val_loss {val_loss:?}");
            emit(
                LogEntry {
                    step: done,
                    loss,
                    val_loss,
                },
                &mut log,
            )?;
        }
    }
    Ok(TrainOutcome { model, ema, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::tensor::Space;

    fn tiny_arch(classes: usize) -> ArchConfig {
        ArchConfig {
            channels: 1,
            height: 4,
            width: 4,
            hidden: 32,
            blocks: 1,
            time_dim: 8,
            conditioning: ConditioningLayout::for_classes(classes),
        }
    }

    fn tiny_data(n: usize) -> Vec<(LatentTensor, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|i| {
                let v = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                (LatentTensor::from_vec((1, 4, 4), v, Space::Pixel).unwrap(), i % 2)
            })
            .collect()
    }

    fn quiet_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 20,
            warmup_steps: 10,
            image_size: 4,
            val_interval: 0,
            timesteps: 100,
            augmentation: AugmentationSpec::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = TrainConfig::parse_kv("steps=7\nlr=0.5 # comment\nT=50\nschedule_kind=cosine\nmixup_alpha=0.2\n").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.timesteps, 50);
        assert_eq!(TrainConfig::parse_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(TrainConfig::parse_kv("bogus=1").is_err());
        assert!(TrainConfig::parse_kv("steps=x").is_err());
    }

    #[test]
    fn zero_steps_leaves_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ResidualMlp::new(tiny_arch(2), &mut rng).unwrap();
        let out = train(m.clone(), &tiny_data(4), &[], &LatentCodec::Identity, &quiet_cfg(0), Execution::Sequential, None).unwrap();
        assert_eq!(out.model.params(), m.params());
        assert_eq!(out.ema.params(), m.params());
    }

    #[test]
    fn ema_decay_zero_tracks_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ResidualMlp::new(tiny_arch(2), &mut rng).unwrap();
        let cfg = TrainConfig {
            ema_decay: 0.0,
            ..quiet_cfg(3)
        };
        let out = train(m, &tiny_data(4), &[], &LatentCodec::Identity, &cfg, Execution::Sequential, None).unwrap();
        assert_eq!(out.model.params(), out.ema.params());
    }

    #[test]
    fn overfits_small_dataset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ResidualMlp::new(tiny_arch(2), &mut rng).unwrap();
        let data = tiny_data(10);
        let s = NoiseSchedule::build(100, ScheduleKind::default()).unwrap();
        let layout = m.arch().conditioning;
        let before = validation_loss(&m, &data, &LatentCodec::Identity, &s, layout, Execution::Sequential).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            ema_decay: 0.0,
            ..quiet_cfg(400)
        };
        let out = train(m, &data, &[], &LatentCodec::Identity, &cfg, Execution::Sequential, None).unwrap();
        let after = validation_loss(&out.model, &data, &LatentCodec::Identity, &s, layout, Execution::Sequential).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn divergence_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ResidualMlp::new(tiny_arch(2), &mut rng).unwrap();
        m.params_mut()[0] = f64::NAN;
        let err = train(m, &tiny_data(4), &[], &LatentCodec::Identity, &quiet_cfg(2), Execution::Sequential, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ResidualMlp::new(tiny_arch(2), &mut rng).unwrap();
        let data = tiny_data(8);
        let cfg = TrainConfig {
            batch_size: 40,
            ..quiet_cfg(3)
        };
        let a = train(m.clone(), &data, &data, &LatentCodec::Identity, &cfg, Execution::Sequential, None).unwrap();
        let b = train(m, &data, &data, &LatentCodec::Identity, &cfg, Execution::Parallel, None).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.log, b.log);
    }
}
