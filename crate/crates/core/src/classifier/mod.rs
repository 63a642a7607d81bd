//! Classification by per-class noise-prediction error.
//!
//! Each draw samples a timestep and a noise tensor, noises the image once and
//! asks the denoiser for its noise prediction under every candidate class.
//! Errors are weighted per draw and accumulated; after a warm-up, classes that
//! a one-sided paired t-test marks as worse than the current best are dropped.

pub mod accumulator;
pub mod mask;
pub mod stats;
pub mod weighting;

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::conditioning::ConditioningMatrix;
use crate::data::augment::{augment_image, AugmentationSpec};
use crate::denoiser::{copy_into_row, NoisePredictor};
use crate::diffusion::forward_marginal;
use crate::error::{invalid, Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

pub use accumulator::{PruneEvent, TrialAccumulator};
pub use mask::{center_mask, channel_mask, masked_squared_error};
pub use stats::paired_t_test;
pub use weighting::{fit_logistic_weights, CalibrationPoint, WeightingStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub min_iters: usize,
    pub max_iters: usize,
    pub p_value: f64,
    pub weighting: WeightingStrategy,
    /// Radius of the central error mask in latent pixels; `None` uses the
    /// whole tensor.
    pub mask_radius: Option<f64>,
    pub seed: u64,
    /// When false every image runs to `max_iters` draws.
    pub pruning: bool,
    /// Draws evaluated per denoiser call. Draw randomness depends only on the
    /// seed and draw index, so this never changes which draws are used.
    pub draw_batch: usize,
    /// Geometric/photometric augmentation applied independently per draw.
    pub inference_augment: Option<AugmentationSpec>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            min_iters: 20,
            max_iters: 2000,
            p_value: 2e-3,
            weighting: WeightingStrategy::CustomPolynomial,
            mask_radius: None,
            seed: 0,
            pruning: true,
            draw_batch: 16,
            inference_augment: None,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_iters < 1 || self.min_iters > self.max_iters {
            return Err(Error::Config(format!(
                "need 1 <= min_iters ({}) <= max_iters ({})",
                self.min_iters, self.max_iters
            )));
        }
        if !(self.p_value > 0.0 && self.p_value < 1.0) {
            return Err(Error::Config(format!("p_value {} outside (0, 1)", self.p_value)));
        }
        if self.draw_batch == 0 {
            return Err(Error::Config("draw_batch must be positive".into()));
        }
        self.weighting.validate()
    }

    /// Sets one option from its `key=value` form. `inference_augment`
    /// accepts `none`, `geometric` or `default`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
        }
        match key {
            "min_iters" => self.min_iters = parse(key, v)?,
            "max_iters" => self.max_iters = parse(key, v)?,
            "p_value" => self.p_value = parse(key, v)?,
            "weighting" => self.weighting = WeightingStrategy::from_name(v)?,
            "mask_radius" => {
                self.mask_radius = match v {
                    "none" => None,
                    r => Some(parse(key, r)?),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "pruning" => self.pruning = parse(key, v)?,
            "draw_batch" => self.draw_batch = parse(key, v)?,
            "inference_augment" => {
                self.inference_augment = match v {
                    "none" => None,
                    "geometric" => Some(AugmentationSpec::geometric()),
                    "default" => Some(AugmentationSpec {
                        mixup_prob: 0.0,
                        policy_augment: false,
                        ..AugmentationSpec::default()
                    }),
                    other => return Err(Error::Config(format!("unknown inference_augment {other:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown classifier key {other:?}"))),
        }
        Ok(())
    }

    /// Name of the inference augmentation preset, for `set` round trips.
    pub fn inference_augment_name(&self) -> &'static str {
        match &self.inference_augment {
            None => "none",
            Some(a) if *a == AugmentationSpec::geometric() => "geometric",
            Some(_) => "default",
        }
    }

    /// Every option in `set` syntax. Learned logistic weights are not
    /// representable and are written by name only.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let radius = self.mask_radius.map_or("none".to_string(), |r| r.to_string());
        for (k, v) in [
            ("min_iters", self.min_iters.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("p_value", self.p_value.to_string()),
            ("weighting", self.weighting.name().to_string()),
            ("mask_radius", radius),
            ("seed", self.seed.to_string()),
            ("pruning", self.pruning.to_string()),
            ("draw_batch", self.draw_batch.to_string()),
            ("inference_augment", self.inference_augment_name().to_string()),
        ] {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

/// Raw per-class errors of one draw, for the listed classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDraw {
    pub t: usize,
    pub eps_seed: u64,
    pub classes: Vec<usize>,
    pub errors: Vec<f64>,
}

impl ErrorDraw {
    fn restricted(&self, classes: &[usize]) -> Vec<f64> {
        classes
            .iter()
            .map(|c| {
                let i = self.classes.iter().position(|x| x == c).expect("draw covers class");
                self.errors[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predicted_class: usize,
    pub confidence_raw: f64,
    pub per_class_mean_error: Vec<f64>,
    pub draws_used: usize,
    pub active_trace: Vec<PruneEvent>,
}

/// Squared masked error of the noise prediction for each listed class, with
/// z_t computed once and shared across classes.
pub fn per_class_errors<M: NoisePredictor + ?Sized>(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    model: &M,
    s: &NoiseSchedule,
    classes: &[usize],
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    z0.ensure_same_shape(eps)?;
    let z_t = forward_marginal(z0, t, eps, s)?;
    let layout = model.conditioning_layout();
    let mut out = Vec::with_capacity(classes.len());
    for &c in classes {
        let cond = ConditioningMatrix::one_hot(c, layout)?;
        let pred = model.predict(&z_t, t, &cond)?;
        out.push(masked_squared_error(eps.as_slice(), pred.as_slice(), mask));
    }
    Ok(out)
}

/// A trained denoiser plus everything needed to classify with it.
pub struct DiffusionClassifier<'a, M: NoisePredictor + ?Sized> {
    pub model: &'a M,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
    pub num_classes: usize,
}

impl<M: NoisePredictor + ?Sized> Clone for DiffusionClassifier<'_, M> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M: NoisePredictor + ?Sized> Copy for DiffusionClassifier<'_, M> {}

impl<'a, M: NoisePredictor + ?Sized> DiffusionClassifier<'a, M> {
    pub fn new(model: &'a M, codec: &'a LatentCodec, schedule: &'a NoiseSchedule, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("classifier needs at least one class"));
        }
        if num_classes > model.conditioning_layout().cols {
            return Err(invalid(format!(
                "{num_classes} classes exceed the conditioning width {}",
                model.conditioning_layout().cols
            )));
        }
        Ok(Self {
            model,
            codec,
            schedule,
            num_classes,
        })
    }

    fn check_image(&self, image: &LatentTensor) -> Result<()> {
        let latent = self.codec.latent_shape(image.shape());
        if latent != self.model.latent_shape() {
            let m = self.model.latent_shape();
            return Err(Error::ShapeMismatch {
                expected: vec![m.0, m.1, m.2],
                actual: vec![latent.0, latent.1, latent.2],
            });
        }
        Ok(())
    }

    /// Evaluates draws `start..start + count` for `classes`.
    fn evaluate_draws(
        &self,
        image: &LatentTensor,
        start: usize,
        count: usize,
        classes: &[usize],
        cfg: &ClassifierConfig,
        mask: Option<&[bool]>,
    ) -> Result<Vec<ErrorDraw>> {
        let shape = self.model.latent_shape();
        let p = shape.0 * shape.1 * shape.2;
        let layout = self.model.conditioning_layout();
        let conds: Vec<ConditioningMatrix> = classes
            .iter()
            .map(|&c| ConditioningMatrix::one_hot(c, layout))
            .collect::<Result<_>>()?;
        let rows = count * classes.len();
        let mut z = Array2::zeros((rows, p));
        let mut cond = Array2::zeros((rows, layout.len()));
        let mut ts = Vec::with_capacity(rows);
        let mut eps_all = Vec::with_capacity(count);
        let mut meta = Vec::with_capacity(count);
        for d in 0..count {
            let draw_index = (start + d) as u64;
            let eps_seed = derive_seed(cfg.seed, draw_index);
            let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
            let t = rng.random_range(1..=self.schedule.steps());
            let source = match &cfg.inference_augment {
                Some(spec) => augment_image(image, spec, &mut rng),
                None => image.clone(),
            };
            let z0 = self.codec.encode(&source)?;
            let eps = LatentTensor::standard_normal(shape, z0.space(), &mut rng);
            let z_t = forward_marginal(&z0, t, &eps, self.schedule)?;
            for (k, cm) in conds.iter().enumerate() {
                let row = d * classes.len() + k;
                copy_into_row(&mut z, row, z_t.as_slice());
                copy_into_row(&mut cond, row, cm.as_slice());
                ts.push(t);
            }
            eps_all.push(eps);
            meta.push((t, eps_seed));
        }
        let pred = self.model.predict_batch(z.view(), &ts, cond.view());
        let mut out = Vec::with_capacity(count);
        for (d, ((t, eps_seed), eps)) in meta.into_iter().zip(&eps_all).enumerate() {
            let errors = (0..classes.len())
                .map(|k| {
                    let row = pred.row(d * classes.len() + k);
                    masked_squared_error(
                        eps.as_slice(),
                        row.as_slice().expect("standard layout"),
                        mask,
                    )
                })
                .collect();
            out.push(ErrorDraw {
                t,
                eps_seed,
                classes: classes.to_vec(),
                errors,
            });
        }
        Ok(out)
    }

    /// Raw errors for all classes over the first `n` draws of the seed's
    /// draw sequence (the same draws `classify` would use).
    pub fn raw_error_draws(&self, image: &LatentTensor, n: usize, cfg: &ClassifierConfig) -> Result<Vec<ErrorDraw>> {
        self.check_image(image)?;
        let mask = channel_mask(self.model.latent_shape(), cfg.mask_radius);
        let classes: Vec<usize> = (0..self.num_classes).collect();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let count = cfg.draw_batch.min(n - start);
            out.extend(self.evaluate_draws(image, start, count, &classes, cfg, mask.as_deref())?);
            start += count;
        }
        Ok(out)
    }

    /// Full classification loop with optional pruning.
    pub fn classify(&self, image: &LatentTensor, cfg: &ClassifierConfig) -> Result<ClassificationResult> {
        cfg.validate()?;
        self.check_image(image)?;
        let mask = channel_mask(self.model.latent_shape(), cfg.mask_radius);
        let mut acc = TrialAccumulator::new(self.num_classes);
        let mut buffer: VecDeque<ErrorDraw> = VecDeque::new();
        let mut next_draw = 0usize;

        while acc.draws_used() < cfg.max_iters {
            if buffer.is_empty() {
                let remaining = cfg.max_iters - next_draw;
                let want = if next_draw < cfg.min_iters {
                    cfg.min_iters - next_draw
                } else {
                    cfg.draw_batch
                };
                let count = want.min(remaining).max(1);
                let active = acc.active_classes();
                buffer.extend(self.evaluate_draws(image, next_draw, count, &active, cfg, mask.as_deref())?);
                next_draw += count;
            }
            let draw = buffer.pop_front().expect("buffer refilled above");
            let active = acc.active_classes();
            let raw = draw.restricted(&active);
            let normalized = cfg.weighting.normalize(draw.t, &raw, self.schedule)?;
            acc.push(&normalized);
            if cfg.pruning {
                acc.prune(cfg);
            }
            if acc.active_classes().len() == 1 && acc.draws_used() >= cfg.min_iters {
                break;
            }
        }

        Ok(ClassificationResult {
            predicted_class: acc.best_active(),
            confidence_raw: acc.confidence_gap(),
            per_class_mean_error: acc.means(),
            draws_used: acc.draws_used(),
            active_trace: acc.events().to_vec(),
        })
    }

    /// Classifies many images. Image `i` uses the seed `derive_seed(cfg.seed, i)`.
    pub fn classify_batch(
        &self,
        images: &[LatentTensor],
        cfg: &ClassifierConfig,
        exec: Execution,
    ) -> Result<Vec<ClassificationResult>>
    where
        M: Sync,
    {
        exec.map(images, |i, img| {
            let cfg = ClassifierConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            self.classify(img, &cfg)
        })
        .into_iter()
        .collect()
    }

    /// Calibration points for the learned weighting: raw errors over `draws`
    /// draws for each labelled image.
    pub fn calibration_points(
        &self,
        images: &[(LatentTensor, usize)],
        draws: usize,
        cfg: &ClassifierConfig,
        exec: Execution,
    ) -> Result<Vec<CalibrationPoint>>
    where
        M: Sync,
    {
        let per_image: Vec<Result<Vec<CalibrationPoint>>> = exec.map(images, |i, (img, label)| {
            let cfg = ClassifierConfig {
                seed: derive_seed(cfg.seed ^ 0xCA11_B8A7, i as u64),
                ..cfg.clone()
            };
            let raw = self.raw_error_draws(img, draws, &cfg)?;
            Ok(raw
                .iter()
                .flat_map(|d| {
                    d.classes.iter().zip(&d.errors).map(move |(&c, &e)| CalibrationPoint {
                        t: d.t,
                        error: e,
                        is_correct_class: c == *label,
                    })
                })
                .collect())
        });
        let mut out = Vec::new();
        for r in per_image {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Argmin decision from precomputed draws without pruning: the first `n`
/// draws are normalized with `strategy` and averaged per class. Ties go to
/// the lowest class index.
pub fn argmin_from_draws(draws: &[ErrorDraw], n: usize, strategy: &WeightingStrategy, s: &NoiseSchedule) -> Result<(usize, Vec<f64>)> {
    let used = &draws[..n.min(draws.len())];
    let first = used.first().ok_or_else(|| invalid("no draws"))?;
    let k = first.classes.len();
    let mut sums = vec![0.0; k];
    for d in used {
        let v = strategy.normalize(d.t, &d.errors, s)?;
        for (acc, x) in sums.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let means: Vec<f64> = sums.iter().map(|x| x / used.len() as f64).collect();
    let mut best = 0;
    for c in 1..k {
        if means[c] < means[best] {
            best = c;
        }
    }
    Ok((first.classes[best], means))
}
