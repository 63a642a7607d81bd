//! Forward noising, the reverse denoising step, the training objective and
//! ancestral sampling.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::LatentCodec;
use crate::conditioning::ConditioningMatrix;
use crate::denoiser::NoisePredictor;
use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_marginal(z0: &LatentTensor, t: usize, eps: &LatentTensor, s: &NoiseSchedule) -> Result<LatentTensor> {
    let ab = s.alpha_bar(t)?;
    marginal_with_alpha_bar(z0, ab, eps)
}

pub(crate) fn marginal_with_alpha_bar(z0: &LatentTensor, alpha_bar: f64, eps: &LatentTensor) -> Result<LatentTensor> {
    z0.axpby(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// One forward transition: a draw from N(sqrt(alpha_t) z_prev, (1 - alpha_t) I).
pub fn forward_step<R: Rng + ?Sized>(z_prev: &LatentTensor, t: usize, s: &NoiseSchedule, rng: &mut R) -> Result<LatentTensor> {
    let a = s.alpha(t)?;
    let noise = LatentTensor::standard_normal(z_prev.shape(), z_prev.space(), rng);
    z_prev.axpby(a.sqrt(), &noise, (1.0 - a).sqrt())
}

/// Posterior mean of the reverse step given a noise prediction.
pub fn reverse_mean(z_t: &LatentTensor, eps_pred: &LatentTensor, alpha: f64, alpha_bar: f64) -> Result<LatentTensor> {
    let k = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    z_t.axpby(inv, eps_pred, -k * inv)
}

fn reverse_transition<M, R>(
    z_t: &LatentTensor,
    t: usize,
    alpha: f64,
    alpha_bar: f64,
    add_noise: bool,
    c: &ConditioningMatrix,
    model: &M,
    rng: &mut R,
) -> Result<LatentTensor>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let eps_pred = model.predict(z_t, t, c)?;
    let mean = reverse_mean(z_t, &eps_pred, alpha, alpha_bar)?;
    if !add_noise {
        return Ok(mean);
    }
    let noise = LatentTensor::standard_normal(z_t.shape(), z_t.space(), rng);
    mean.axpby(1.0, &noise, (1.0 - alpha).sqrt())
}

/// One reverse step z_t -> z_{t-1}. At t = 1 the mean is returned without
/// added noise.
pub fn reverse_step<M, R>(
    z_t: &LatentTensor,
    t: usize,
    c: &ConditioningMatrix,
    model: &M,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentTensor>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let alpha = s.alpha(t)?;
    let alpha_bar = s.alpha_bar(t)?;
    reverse_transition(z_t, t, alpha, alpha_bar, t > 1, c, model, rng)
}

/// Timesteps visited by a strided sampler, descending. `steps == T` visits
/// every timestep.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid(format!("sampling steps must lie in 1..={total}, got {steps}")));
    }
    let mut ts: Vec<usize> = (1..=steps).map(|i| i * total / steps).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Ancestral sampling from pure noise for one class condition, decoded to
/// image space.
pub fn sample<M, R>(
    c: &ConditioningMatrix,
    steps: usize,
    model: &M,
    s: &NoiseSchedule,
    codec: &LatentCodec,
    rng: &mut R,
) -> Result<LatentTensor>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let ts = strided_timesteps(s.steps(), steps)?;
    let space = match codec {
        LatentCodec::Identity => crate::tensor::Space::Pixel,
        LatentCodec::Pca(_) => crate::tensor::Space::Latent,
    };
    let mut z = LatentTensor::standard_normal(model.latent_shape(), space, rng);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let alpha_bar = s.alpha_bar(t)?;
        let alpha = if prev + 1 == t {
            s.alpha(t)?
        } else {
            let prev_bar = if prev == 0 { 1.0 } else { s.alpha_bar(prev)? };
            alpha_bar / prev_bar
        };
        z = reverse_transition(&z, t, alpha, alpha_bar, prev > 0, c, model, rng)?;
    }
    codec.decode(&z)
}

/// One training example: a clean latent and its (possibly mixed) condition.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z0: LatentTensor,
    pub condition: ConditioningMatrix,
}

/// The random part of one training-loss term.
#[derive(Debug, Clone)]
pub struct TrainingDraw {
    pub t: usize,
    pub eps: LatentTensor,
}

/// Draws t ~ U[1, T] and eps ~ N(0, I) for each example, in order.
pub fn sample_training_draws<R: Rng + ?Sized>(
    batch: &[TrainingExample],
    s: &NoiseSchedule,
    rng: &mut R,
) -> Vec<TrainingDraw> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=s.steps());
            let eps = LatentTensor::standard_normal(ex.z0.shape(), ex.z0.space(), rng);
            TrainingDraw { t, eps }
        })
        .collect()
}

/// Batched model inputs for a set of examples and draws.
pub(crate) struct LossBatch {
    pub z_t: Array2<f64>,
    pub eps: Array2<f64>,
    pub cond: Array2<f64>,
    pub t: Vec<usize>,
    pub weights: Vec<f64>,
}

pub(crate) fn assemble_loss_batch(
    batch: &[TrainingExample],
    draws: &[TrainingDraw],
    s: &NoiseSchedule,
) -> Result<LossBatch> {
    if batch.is_empty() {
        return Err(invalid("training batch is empty"));
    }
    if draws.len() != batch.len() {
        return Err(invalid("one draw per example required"));
    }
    let p = batch[0].z0.len();
    let q = batch[0].condition.as_slice().len();
    let mut z_t = Array2::zeros((batch.len(), p));
    let mut eps = Array2::zeros((batch.len(), p));
    let mut cond = Array2::zeros((batch.len(), q));
    let mut t = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (i, (ex, d)) in batch.iter().zip(draws).enumerate() {
        ex.z0.ensure_same_shape(&d.eps)?;
        if ex.z0.len() != p || ex.condition.as_slice().len() != q {
            return Err(Error::ShapeMismatch {
                expected: vec![p, q],
                actual: vec![ex.z0.len(), ex.condition.as_slice().len()],
            });
        }
        let zt = forward_marginal(&ex.z0, d.t, &d.eps, s)?;
        crate::denoiser::copy_into_row(&mut z_t, i, zt.as_slice());
        crate::denoiser::copy_into_row(&mut eps, i, d.eps.as_slice());
        crate::denoiser::copy_into_row(&mut cond, i, ex.condition.as_slice());
        t.push(d.t);
        weights.push(s.training_weight(d.t)?);
    }
    Ok(LossBatch {
        z_t,
        eps,
        cond,
        t,
        weights,
    })
}

/// Weighted denoising loss for fixed draws: mean over the batch of
/// w_t * ||eps - eps_theta(z_t, t, c)||^2.
pub fn training_loss_with_draws<M: NoisePredictor + ?Sized>(
    batch: &[TrainingExample],
    draws: &[TrainingDraw],
    model: &M,
    s: &NoiseSchedule,
) -> Result<f64> {
    let lb = assemble_loss_batch(batch, draws, s)?;
    let pred = model.predict_batch(lb.z_t.view(), &lb.t, lb.cond.view());
    let mut total = 0.0;
    for (i, (p, e)) in pred.rows().into_iter().zip(lb.eps.rows()).enumerate() {
        let sq: f64 = p.iter().zip(e.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
        total += lb.weights[i] * sq;
    }
    Ok(total / batch.len() as f64)
}

/// Weighted denoising loss with fresh draws from `rng`.
pub fn training_loss<M, R>(batch: &[TrainingExample], model: &M, s: &NoiseSchedule, rng: &mut R) -> Result<f64>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(invalid("training batch is empty"));
    }
    let draws = sample_training_draws(batch, s, rng);
    training_loss_with_draws(batch, &draws, model, s)
}

/// Standard normal scalar, exposed for Monte Carlo helpers.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
