//! Diffusion training with an inversion-matching term.
//!
//! Per real sample `(z0, c)`: draw `t ~ U{1..T}` and `eps ~ N(0, I)`, form
//! `z_t` by forward noising, invert `z0` to `z_t^inv` with the current
//! parameters, and minimize
//!
//! ```text
//! L = ||ε(z_t, t, c) - eps||² + λ · (1 - cos(z_t^inv, z_t))
//! ```
//!
//! `z_t` carries no parameter dependence, so the matching term's gradient
//! flows only through the network evaluations inside the inversion, either
//! through the final Euler step alone or through the whole trajectory.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{DenoiserError, DenoiserGrads, DenoiserParams};
use crate::diffusion::{eval_timestep, forward_noise, invert_traced, DiffusionError, LatentBatch};
use crate::math::{cosine_similarity, dot, norm, AdamWConfig, AdamWState, MathError, Rng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (loss_diff={loss_diff}, loss_im={loss_im}): {detail}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss_diff: f64,
        loss_im: f64,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpropDepth {
    /// Inversion states before the final Euler increment are constants.
    LastStepOnly,
    FullTrajectory,
}

/// Distance used between `z_t^inv` and `z_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingLoss {
    /// `1 - cos(z_inv, z_t)`
    Cosine,
    /// mean absolute difference over dimensions
    L1,
    /// mean squared difference over dimensions
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IMFinetuneConfig {
    #[serde(default = "default_lambda")]
    pub lambda_im: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_inv_steps")]
    pub n_inv_steps: usize,
    #[serde(default = "default_depth")]
    pub backprop_depth: BackpropDepth,
    #[serde(default = "default_matching")]
    pub matching_loss: MatchingLoss,
}

fn default_lambda() -> f64 {
    0.002
}
fn default_epochs() -> usize {
    8
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_inv_steps() -> usize {
    8
}
fn default_depth() -> BackpropDepth {
    BackpropDepth::LastStepOnly
}
fn default_matching() -> MatchingLoss {
    MatchingLoss::Cosine
}

impl Default for IMFinetuneConfig {
    fn default() -> Self {
        Self {
            lambda_im: default_lambda(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: 0.0,
            n_inv_steps: default_inv_steps(),
            backprop_depth: default_depth(),
            matching_loss: default_matching(),
        }
    }
}

impl IMFinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !(self.lambda_im >= 0.0) || !self.lambda_im.is_finite() {
            return Err(FinetuneError::InvalidConfig(format!(
                "lambda_im must be >= 0, got {}",
                self.lambda_im
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_inv_steps == 0 {
            return Err(FinetuneError::InvalidConfig(
                "epochs, batch_size and n_inv_steps must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(FinetuneError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda_im: self.lambda_im,
            n_inv_steps: self.n_inv_steps,
            backprop_depth: self.backprop_depth,
            matching_loss: self.matching_loss,
            with_inversion: true,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::with_lr(self.lr)
        }
    }
}

/// Plain diffusion training (no inversion term), used to pretrain the
/// generator before fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

impl PretrainConfig {
    pub fn objective(&self) -> Objective {
        Objective::diffusion_only()
    }
}

/// What one training sample contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda_im: f64,
    pub n_inv_steps: usize,
    pub backprop_depth: BackpropDepth,
    pub matching_loss: MatchingLoss,
    /// When false the inversion is skipped entirely and `loss_im` is logged as 0.
    pub with_inversion: bool,
}

impl Objective {
    pub fn diffusion_only() -> Self {
        Self {
            lambda_im: 0.0,
            n_inv_steps: 1,
            backprop_depth: BackpropDepth::LastStepOnly,
            matching_loss: MatchingLoss::Cosine,
            with_inversion: false,
        }
    }
}

/// `||eps_pred - eps||²`
pub fn loss_diff(eps_pred: &[f64], eps: &[f64]) -> f64 {
    crate::math::sq_dist(eps_pred, eps)
}

/// `1 - cos(z_inv, z_t)`, in `[0, 2]`.
pub fn loss_im(z_inv: &[f64], z_t: &[f64]) -> Result<f64, MathError> {
    Ok(1.0 - cosine_similarity(z_inv, z_t)?)
}

pub fn total_loss(l_diff: f64, l_im: f64, lambda_im: f64) -> f64 {
    l_diff + lambda_im * l_im
}

/// Matching loss value and its gradient w.r.t. `z_inv`.
pub fn matching_loss_and_grad(
    kind: MatchingLoss,
    z_inv: &[f64],
    z_t: &[f64],
) -> Result<(f64, Vec<f64>), MathError> {
    let d = z_inv.len() as f64;
    match kind {
        MatchingLoss::Cosine => {
            let loss = loss_im(z_inv, z_t)?;
            let (na, nb) = (norm(z_inv), norm(z_t));
            let cos = dot(z_inv, z_t) / (na * nb);
            let grad = z_inv
                .iter()
                .zip(z_t)
                .map(|(a, b)| -(b / (na * nb) - cos * a / (na * na)))
                .collect();
            Ok((loss, grad))
        }
        MatchingLoss::L1 => {
            let loss = z_inv.iter().zip(z_t).map(|(a, b)| (a - b).abs()).sum::<f64>() / d;
            let grad = z_inv
                .iter()
                .zip(z_t)
                .map(|(a, b)| {
                    let diff = a - b;
                    if diff == 0.0 {
                        0.0
                    } else {
                        diff.signum() / d
                    }
                })
                .collect();
            Ok((loss, grad))
        }
        MatchingLoss::L2 => {
            let loss = crate::math::sq_dist(z_inv, z_t) / d;
            let grad = z_inv.iter().zip(z_t).map(|(a, b)| 2.0 * (a - b) / d).collect();
            Ok((loss, grad))
        }
    }
}

/// The random draws for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    /// `t ~ U{1..T}` then `eps ~ N(0, I_dim)`, in that order.
    pub fn draw(rng: &mut Rng, steps: usize, dim: usize) -> Self {
        let t = 1 + rng.below(steps);
        let eps = rng.gaussian_vec(dim);
        Self { t, eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLosses {
    pub loss_diff: f64,
    pub loss_im: f64,
}

impl SampleLosses {
    pub fn total(&self, lambda_im: f64) -> f64 {
        total_loss(self.loss_diff, self.loss_im, lambda_im)
    }
}

/// Loss of one sample under `objective`, accumulating `scale * dL/dθ` into `grads`.
pub fn accumulate_sample_gradient(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z0: &[f64],
    class_id: usize,
    draw: &NoiseDraw,
    objective: &Objective,
    scale: f64,
    grads: &mut DenoiserGrads,
) -> Result<SampleLosses, FinetuneError> {
    let z_t = forward_noise(schedule, z0, draw.t, &draw.eps)?;

    // Diffusion term: d||e - eps||²/de = 2 (e - eps).
    let eps_pred = params.forward(&z_t, draw.t, class_id)?;
    let upstream: Vec<f64> = eps_pred.iter().zip(&draw.eps).map(|(p, e)| 2.0 * (p - e)).collect();
    params.forward_backward(&z_t, draw.t, class_id, &upstream, scale, grads)?;
    let l_diff = loss_diff(&eps_pred, &draw.eps);

    if !objective.with_inversion || !l_diff.is_finite() {
        let loss_im = if objective.with_inversion { f64::NAN } else { 0.0 };
        return Ok(SampleLosses {
            loss_diff: l_diff,
            loss_im,
        });
    }

    let traj = invert_traced(schedule, params, z0, draw.t, class_id, objective.n_inv_steps)?;
    if !crate::math::all_finite(&traj.z_inv) {
        return Ok(SampleLosses {
            loss_diff: l_diff,
            loss_im: f64::NAN,
        });
    }
    let (l_im, g_zinv) = matching_loss_and_grad(objective.matching_loss, &traj.z_inv, &z_t)?;

    if objective.lambda_im != 0.0 {
        let n = traj.n_steps();
        let out_scale = schedule.alpha_bar(draw.t).sqrt();
        let mut g_x: Vec<f64> = g_zinv.iter().map(|g| g * out_scale).collect();
        let first = match objective.backprop_depth {
            BackpropDepth::LastStepOnly => n,
            BackpropDepth::FullTrajectory => 1,
        };
        for i in (first..=n).rev() {
            // x_i = x_{i-1} + Δσ_i ε(sqrt(ᾱ_{i-1}) x_{i-1})
            let step = traj.step_size(schedule, i);
            let input = traj.step_input(schedule, i);
            let t_eval = eval_timestep(traj.grid[i - 1]);
            let up: Vec<f64> = g_x.iter().map(|g| g * step).collect();
            let (_, grad_in) = params.forward_backward(
                &input,
                t_eval,
                class_id,
                &up,
                scale * objective.lambda_im,
                grads,
            )?;
            if i > first {
                let in_scale = schedule.alpha_bar(traj.grid[i - 1]).sqrt();
                for (g, gi) in g_x.iter_mut().zip(&grad_in) {
                    *g += in_scale * gi;
                }
            }
        }
    }

    Ok(SampleLosses {
        loss_diff: l_diff,
        loss_im: l_im,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss_diff: f64,
    pub loss_im: f64,
    pub total: f64,
}

pub fn write_loss_log<W: Write>(records: &[LossRecord], out: W) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "epoch,batch,loss_diff,loss_im,total")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.batch, r.loss_diff, r.loss_im, r.total
        )?;
    }
    out.flush()
}

/// Mini-batch trainer owning the optimizer state.
pub struct Trainer<'a> {
    schedule: &'a NoiseSchedule,
    objective: Objective,
    batch_size: usize,
    optimizer: AdamWState,
    epochs_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        schedule: &'a NoiseSchedule,
        params: &DenoiserParams,
        objective: Objective,
        optimizer: AdamWConfig,
        batch_size: usize,
    ) -> Self {
        Self {
            schedule,
            objective,
            batch_size: batch_size.max(1),
            optimizer: AdamWState::new(optimizer, &[params.num_values()]),
            epochs_done: 0,
        }
    }

    pub fn for_finetune(
        schedule: &'a NoiseSchedule,
        params: &DenoiserParams,
        cfg: &IMFinetuneConfig,
    ) -> Self {
        Self::new(schedule, params, cfg.objective(), cfg.optimizer(), cfg.batch_size)
    }

    pub fn for_pretrain(
        schedule: &'a NoiseSchedule,
        params: &DenoiserParams,
        cfg: &PretrainConfig,
    ) -> Self {
        Self::new(
            schedule,
            params,
            cfg.objective(),
            AdamWConfig::with_lr(cfg.lr),
            cfg.batch_size,
        )
    }

    pub fn optimizer(&self) -> &AdamWState {
        &self.optimizer
    }

    /// One pass over `data` in a freshly shuffled order. RNG use per epoch:
    /// one Fisher–Yates shuffle, then a [`NoiseDraw`] per sample in visit order.
    pub fn epoch(
        &mut self,
        params: &mut DenoiserParams,
        data: &LatentBatch,
        rng: &mut Rng,
    ) -> Result<Vec<LossRecord>, FinetuneError> {
        if data.t != 0 {
            return Err(FinetuneError::InvalidConfig(format!(
                "training data must be clean (t = 0), got t = {}",
                data.t
            )));
        }
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let dim = params.config().dim;
        let lambda = self.objective.lambda_im;
        let mut log = Vec::new();

        for (batch, chunk) in order.chunks(self.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = DenoiserGrads::zeros_like(params);
            let (mut sum_diff, mut sum_im) = (0.0, 0.0);
            for &idx in chunk {
                let draw = NoiseDraw::draw(rng, self.schedule.steps(), dim);
                let losses = accumulate_sample_gradient(
                    self.schedule,
                    params,
                    &data.latents[idx],
                    data.labels[idx],
                    &draw,
                    &self.objective,
                    scale,
                    &mut grads,
                )?;
                if !(losses.loss_diff.is_finite() && losses.loss_im.is_finite()) {
                    let detail = format!(
                        "sample {idx} (class {}) at t={}, params finite: {}",
                        data.labels[idx],
                        draw.t,
                        params.all_finite()
                    );
                    log::error!("aborting epoch {epoch}: {detail}");
                    return Err(FinetuneError::NonFiniteLoss {
                        epoch,
                        batch,
                        loss_diff: losses.loss_diff,
                        loss_im: losses.loss_im,
                        detail,
                    });
                }
                sum_diff += losses.loss_diff;
                sum_im += losses.loss_im;
            }
            let (loss_diff, loss_im) = (sum_diff * scale, sum_im * scale);
            self.optimizer.step_flat(params.as_mut_slice(), &grads.0)?;
            log.push(LossRecord {
                epoch,
                batch,
                loss_diff,
                loss_im,
                total: total_loss(loss_diff, loss_im, lambda),
            });
        }
        self.epochs_done += 1;
        Ok(log)
    }

    pub fn run(
        &mut self,
        params: &mut DenoiserParams,
        data: &LatentBatch,
        epochs: usize,
        rng: &mut Rng,
    ) -> Result<Vec<LossRecord>, FinetuneError> {
        let mut log = Vec::new();
        for _ in 0..epochs {
            log.extend(self.epoch(params, data, rng)?);
        }
        Ok(log)
    }
}

/// Single fine-tuning epoch with a fresh optimizer.
pub fn finetune_epoch(
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    real_data: &LatentBatch,
    cfg: &IMFinetuneConfig,
    rng: &mut Rng,
) -> Result<Vec<LossRecord>, FinetuneError> {
    cfg.validate()?;
    Trainer::for_finetune(schedule, params, cfg).epoch(params, real_data, rng)
}

/// All `cfg.epochs` epochs of inversion-matching fine-tuning.
pub fn finetune(
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    real_data: &LatentBatch,
    cfg: &IMFinetuneConfig,
    rng: &mut Rng,
) -> Result<Vec<LossRecord>, FinetuneError> {
    cfg.validate()?;
    Trainer::for_finetune(schedule, params, cfg).run(params, real_data, cfg.epochs, rng)
}

/// Plain diffusion pretraining.
pub fn pretrain(
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    real_data: &LatentBatch,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Vec<LossRecord>, FinetuneError> {
    Trainer::for_pretrain(schedule, params, cfg).run(params, real_data, cfg.epochs, rng)
}
