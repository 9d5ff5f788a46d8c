//! Forward noising, deterministic DDIM sampling (η = 0) and Euler-form
//! inversion.
//!
//! Inversion runs in the σ-parameterization `x = z / sqrt(ᾱ_t)`, where
//! `σ_t = sqrt((1 - ᾱ_t) / ᾱ_t)`. In that space one DDIM step is exactly an
//! Euler step `x' = x + (σ' - σ) ε`, so sampling and inversion share a grid
//! and differ only in where ε is evaluated.
//!
//! The network is never evaluated at `t = 0`: the clean end of an inversion
//! grid conditions on `t = 1` (ᾱ_1 ≈ 1).

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::denoiser::{DenoiserError, DenoiserParams};
use crate::math::{axpy, Rng};
use crate::schedule::{grid_up_to, NoiseSchedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("timestep order violated: t_prev={t_prev} must be < t={t}")]
    BadTimestepOrder { t: usize, t_prev: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Latents with labels, all at the same timestep (`t == 0` is clean data).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub latents: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub t: usize,
}

impl LatentBatch {
    pub fn new(latents: Vec<Vec<f64>>, labels: Vec<usize>, t: usize) -> Result<Self, DiffusionError> {
        if latents.len() != labels.len() {
            return Err(DiffusionError::DimMismatch {
                left: latents.len(),
                right: labels.len(),
            });
        }
        Ok(Self { latents, labels, t })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// CSV rows `label,z_1,...,z_d`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        crate::io::write_labeled_rows(out, "z", self.latents.iter().zip(&self.labels))
    }

    pub fn read_csv<R: BufRead>(input: R, t: usize) -> Result<Self, crate::io::CsvError> {
        let (latents, labels) = crate::io::read_labeled_rows(input)?;
        Ok(Self { latents, labels, t })
    }
}

fn check_t(schedule: &NoiseSchedule, t: usize) -> Result<(), DiffusionError> {
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::BadTimestep {
            t,
            max: schedule.steps(),
        });
    }
    Ok(())
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `sqrt(ᾱ) z0 + sqrt(1 - ᾱ) eps` for an explicit ᾱ.
pub fn noise_with_alpha_bar(z0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

pub fn forward_noise(
    schedule: &NoiseSchedule,
    z0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    check_t(schedule, t)?;
    check_dims(z0, eps)?;
    Ok(noise_with_alpha_bar(z0, schedule.alpha_bar(t), eps))
}

/// ẑ0 from a noisy latent and a noise estimate.
pub fn z0_from_eps(z_t: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_t.iter().zip(eps).map(|(z, e)| (z - b * e) / a).collect()
}

pub fn predict_z0(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z_t: &[f64],
    t: usize,
    class_id: usize,
) -> Result<Vec<f64>, DiffusionError> {
    check_t(schedule, t)?;
    let eps = params.forward(z_t, t, class_id)?;
    Ok(z0_from_eps(z_t, &eps, schedule.alpha_bar(t)))
}

/// Deterministic DDIM update from `t` to `t_prev < t` (`t_prev` may be 0).
pub fn ddim_step(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z_t: &[f64],
    t: usize,
    t_prev: usize,
    class_id: usize,
) -> Result<Vec<f64>, DiffusionError> {
    if t_prev >= t {
        return Err(DiffusionError::BadTimestepOrder { t, t_prev });
    }
    check_t(schedule, t)?;
    let eps = params.forward(z_t, t, class_id)?;
    let z0_hat = z0_from_eps(z_t, &eps, schedule.alpha_bar(t));
    let ab_prev = schedule.alpha_bar(t_prev);
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z0_hat.iter().zip(&eps).map(|(z, e)| a * z + b * e).collect())
}

/// Deterministic sampling map from a given noise latent at `t = T` to `t = 0`.
pub fn sample_from_noise(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z_noise: &[f64],
    class_id: usize,
    n_steps: usize,
) -> Result<Vec<f64>, DiffusionError> {
    let grid = schedule.timestep_grid(n_steps)?;
    let mut z = z_noise.to_vec();
    for k in (0..grid.len()).rev() {
        let t_prev = if k == 0 { 0 } else { grid[k - 1] };
        z = ddim_step(schedule, params, &z, grid[k], t_prev, class_id)?;
    }
    Ok(z)
}

/// Draw `z_T ~ N(0, I)` and run the DDIM sampler down to `t = 0`.
pub fn sample(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    rng: &mut Rng,
    class_id: usize,
    n_steps: usize,
) -> Result<Vec<f64>, DiffusionError> {
    let z = rng.gaussian_vec(params.config().dim);
    sample_from_noise(schedule, params, &z, class_id, n_steps)
}

/// Inversion grid `0 = t_0 < t_1 < ... < t_n = t_target`, with
/// `n = min(n_steps, t_target)`.
pub fn inversion_grid(t_target: usize, n_steps: usize) -> Result<Vec<usize>, DiffusionError> {
    let n = n_steps.min(t_target);
    let mut grid = vec![0];
    grid.extend(grid_up_to(t_target, n)?);
    Ok(grid)
}

/// Timestep at which the network is conditioned for a grid point.
pub(crate) fn eval_timestep(t: usize) -> usize {
    t.max(1)
}

/// σ-space states of an inversion run, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct InversionTrajectory {
    /// `0 = t_0 < ... < t_n = t_target`.
    pub grid: Vec<usize>,
    /// `x_0 .. x_n`, with `x_0 = z0`.
    pub states: Vec<Vec<f64>>,
    /// `z_t^inv = sqrt(ᾱ_target) x_n`.
    pub z_inv: Vec<f64>,
}

impl InversionTrajectory {
    /// Network input for Euler step `i` (1-based): `sqrt(ᾱ_{t_{i-1}}) x_{i-1}`.
    pub fn step_input(&self, schedule: &NoiseSchedule, i: usize) -> Vec<f64> {
        let scale = schedule.alpha_bar(self.grid[i - 1]).sqrt();
        self.states[i - 1].iter().map(|v| v * scale).collect()
    }

    /// `σ_{t_i} - σ_{t_{i-1}}` for Euler step `i` (1-based).
    pub fn step_size(&self, schedule: &NoiseSchedule, i: usize) -> f64 {
        schedule.sigma(self.grid[i]) - schedule.sigma(self.grid[i - 1])
    }

    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }
}

pub fn invert_traced(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z0: &[f64],
    t_target: usize,
    class_id: usize,
    n_inv_steps: usize,
) -> Result<InversionTrajectory, DiffusionError> {
    check_t(schedule, t_target)?;
    let grid = inversion_grid(t_target, n_inv_steps)?;
    let mut states = Vec::with_capacity(grid.len());
    states.push(z0.to_vec());
    for i in 1..grid.len() {
        let (t_from, t_to) = (grid[i - 1], grid[i]);
        let x = &states[i - 1];
        let scale = schedule.alpha_bar(t_from).sqrt();
        let z_eval: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let eps = params.forward(&z_eval, eval_timestep(t_from), class_id)?;
        let mut next = x.clone();
        axpy(&mut next, schedule.sigma(t_to) - schedule.sigma(t_from), &eps);
        states.push(next);
    }
    let out_scale = schedule.alpha_bar(t_target).sqrt();
    let z_inv = states.last().expect("non-empty").iter().map(|v| v * out_scale).collect();
    Ok(InversionTrajectory {
        grid,
        states,
        z_inv,
    })
}

/// Map a clean latent to its noise latent at `t_target`.
pub fn invert(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z0: &[f64],
    t_target: usize,
    class_id: usize,
    n_inv_steps: usize,
) -> Result<Vec<f64>, DiffusionError> {
    Ok(invert_traced(schedule, params, z0, t_target, class_id, n_inv_steps)?.z_inv)
}
