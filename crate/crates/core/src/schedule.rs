//! Linear-β diffusion noise schedule.
//!
//! Tables are indexed by timestep `t ∈ 1..=T`. Timestep 0 denotes clean data
//! and is handled by the accessors: `alpha_bar(0) == 1` and `sigma(0) == 0`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule bounds: T={steps}, beta in [{beta_start}, {beta_end}]")]
    InvalidScheduleBounds {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    #[error("invalid step count {n_steps} for a {max}-step range")]
    InvalidStepCount { n_steps: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated over `1..=T`, ᾱ_t = Π_{s≤t}(1-β_s),
    /// σ_t = sqrt((1-ᾱ_t)/ᾱ_t).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        let valid = steps >= 2 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
        if !valid {
            return Err(ScheduleError::InvalidScheduleBounds {
                steps,
                beta_start,
                beta_end,
            });
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// Builds the derived tables from an explicit β sequence. Callers are
    /// responsible for the bounds `0 < β < 1`.
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let sigmas = alpha_bars.iter().map(|&a| ((1.0 - a) / a).sqrt()).collect();
        Self {
            betas,
            alpha_bars,
            sigmas,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigmas[t - 1]
        }
    }

    /// `n_steps` strictly increasing timesteps in `1..=T`, ending at `T`.
    pub fn timestep_grid(&self, n_steps: usize) -> Result<Vec<usize>, ScheduleError> {
        grid_up_to(self.steps(), n_steps)
    }

    /// CSV with columns `t,beta,alpha_bar,sigma`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,beta,alpha_bar,sigma")?;
        for t in 1..=self.steps() {
            writeln!(
                out,
                "{},{},{},{}",
                t,
                self.beta(t),
                self.alpha_bar(t),
                self.sigma(t)
            )?;
        }
        Ok(())
    }
}

/// Near-uniform grid `ceil(k * t_max / n)` for `k = 1..=n`.
pub(crate) fn grid_up_to(t_max: usize, n_steps: usize) -> Result<Vec<usize>, ScheduleError> {
    if n_steps == 0 || n_steps > t_max {
        return Err(ScheduleError::InvalidStepCount {
            n_steps,
            max: t_max,
        });
    }
    Ok((1..=n_steps).map(|k| (k * t_max).div_ceil(n_steps)).collect())
}
