//! Geometric-mean instability coefficient of a map `F: R^n -> R^m`,
//! `exp((1/n) Σ_i log ‖J_F e_i‖)`, with Jacobian columns estimated by central
//! differences along the standard basis.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::DenoiserParams;
use crate::diffusion::{sample_from_noise, DiffusionError};
use crate::math::{norm, Rng};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum InstabilityError {
    #[error("finite-difference step must be > 0, got {0}")]
    InvalidStep(f64),
    #[error("Jacobian column {column} has non-finite or zero norm ({norm})")]
    NonFiniteJacobian { column: usize, norm: f64 },
    #[error("empty input point")]
    EmptyInput,
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Coefficient for a fallible map.
pub fn try_instability_coefficient<F, E>(mut f: F, z: &[f64], h: f64) -> Result<f64, InstabilityError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    InstabilityError: From<E>,
{
    if !(h > 0.0) {
        return Err(InstabilityError::InvalidStep(h));
    }
    if z.is_empty() {
        return Err(InstabilityError::EmptyInput);
    }
    let mut log_sum = 0.0;
    let mut probe = z.to_vec();
    for i in 0..z.len() {
        probe[i] = z[i] + h;
        let plus = f(&probe)?;
        probe[i] = z[i] - h;
        let minus = f(&probe)?;
        probe[i] = z[i];
        let column: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
        let n = norm(&column);
        if !(n.is_finite() && n > 0.0) {
            return Err(InstabilityError::NonFiniteJacobian { column: i, norm: n });
        }
        log_sum += n.ln();
    }
    Ok((log_sum / z.len() as f64).exp())
}

pub fn instability_coefficient<F>(mut f: F, z: &[f64], h: f64) -> Result<f64, InstabilityError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    try_instability_coefficient(|x| Ok::<_, InstabilityError>(f(x)), z, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub class_id: usize,
    pub dim: usize,
    pub fd_step: f64,
    pub sample_steps: usize,
    pub probes: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilitySummary {
    pub n_probes: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl InstabilityReport {
    pub fn summary(&self) -> Option<InstabilitySummary> {
        if self.coefficients.is_empty() {
            return None;
        }
        let mut s = self.coefficients.clone();
        s.sort_by(f64::total_cmp);
        Some(InstabilitySummary {
            n_probes: s.len(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }

    /// `probe,coefficient`
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "probe,coefficient")?;
        for (i, c) in self.coefficients.iter().enumerate() {
            writeln!(out, "{i},{c}")?;
        }
        out.flush()
    }
}

/// Probes the deterministic DDIM sampling map (noise at `T` to data at 0,
/// `sample_steps` grid points) at `n_probes` Gaussian noise latents.
pub fn probe_flow(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    class_id: usize,
    n_probes: usize,
    sample_steps: usize,
    fd_step: f64,
    rng: &mut Rng,
) -> Result<InstabilityReport, InstabilityError> {
    let dim = params.config().dim;
    let flow = |z: &[f64]| sample_from_noise(schedule, params, z, class_id, sample_steps);
    let mut probes = Vec::with_capacity(n_probes);
    let mut coefficients = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let z = rng.gaussian_vec(dim);
        coefficients.push(try_instability_coefficient(flow, &z, fd_step)?);
        probes.push(z);
    }
    let report = InstabilityReport {
        class_id,
        dim,
        fd_step,
        sample_steps,
        probes,
        coefficients,
    };
    if let Some(s) = report.summary() {
        log::info!("class {class_id}: instability median {:.6}", s.median);
    }
    Ok(report)
}
