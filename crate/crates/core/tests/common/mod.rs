//! Shared fixtures and independent oracles for the integration and
//! acceptance tests.
#![allow(dead_code)]

use diffdistill::data::{generate_gmm, GmmSpec};
use diffdistill::denoiser::{DenoiserConfig, DenoiserGrads, DenoiserParams};
use diffdistill::diffusion::LatentBatch;
use diffdistill::finetune::{accumulate_sample_gradient, pretrain, BackpropDepth, MatchingLoss, NoiseDraw, Objective, PretrainConfig};
use diffdistill::math::Rng;
use diffdistill::schedule::NoiseSchedule;
use diffdistill::selection::CandidatePool;

pub fn desk_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Pool of Gaussian-direction unit centroids.
pub fn random_pool(rng: &mut Rng, c: usize, g: usize, d: usize) -> CandidatePool {
    let real = (0..c).map(|_| unit(rng.gaussian_vec(d))).collect();
    let cands = (0..c)
        .map(|_| (0..g).map(|_| unit(rng.gaussian_vec(d))).collect())
        .collect();
    CandidatePool::from_centroids(real, cands).unwrap()
}

/// `1 - cos`, clamped, as a log.
fn log_gap(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).clamp(floor, 2.0).ln()
}

/// Direct transcription of the selection objective, written without the
/// per-class decomposition.
pub fn direct_objective(pool: &CandidatePool, g: &[usize], alpha: f64, beta: f64) -> f64 {
    let (c, n_groups) = (pool.n_classes(), pool.n_groups());
    let mut attract = 0.0;
    for i in 0..c {
        attract += log_gap(pool.centroid(i, g[i]), &pool.real_centroids()[i], 1e-9);
    }
    let mut repel = 0.0;
    for i in 0..c {
        for j in (0..c).filter(|&j| j != i) {
            for h in 0..n_groups {
                repel += log_gap(pool.centroid(i, g[i]), pool.centroid(j, h), 1e-9);
            }
        }
    }
    if c == 1 {
        return alpha * attract;
    }
    alpha * attract - beta / ((c - 1) * n_groups) as f64 * repel
}

/// Lexicographic exhaustive minimum of [`direct_objective`].
pub fn exhaustive_argmin(pool: &CandidatePool, alpha: f64, beta: f64) -> (Vec<usize>, f64) {
    let (c, n_groups) = (pool.n_classes(), pool.n_groups());
    let total = n_groups.pow(c as u32);
    let mut best = (vec![0; c], f64::INFINITY);
    for code in 0..total {
        let mut g = vec![0; c];
        let mut rest = code;
        for k in (0..c).rev() {
            g[k] = rest % n_groups;
            rest /= n_groups;
        }
        let v = direct_objective(pool, &g, alpha, beta);
        if v < best.1 {
            best = (g, v);
        }
    }
    best
}

/// A small denoiser with weights large enough to make every layer matter.
pub fn gradient_case(seed: u64) -> (NoiseSchedule, DenoiserParams, Vec<f64>, usize, NoiseDraw) {
    let schedule = desk_schedule();
    let mut rng = Rng::new(seed);
    let cfg = DenoiserConfig {
        hidden: vec![12, 12],
        init_std: 0.3,
        ..DenoiserConfig::new(4, 3)
    };
    let params = DenoiserParams::init(cfg, schedule.steps(), &mut rng);
    let z0 = rng.gaussian_vec(4);
    let class = rng.below(3);
    let draw = NoiseDraw::draw(&mut rng, schedule.steps(), 4);
    (schedule, params, z0, class, draw)
}

/// Total loss as a function of the parameters, written from the update
/// equations. With `frozen = Some(base)`, every inversion step except the
/// last is evaluated with `base` (the stop-gradient reading of
/// last-step-only backpropagation).
pub fn oracle_total_loss(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    frozen: Option<&DenoiserParams>,
    z0: &[f64],
    class: usize,
    t: usize,
    eps: &[f64],
    lambda: f64,
    n_inv: usize,
) -> f64 {
    let ab = |s: usize| if s == 0 { 1.0 } else { schedule.alpha_bars()[s - 1] };
    let sig = |s: usize| ((1.0 - ab(s)) / ab(s)).sqrt();
    let z_t: Vec<f64> = z0
        .iter()
        .zip(eps)
        .map(|(z, e)| ab(t).sqrt() * z + (1.0 - ab(t)).sqrt() * e)
        .collect();
    let pred = params.forward(&z_t, t, class).unwrap();
    let l_diff: f64 = pred.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum();

    let n = n_inv.min(t);
    let grid: Vec<usize> = std::iter::once(0)
        .chain((1..=n).map(|k| (k * t).div_ceil(n)))
        .collect();
    let mut x = z0.to_vec();
    for i in 1..=n {
        let net = match frozen {
            Some(base) if i < n => base,
            _ => params,
        };
        let (from, to) = (grid[i - 1], grid[i]);
        let input: Vec<f64> = x.iter().map(|v| v * ab(from).sqrt()).collect();
        let e = net.forward(&input, from.max(1), class).unwrap();
        let step = sig(to) - sig(from);
        for (xv, ev) in x.iter_mut().zip(&e) {
            *xv += step * ev;
        }
    }
    let z_inv: Vec<f64> = x.iter().map(|v| v * ab(t).sqrt()).collect();
    let dot: f64 = z_inv.iter().zip(&z_t).map(|(a, b)| a * b).sum();
    let na = z_inv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = z_t.iter().map(|v| v * v).sum::<f64>().sqrt();
    l_diff + lambda * (1.0 - dot / (na * nb))
}

pub fn analytic_gradient(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z0: &[f64],
    class: usize,
    draw: &NoiseDraw,
    lambda: f64,
    n_inv: usize,
    depth: BackpropDepth,
) -> Vec<f64> {
    let objective = Objective {
        lambda_im: lambda,
        n_inv_steps: n_inv,
        backprop_depth: depth,
        matching_loss: MatchingLoss::Cosine,
        with_inversion: true,
    };
    let mut grads = DenoiserGrads::zeros_like(params);
    accumulate_sample_gradient(schedule, params, z0, class, draw, &objective, 1.0, &mut grads).unwrap();
    grads.0
}

/// Fourth-order central-difference gradient of [`oracle_total_loss`].
pub fn fd_gradient(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    z0: &[f64],
    class: usize,
    draw: &NoiseDraw,
    lambda: f64,
    n_inv: usize,
    depth: BackpropDepth,
    h: f64,
) -> Vec<f64> {
    let frozen = match depth {
        BackpropDepth::LastStepOnly => Some(params),
        BackpropDepth::FullTrajectory => None,
    };
    let mut probe = params.clone();
    (0..params.num_values())
        .map(|k| {
            let v = params.as_slice()[k];
            let mut at = |offset: f64| {
                probe.as_mut_slice()[k] = v + offset;
                oracle_total_loss(schedule, &probe, frozen, z0, class, draw.t, &draw.eps, lambda, n_inv)
            };
            let g = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            probe.as_mut_slice()[k] = v;
            g
        })
        .collect()
}

/// Class-conditional denoiser pretrained on a well-separated 2-D, 2-class
/// mixture. Returns the schedule, parameters and the training data.
pub fn trained_toy_model() -> (NoiseSchedule, DenoiserParams, LatentBatch) {
    let schedule = desk_schedule();
    let spec = GmmSpec::simplex(2, 2, 3.0, 0.5, 400, 1).unwrap();
    let mut rng = Rng::new(11);
    let (train, _) = generate_gmm(&spec, &mut rng).unwrap();
    let data = LatentBatch::new(train.samples, train.labels, 0).unwrap();
    let mut params = DenoiserParams::init(DenoiserConfig::new(2, 2), schedule.steps(), &mut rng);
    let cfg = PretrainConfig {
        epochs: 200,
        batch_size: 32,
        lr: 2e-3,
    };
    pretrain(&mut params, &schedule, &data, &cfg, &mut rng).unwrap();
    (schedule, params, data)
}
