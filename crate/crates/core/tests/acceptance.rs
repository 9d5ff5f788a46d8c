//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use diffdistill::denoiser::{DenoiserConfig, DenoiserParams};
use diffdistill::diffusion::{forward_noise, invert, sample_from_noise, z0_from_eps};
use diffdistill::finetune::BackpropDepth;
use diffdistill::instability::{instability_coefficient, probe_flow, DEFAULT_FD_STEP};
use diffdistill::math::{cosine_similarity, Rng};
use diffdistill::pipeline::{files, run_pipeline, ExperimentConfig, METHODS};
use diffdistill::schedule::NoiseSchedule;
use diffdistill::selection::{class_contribution, select_bruteforce, select_greedy, SelectionParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn greedy_matches_exhaustive_search() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst_gap: f64 = 0.0;
    let mut mismatches = 0;
    for _ in 0..50 {
        let c = 2 + rng.below(3);
        let g = 2 + rng.below(4);
        let d = if rng.below(2) == 0 { 3 } else { 8 };
        let pool = random_pool(&mut rng, c, g, d);
        let params = SelectionParams::new(0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform());
        let greedy = select_greedy(&pool, &params).unwrap();
        let brute = select_bruteforce(&pool, &params).unwrap();
        worst_gap = worst_gap.max((greedy.objective_value - brute.objective_value).abs());
        if greedy.groups != brute.groups {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_gap <= 1e-10 && mismatches == 0 && secs < 60.0,
        format!("50 pools, max |objective gap| {worst_gap:.2e}, assignment mismatches {mismatches}, {secs:.2}s"),
    )
}

fn per_class_argmin_is_global_argmin() -> Outcome {
    let mut rng = Rng::new(77);
    let mut mismatches = 0;
    for _ in 0..20 {
        let c = 2 + rng.below(3);
        let g = 2 + rng.below(4);
        let pool = random_pool(&mut rng, c, g, 5);
        let (alpha, beta) = (0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform());
        let params = SelectionParams::new(alpha, beta);
        let per_class: Vec<usize> = (0..c)
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for h in 0..g {
                    let v = class_contribution(&pool, i, h, &params).unwrap();
                    if v < best.1 {
                        best = (h, v);
                    }
                }
                best.0
            })
            .collect();
        let (global, _) = exhaustive_argmin(&pool, alpha, beta);
        if per_class != global {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("20 pools, {mismatches} disagreements with exhaustive search"))
}

fn total_loss_gradient_matches_finite_differences() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    for seed in 0..20 {
        let (schedule, params, z0, class, draw) = gradient_case(seed);
        for (k, depth) in [BackpropDepth::LastStepOnly, BackpropDepth::FullTrajectory].into_iter().enumerate() {
            let a = analytic_gradient(&schedule, &params, &z0, class, &draw, 0.1, 8, depth);
            let f = fd_gradient(&schedule, &params, &z0, class, &draw, 0.1, 8, depth, 1e-3);
            for (x, y) in a.iter().zip(&f) {
                worst[k] = worst[k].max((x - y).abs() / x.abs().max(y.abs()).max(1e-8));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst[0] < 1e-4 && worst[1] < 1e-4 && secs < 120.0,
        format!(
            "20 seeds, d=4, max per-parameter relative error: last-step {:.2e}, full-trajectory {:.2e}, {secs:.1}s",
            worst[0], worst[1]
        ),
    )
}

fn sampler_and_inversion_consistency() -> Outcome {
    let schedule = desk_schedule();
    let mut rng = Rng::new(5);

    // Exact noise prediction: noising followed by the clean-latent estimate.
    let mut worst_a: f64 = 0.0;
    for _ in 0..20 {
        let z0 = rng.gaussian_vec(6);
        let eps = rng.gaussian_vec(6);
        for t in 1..=schedule.steps() {
            let z_t = forward_noise(&schedule, &z0, t, &eps).unwrap();
            let back = z0_from_eps(&z_t, &eps, schedule.alpha_bar(t));
            for (a, b) in back.iter().zip(&z0) {
                worst_a = worst_a.max((a - b).abs());
            }
        }
    }

    // Zero network: inversion only rescales.
    let zero = DenoiserParams::zeros(DenoiserConfig::new(6, 2), schedule.steps());
    let mut worst_b: f64 = 0.0;
    for _ in 0..20 {
        let z0 = rng.gaussian_vec(6);
        let t = 1 + rng.below(schedule.steps());
        let z_inv = invert(&schedule, &zero, &z0, t, 1, 1 + rng.below(50)).unwrap();
        let scale = schedule.alpha_bar(t).sqrt();
        for (a, b) in z_inv.iter().zip(&z0) {
            worst_b = worst_b.max((a - scale * b).abs());
        }
    }

    // Trained model: invert to T, then sample back.
    let (schedule, params, data) = trained_toy_model();
    let round_trip = |steps: usize| {
        let mut total = 0.0;
        for i in 0..100 {
            let idx = (i * 7) % data.len();
            let (z0, c) = (&data.latents[idx], data.labels[idx]);
            let z_t = invert(&schedule, &params, z0, schedule.steps(), c, steps).unwrap();
            let back = sample_from_noise(&schedule, &params, &z_t, c, steps).unwrap();
            let err: f64 = back.iter().zip(z0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            total += err / z0.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        total / 100.0
    };
    let e50 = round_trip(50);
    let (e10, e20, e40) = (round_trip(10), round_trip(20), round_trip(40));

    let pass = worst_a <= 1e-10 && worst_b <= 1e-12 && e50 < 5e-2 && e10 >= e20 && e20 >= e40;
    outcome(
        pass,
        format!(
            "(a) max err {worst_a:.2e}; (b) max err {worst_b:.2e}; (c) round trip 50 steps {e50:.4}, 10/20/40 steps {e10:.4}/{e20:.4}/{e40:.4}"
        ),
    )
}

/// Double-double arithmetic (about 32 significant digits).
#[derive(Clone, Copy)]
struct Dd(f64, f64);

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd(s, (a - (s - bb)) + (b - bb))
}

impl Dd {
    fn from(x: f64) -> Self {
        Dd(x, 0.0)
    }
    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.0, o.0);
        let e = s.1 + self.1 + o.1;
        two_sum(s.0, e)
    }
    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }
    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p) + self.0 * o.1 + self.1 * o.0;
        two_sum(p, e)
    }
    fn div_f64(self, d: f64) -> Dd {
        let q1 = self.0 / d;
        let r = self.add(Dd::from(q1).mul(Dd::from(d)).neg());
        let q2 = r.0 / d;
        two_sum(q1, q2)
    }
}

fn schedule_matches_extended_precision() -> Outcome {
    let (t_max, b0, b1) = (1000usize, 1e-4, 0.02);
    let schedule = NoiseSchedule::linear(t_max, b0, b1).unwrap();
    let span = Dd::from(b1).add(Dd::from(b0).neg());
    let mut prod = Dd::from(1.0);
    let mut worst: f64 = 0.0;
    for t in 1..=t_max {
        let beta = Dd::from(b0).add(span.mul(Dd::from((t - 1) as f64)).div_f64((t_max - 1) as f64));
        prod = prod.mul(Dd::from(1.0).add(beta.neg()));
        let exact = prod.0 + prod.1;
        worst = worst.max((schedule.alpha_bar(t) - exact).abs() / exact);
    }
    // Independent 50-digit evaluations at selected steps.
    let frozen = [
        (2, 0.999_780_092_072_072_072_07),
        (500, 0.078_587_242_881_778_237_3),
        (980, 6.021_910_415_675_235_5e-5),
        (1000, 4.035_829_765_375_683_3e-5),
    ];
    let worst_frozen = frozen
        .iter()
        .map(|&(t, v)| (schedule.alpha_bar(t) - v).abs() / v)
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-9 && worst_frozen <= 1e-9,
        format!("max relative error vs double-double product {worst:.2e}, vs frozen 50-digit values {worst_frozen:.2e}"),
    )
}

fn selected_reference_similarity_grows_with_alpha() -> Outcome {
    let mut rng = Rng::new(31);
    let mut violations = 0;
    for _ in 0..10 {
        let pool = random_pool(&mut rng, 4, 6, 8);
        let mut last = vec![f64::NEG_INFINITY; 4];
        for k in 1..=9 {
            let alpha = k as f64 / 10.0;
            let a = select_greedy(&pool, &SelectionParams::new(alpha, 0.5)).unwrap();
            for (i, &g) in a.groups.iter().enumerate() {
                let s = cosine_similarity(pool.centroid(i, g), &pool.real_centroids()[i]).unwrap();
                if s < last[i] {
                    violations += 1;
                }
                last[i] = s;
            }
        }
    }
    outcome(violations == 0, format!("10 pools, alpha 0.1..0.9 at beta 0.5, {violations} decreases"))
}

fn instability_probe_calibration() -> Outcome {
    let z = [0.3, -1.1, 2.0, 0.5];
    let h = DEFAULT_FD_STEP;
    let id = instability_coefficient(|x| x.to_vec(), &z, h).unwrap();
    let sc = instability_coefficient(|x| x.iter().map(|v| 3.0 * v).collect(), &z, h).unwrap();
    let dg = instability_coefficient(|x| vec![2.0 * x[0], 0.5 * x[1]], &z[..2], h).unwrap();

    let schedule = desk_schedule();
    let params = DenoiserParams::zeros(DenoiserConfig::new(4, 2), schedule.steps());
    let steps = 25;
    let grid = schedule.timestep_grid(steps).unwrap();
    let mut expected = 1.0;
    for k in (0..grid.len()).rev() {
        let prev = if k == 0 { 1.0 } else { schedule.alpha_bar(grid[k - 1]) };
        expected *= (prev / schedule.alpha_bar(grid[k])).sqrt();
    }
    let report = probe_flow(&schedule, &params, 0, 10, steps, h, &mut Rng::new(3)).unwrap();
    let flow_err = report.coefficients.iter().map(|c| (c - expected).abs()).fold(0.0, f64::max);

    let errs = [(id - 1.0).abs(), (sc - 3.0).abs(), (dg - 1.0).abs()];
    outcome(
        errs.iter().all(|e| *e <= 1e-6) && flow_err <= 1e-4,
        format!(
            "identity {id:.9}, scale-3 {sc:.9}, diag(2,0.5) {dg:.9}; zero-network flow max err {flow_err:.2e} (closed form {expected:.6})"
        ),
    )
}

fn summary_row(out: &Path, method: &str) -> f64 {
    let text = std::fs::read_to_string(out.join(files::SUMMARY)).unwrap();
    text.lines()
        .find(|l| l.starts_with(&format!("{method},")))
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap()
}

fn full_method_beats_vanilla_sampling() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut table_ok = true;
    for seed in 0..3u64 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let out = dir.path().join(format!("seed_{seed}"));
        let manifest = run_pipeline(&cfg, &out).unwrap();
        let names: Vec<&str> = manifest.methods.iter().map(|m| m.method.as_str()).collect();
        table_ok &= names == METHODS;
        let row: Vec<String> = METHODS
            .iter()
            .map(|m| format!("{m} {:.3}", summary_row(&out, m)))
            .collect();
        let (full, vanilla) = (summary_row(&out, "im_s3"), summary_row(&out, "vanilla"));
        if full >= vanilla {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {}", row.join(", ")));
    }
    let elapsed = start.elapsed();
    outcome(
        wins >= 2 && table_ok && elapsed < Duration::from_secs(600),
        format!(
            "IM+S3 >= vanilla in {wins}/3 seeds, {:.1}s total\n      {}",
            elapsed.as_secs_f64(),
            lines.join("\n      ")
        ),
    )
}

fn pipeline_is_byte_deterministic() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seed: 4,
        ..ExperimentConfig::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&cfg, &a).unwrap();
    run_pipeline(&cfg, &b).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let checked = [files::SUMMARY, files::RESULTS, files::FINETUNED];
    let differing: Vec<&str> = checked.iter().copied().filter(|f| !same(f)).collect();
    outcome(
        differing.is_empty(),
        format!("two runs, seed 4: differing files {differing:?} among {checked:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("selection oracle equivalence", greedy_matches_exhaustive_search),
        ("separability", per_class_argmin_is_global_argmin),
        ("gradient fidelity", total_loss_gradient_matches_finite_differences),
        ("DDIM / inversion consistency", sampler_and_inversion_consistency),
        ("schedule correctness", schedule_matches_extended_precision),
        ("alpha monotonicity", selected_reference_similarity_grows_with_alpha),
        ("instability probe calibration", instability_probe_calibration),
        ("end-to-end desk pipeline", full_method_beats_vanilla_sampling),
        ("determinism", pipeline_is_byte_deterministic),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "acceptance {} [{}] {name}: {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
