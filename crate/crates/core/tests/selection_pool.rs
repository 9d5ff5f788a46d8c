mod common;

use common::*;
use diffdistill::classifier::ClassifierRecipe;
use diffdistill::data::{fit_feature_extractor, generate_gmm, FeatureExtractor, GmmSpec};
use diffdistill::denoiser::{DenoiserConfig, DenoiserParams};
use diffdistill::math::Rng;
use diffdistill::selection::{
    build_pool, real_centroids, select_bruteforce, select_greedy, selection_objective, CandidatePool, PoolConfig, SelectionAssignment,
    SelectionParams, Subgroup,
};
use proptest::prelude::*;

struct Setup {
    params: DenoiserParams,
    extractor: FeatureExtractor,
    real_features: Vec<Vec<Vec<f64>>>,
}

fn setup() -> Setup {
    let schedule = desk_schedule();
    let spec = GmmSpec::simplex(3, 4, 2.0, 1.0, 30, 1).unwrap();
    let mut rng = Rng::new(3);
    let (train, _) = generate_gmm(&spec, &mut rng).unwrap();
    let recipe = ClassifierRecipe {
        epochs: 5,
        ..ClassifierRecipe::feature_extractor()
    };
    let extractor = fit_feature_extractor(&train, &recipe, &mut rng).unwrap();
    let real_features = (0..3)
        .map(|c| extractor.features_batch(&train.class_samples(c)).unwrap())
        .collect();
    let params = DenoiserParams::init(DenoiserConfig::new(4, 3), schedule.steps(), &mut rng);
    Setup {
        params,
        extractor,
        real_features,
    }
}

fn pool_with(s: &Setup, cfg: &PoolConfig, seed: u64) -> CandidatePool {
    build_pool(&desk_schedule(), &s.params, &s.real_features, &s.extractor, cfg, &mut Rng::new(seed)).unwrap()
}

const SMALL: PoolConfig = PoolConfig {
    n_groups: 3,
    group_size: 2,
    k_real: 5,
    sample_steps: 10,
};

#[test]
fn pool_is_deterministic_and_seed_sensitive() {
    let s = setup();
    let a = pool_with(&s, &SMALL, 1);
    assert_eq!(a, pool_with(&s, &SMALL, 1));
    assert_ne!(a, pool_with(&s, &SMALL, 2));
    assert_eq!((a.n_classes(), a.n_groups()), (3, 3));
    assert_eq!(a.subgroup(2, 1).latents.len(), 2);
}

#[test]
fn single_group_single_real_sample() {
    let s = setup();
    let cfg = PoolConfig {
        n_groups: 1,
        group_size: 1,
        k_real: 1,
        sample_steps: 5,
    };
    let pool = pool_with(&s, &cfg, 4);
    let a = select_greedy(&pool, &SelectionParams::new(0.5, 0.5)).unwrap();
    assert_eq!(a.groups, vec![0, 0, 0]);
    assert!(a.objective_value.is_finite());
}

#[test]
fn changing_k_real_keeps_candidates() {
    let s = setup();
    let a = pool_with(&s, &SMALL, 1);
    let b = pool_with(&s, &PoolConfig { k_real: 20, ..SMALL }, 1);
    for i in 0..3 {
        for g in 0..3 {
            assert_eq!(a.centroid(i, g), b.centroid(i, g));
        }
    }
    assert_ne!(a.real_centroids(), b.real_centroids());
}

#[test]
fn pool_csv_round_trip() {
    let s = setup();
    let pool = pool_with(&s, &SMALL, 5);
    let (mut cents, mut members) = (Vec::new(), Vec::new());
    pool.write_centroids_csv(&mut cents).unwrap();
    pool.write_members_csv(&mut members).unwrap();
    let back = CandidatePool::read_csv(cents.as_slice(), members.as_slice()).unwrap();
    assert_eq!(back, pool);
}

#[test]
fn tampered_centroid_file_is_rejected() {
    let s = setup();
    let pool = pool_with(&s, &SMALL, 5);
    let (mut cents, mut members) = (Vec::new(), Vec::new());
    pool.write_centroids_csv(&mut cents).unwrap();
    pool.write_members_csv(&mut members).unwrap();
    let text = String::from_utf8(cents).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.len() - 1;
    let mut fields: Vec<String> = lines[last].split(',').map(String::from).collect();
    fields[3] = format!("{}", fields[3].parse::<f64>().unwrap() + 1e-6);
    lines[last] = fields.join(",");
    let tampered = lines.join("\n") + "\n";
    assert!(CandidatePool::read_csv(tampered.as_bytes(), members.as_slice()).is_err());
}

#[test]
fn assignment_json_round_trip() {
    let mut rng = Rng::new(8);
    let pool = random_pool(&mut rng, 4, 3, 5);
    let a = select_greedy(&pool, &SelectionParams::new(0.3, 0.7)).unwrap();
    let back = SelectionAssignment::from_json(&a.to_json()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn identical_centroids_hit_the_clamp_floor() {
    let c = vec![1.0, 0.0, 0.0];
    let pool = CandidatePool::from_centroids(
        vec![c.clone(), vec![0.0, 1.0, 0.0]],
        vec![vec![c.clone(), vec![0.0, 0.0, 1.0]], vec![c.clone(), vec![0.0, 1.0, 0.0]]],
    )
    .unwrap();
    let params = SelectionParams::new(0.5, 0.5);
    let v = selection_objective(&pool, &[0, 1], &params).unwrap();
    assert!(v.is_finite());
    let expected = direct_objective(&pool, &[0, 1], 0.5, 0.5);
    assert!((v - expected).abs() < 1e-12);
    assert_eq!(select_greedy(&pool, &params).unwrap().groups, vec![0, 1]);
}

/// Pool built from raw member features multiplied by `scale`.
fn feature_pool(seed: u64, scale: f64) -> CandidatePool {
    let mut rng = Rng::new(seed);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| rng.gaussian_vec(6).into_iter().map(|v| (v + 1.0) * scale).collect())
            .collect()
    };
    let real_feats: Vec<Vec<Vec<f64>>> = (0..3).map(|_| draw(8)).collect();
    let subgroups = (0..3)
        .map(|_| {
            (0..4)
                .map(|_| Subgroup {
                    features: draw(3),
                    latents: Vec::new(),
                })
                .collect()
        })
        .collect();
    let real = real_centroids(&real_feats, 5, &mut Rng::new(seed + 1)).unwrap();
    CandidatePool::from_subgroups(real, subgroups).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_equals_oracle(seed in 0u64..10_000, c in 1usize..5, g in 1usize..5, alpha in 0.05f64..2.0, beta in 0.05f64..2.0) {
        let pool = random_pool(&mut Rng::new(seed), c, g, 4);
        let greedy = select_greedy(&pool, &SelectionParams::new(alpha, beta)).unwrap();
        let (groups, value) = exhaustive_argmin(&pool, alpha, beta);
        prop_assert_eq!(&greedy.groups, &groups);
        prop_assert!((greedy.objective_value - value).abs() <= 1e-10 * value.abs().max(1.0));
        let brute = select_bruteforce(&pool, &SelectionParams::new(alpha, beta)).unwrap();
        prop_assert_eq!(brute.groups, groups);
    }

    #[test]
    fn selection_ignores_feature_scale(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let params = SelectionParams::new(0.5, 0.5);
        let a = select_greedy(&feature_pool(seed, 1.0), &params).unwrap();
        let b = select_greedy(&feature_pool(seed, scale), &params).unwrap();
        prop_assert_eq!(a.groups, b.groups);
        prop_assert!((a.objective_value - b.objective_value).abs() < 1e-9);
    }
}
