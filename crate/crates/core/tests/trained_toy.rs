mod common;

use common::*;
use diffdistill::classifier::ClassifierRecipe;
use diffdistill::data::{fit_feature_extractor, generate_gmm, GmmSpec, LabeledDataset, Split};
use diffdistill::denoiser::{DenoiserConfig, DenoiserParams};
use diffdistill::diffusion::{sample, LatentBatch};
use diffdistill::finetune::{pretrain, PretrainConfig};
use diffdistill::instability::probe_flow;
use diffdistill::math::{mean_vector, Rng};
use diffdistill::pipeline::{self, files, run_sweep, ExperimentConfig, SweepAxis};
use diffdistill::selection::{build_pool, PoolConfig};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn diffusion_loss_halves_over_training() {
    let schedule = desk_schedule();
    let spec = GmmSpec::simplex(2, 2, 3.0, 0.5, 200, 1).unwrap();
    let mut rng = Rng::new(21);
    let (train, _) = generate_gmm(&spec, &mut rng).unwrap();
    let data = LatentBatch::new(train.samples, train.labels, 0).unwrap();
    let mut params = DenoiserParams::init(DenoiserConfig::new(2, 2), schedule.steps(), &mut rng);
    let cfg = PretrainConfig {
        epochs: 200,
        batch_size: 32,
        lr: 2e-3,
    };
    let log = pretrain(&mut params, &schedule, &data, &cfg, &mut rng).unwrap();
    let epoch_mean = |e: usize| {
        let rows: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss_diff).collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let (first, last) = (epoch_mean(0), epoch_mean(199));
    assert!(last < 0.5 * first, "epoch 1 {first}, epoch 200 {last}");
}

#[test]
fn samples_land_on_their_class_mode() {
    let (schedule, params, _) = trained_toy_model();
    let spec = GmmSpec::simplex(2, 2, 3.0, 0.5, 1, 1).unwrap();
    let mut rng = Rng::new(40);
    for (class, mean) in spec.means.iter().enumerate() {
        let xs: Vec<Vec<f64>> = (0..500)
            .map(|_| sample(&schedule, &params, &mut rng, class, 50).unwrap())
            .collect();
        let m = mean_vector(&xs);
        assert!(dist(&m, mean) < 0.25, "class {class}: sample mean {m:?}");
    }
}

#[test]
fn pooled_features_track_real_features() {
    let (schedule, params, data) = trained_toy_model();
    let train = LabeledDataset::new(data.latents.clone(), data.labels.clone(), Split::Train);
    let mut rng = Rng::new(41);
    let extractor = fit_feature_extractor(&train, &ClassifierRecipe::feature_extractor(), &mut rng).unwrap();
    let real: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|c| extractor.features_batch(&train.class_samples(c)).unwrap())
        .collect();
    let cfg = PoolConfig {
        n_groups: 10,
        group_size: 10,
        k_real: 50,
        sample_steps: 50,
    };
    let pool = build_pool(&schedule, &params, &real, &extractor, &cfg, &mut rng).unwrap();
    for (c, feats) in real.iter().enumerate() {
        let generated: Vec<Vec<f64>> = (0..cfg.n_groups)
            .flat_map(|g| pool.subgroup(c, g).features.clone())
            .collect();
        let d = dist(&mean_vector(&generated), &mean_vector(feats));
        assert!(d < 0.5, "class {c}: feature mean distance {d}");
    }
}

#[test]
fn trained_flow_has_finite_positive_instability() {
    let (schedule, params, _) = trained_toy_model();
    let report = probe_flow(&schedule, &params, 0, 50, 50, 1e-4, &mut Rng::new(42)).unwrap();
    assert_eq!(report.coefficients.len(), 50);
    assert!(report.coefficients.iter().all(|c| c.is_finite() && *c > 0.0));
    let s = report.summary().unwrap();
    assert!(s.min <= s.median && s.median <= s.max);
}

#[test]
fn default_training_logs_stay_finite() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let out = dir.path().join(seed.to_string());
        pipeline::stage_data(&cfg, &out).unwrap();
        pipeline::stage_pretrain(&cfg, &out).unwrap();
        pipeline::stage_finetune(&cfg, &out).unwrap();
        let text = std::fs::read_to_string(out.join(files::FINETUNE_LOSS)).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 8 * (1000usize).div_ceil(8));
        for row in rows {
            for v in row.split(',').skip(2) {
                assert!(v.parse::<f64>().unwrap().is_finite(), "seed {seed}: {row}");
            }
        }
    }
}

#[test]
fn lambda_sweep_writes_one_row_per_value() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_classes = 3;
    cfg.data.dim = 4;
    cfg.data.n_train = 40;
    cfg.data.n_test = 40;
    cfg.denoiser.hidden = vec![16, 16];
    cfg.pretrain.epochs = 10;
    cfg.finetune.epochs = 1;
    cfg.selection.ipc = 2;
    cfg.selection.n_groups = 3;
    cfg.selection.k_real = 10;
    cfg.selection.sample_steps = 10;
    cfg.eval.seeds = vec![0];
    cfg.eval.classifier.epochs = 20;
    cfg.eval.feature_extractor.epochs = 5;
    let dir = tempfile::tempdir().unwrap();
    let values = [0.002, 0.008, 0.4, 0.8];
    let rows = run_sweep(&cfg, SweepAxis::LambdaIm, &values, dir.path()).unwrap();
    let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda_im).collect();
    assert_eq!(lambdas, values);
    let csv = std::fs::read_to_string(dir.path().join("sweep_lambda_im.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("axis,lambda_im,alpha,beta,G,K_i,mean,std,generator_hash"));
}
