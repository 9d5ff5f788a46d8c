//! Experiment orchestration. Every stage reads its inputs from and writes its
//! outputs to one artifact directory, so the CLI can run stages separately
//! and [`run_pipeline`] is just the stages in order.

mod config;
mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{fit_feature_extractor, generate_gmm, make_distilled, DataError, FeatureExtractor, LabeledDataset, Split};
use crate::denoiser::{read_checkpoint, write_checkpoint, CheckpointError, DenoiserParams};
use crate::diffusion::{DiffusionError, LatentBatch};
use crate::eval::{compare_methods, write_results_csv, write_summary_csv, EvalError, EvalReport};
use crate::finetune::{finetune, pretrain, write_loss_log, FinetuneError};
use crate::instability::{probe_flow, InstabilityError, InstabilityReport};
use crate::io::{create_file, CsvError};
use crate::math::Rng;
use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::selection::{build_pool, select_greedy, CandidatePool, SelectionAssignment, SelectionError};

pub use config::{DataConfig, DenoiserShape, EvalConfig, ExperimentConfig, InstabilityConfig, SelectionConfig};
pub use sweep::{run_sweep, write_sweep_csv, SweepAxis, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Pretrain,
    Finetune,
    Pool,
    Select,
    Eval,
    Manifest,
    Sweep,
    Instability,
    Embeddings,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Pool => "pool",
            Stage::Select => "select",
            Stage::Eval => "eval",
            Stage::Manifest => "manifest",
            Stage::Sweep => "sweep",
            Stage::Instability => "instability",
            Stage::Embeddings => "export-embeddings",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Instability(#[from] InstabilityError),
    #[error(transparent)]
    Math(#[from] crate::math::MathError),
}

/// A stage failure. Artifacts of earlier stages stay on disk.
#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

fn at<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

/// Method names in table order.
pub const METHODS: [&str; 5] = ["random", "vanilla", "im_only", "s3_only", "im_s3"];

/// Artifact file names inside the output directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const SCHEDULE: &str = "schedule.csv";
    pub const TRAIN: &str = "train.csv";
    pub const TEST: &str = "test.csv";
    pub const PRETRAINED: &str = "pretrained.ckpt";
    pub const FINETUNED: &str = "finetuned.ckpt";
    pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
    pub const FINETUNE_LOSS: &str = "finetune_loss.csv";
    pub const RESULTS: &str = "results.csv";
    pub const SUMMARY: &str = "summary.csv";
    pub const MANIFEST: &str = "manifest.json";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const INSTABILITY: &str = "instability.csv";
    pub const INSTABILITY_SUMMARY: &str = "instability_summary.json";

    pub fn pool_centroids(generator: &str) -> String {
        format!("pool_{generator}_centroids.csv")
    }
    pub fn pool_members(generator: &str) -> String {
        format!("pool_{generator}_members.csv")
    }
    pub fn selection(generator: &str, rule: &str) -> String {
        format!("selection_{generator}_{rule}.json")
    }
    pub fn distilled(method: &str) -> String {
        format!("distilled_{method}.csv")
    }
}

/// The two generators: before and after inversion-matching fine-tuning.
const GENERATORS: [(&str, &str); 2] = [("vanilla", files::PRETRAINED), ("im", files::FINETUNED)];

fn master(cfg: &ExperimentConfig) -> Rng {
    Rng::new(cfg.seed)
}

fn read_dataset(path: &Path, split: Split) -> Result<LabeledDataset, StageError> {
    Ok(LabeledDataset::read_csv(BufReader::new(File::open(path)?), split)?)
}

fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<(), StageError> {
    ds.write_csv(create_file(path)?)?;
    Ok(())
}

fn read_params(path: &Path) -> Result<DenoiserParams, StageError> {
    Ok(read_checkpoint(BufReader::new(File::open(path)?))?)
}

fn write_params(path: &Path, params: &DenoiserParams) -> Result<(), StageError> {
    let mut out = create_file(path)?;
    write_checkpoint(params, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut out = create_file(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn timed<T>(stage: Stage, f: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    let start = Instant::now();
    let out = f()?;
    log::info!("stage {stage} done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn schedule(cfg: &ExperimentConfig, stage: Stage) -> Result<NoiseSchedule, PipelineError> {
    cfg.schedule.build().map_err(at(stage))
}

/// Draws the train/test mixture; writes the resolved config and the schedule table.
pub fn stage_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    timed(Stage::Data, || {
        let run = || -> Result<(), StageError> {
            cfg.validate()?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join(files::CONFIG), cfg.to_json() + "\n")?;
            cfg.schedule.build()?.write_csv(create_file(&out.join(files::SCHEDULE))?)?;
            let (train, test) = generate_gmm(&cfg.data.spec()?, &mut master(cfg).derive("data"))?;
            write_dataset(&out.join(files::TRAIN), &train)?;
            write_dataset(&out.join(files::TEST), &test)
        };
        run().map_err(at(Stage::Data))
    })
}

fn train_batch(out: &Path) -> Result<LatentBatch, StageError> {
    let train = read_dataset(&out.join(files::TRAIN), Split::Train)?;
    Ok(LatentBatch::new(train.samples, train.labels, 0)?)
}

/// Plain diffusion training from a fresh initialization.
pub fn stage_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    timed(Stage::Pretrain, || {
        let sched = schedule(cfg, Stage::Pretrain)?;
        let run = || -> Result<(), StageError> {
            let data = train_batch(out)?;
            let m = master(cfg);
            let mut params = DenoiserParams::init(cfg.denoiser_config(), sched.steps(), &mut m.derive("denoiser-init"));
            let log = pretrain(&mut params, &sched, &data, &cfg.pretrain, &mut m.derive("pretrain"))?;
            write_loss_log(&log, create_file(&out.join(files::PRETRAIN_LOSS))?)?;
            write_params(&out.join(files::PRETRAINED), &params)
        };
        run().map_err(at(Stage::Pretrain))
    })
}

/// Inversion-matching fine-tuning of the pretrained generator.
pub fn stage_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    timed(Stage::Finetune, || {
        let sched = schedule(cfg, Stage::Finetune)?;
        let run = || -> Result<(), StageError> {
            let data = train_batch(out)?;
            let mut params = read_params(&out.join(files::PRETRAINED))?;
            let log = finetune(&mut params, &sched, &data, &cfg.finetune, &mut master(cfg).derive("finetune"))?;
            write_loss_log(&log, create_file(&out.join(files::FINETUNE_LOSS))?)?;
            write_params(&out.join(files::FINETUNED), &params)
        };
        run().map_err(at(Stage::Finetune))
    })
}

/// φ fitted on the real train split (deterministic given the config).
pub fn feature_extractor(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<FeatureExtractor, StageError> {
    Ok(fit_feature_extractor(
        train,
        &cfg.eval.feature_extractor,
        &mut master(cfg).derive("feature-extractor"),
    )?)
}

pub fn real_features_by_class(
    phi: &FeatureExtractor,
    train: &LabeledDataset,
    n_classes: usize,
) -> Result<Vec<Vec<Vec<f64>>>, StageError> {
    (0..n_classes)
        .map(|c| Ok(phi.features_batch(&train.class_samples(c))?))
        .collect()
}

/// Rng handed to [`build_pool`]; shared by both generators so their pools
/// start from the same noise latents.
pub fn pool_rng(cfg: &ExperimentConfig) -> Rng {
    master(cfg).derive("pool")
}

/// Candidate pools for both generators.
pub fn stage_pool(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    timed(Stage::Pool, || {
        let sched = schedule(cfg, Stage::Pool)?;
        let run = || -> Result<(), StageError> {
            let train = read_dataset(&out.join(files::TRAIN), Split::Train)?;
            let phi = feature_extractor(cfg, &train)?;
            let real = real_features_by_class(&phi, &train, cfg.data.n_classes)?;
            for (name, ckpt) in GENERATORS {
                let params = read_params(&out.join(ckpt))?;
                let pool = build_pool(&sched, &params, &real, &phi, &cfg.selection.pool(), &mut pool_rng(cfg))?;
                pool.write_centroids_csv(create_file(&out.join(files::pool_centroids(name)))?)?;
                pool.write_members_csv(create_file(&out.join(files::pool_members(name)))?)?;
            }
            Ok(())
        };
        run().map_err(at(Stage::Pool))
    })
}

pub fn read_pool(out: &Path, generator: &str) -> Result<CandidatePool, StageError> {
    let c = BufReader::new(File::open(out.join(files::pool_centroids(generator)))?);
    let m = BufReader::new(File::open(out.join(files::pool_members(generator)))?);
    Ok(CandidatePool::read_csv(c, m)?)
}

/// IPC real training samples per class, uniformly without replacement.
pub fn random_real_subset(train: &LabeledDataset, n_classes: usize, ipc: usize, rng: &mut Rng) -> Result<LabeledDataset, StageError> {
    let groups = (0..n_classes)
        .map(|c| {
            let pool = train.class_samples(c);
            if pool.len() < ipc {
                return Err(StageError::Config(format!("class {c} has {} samples, ipc is {ipc}", pool.len())));
            }
            Ok(rng.sample_indices(pool.len(), ipc).into_iter().map(|i| pool[i].clone()).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(make_distilled(&groups, ipc)?)
}

/// One uniformly random subgroup per class.
pub fn random_assignment(pool: &CandidatePool, rng: &mut Rng) -> Vec<usize> {
    (0..pool.n_classes()).map(|_| rng.below(pool.n_groups())).collect()
}

/// S³ and random subgroup choices for both pools, plus all five distilled sets.
pub fn stage_select(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    timed(Stage::Select, || {
        let run = || -> Result<(), StageError> {
            let params = cfg.selection.params();
            let ipc = cfg.selection.ipc;
            for (name, _) in GENERATORS {
                let pool = read_pool(out, name)?;
                let s3 = select_greedy(&pool, &params)?;
                let random = SelectionAssignment::new(
                    &pool,
                    random_assignment(&pool, &mut master(cfg).derive("random-subgroup")),
                    &params,
                )?;
                log::info!("{name}: S3 {:?} ({:.6}), random {:?} ({:.6})", s3.groups, s3.objective_value, random.groups, random.objective_value);
                let (random_method, s3_method) = if name == "vanilla" { ("vanilla", "s3_only") } else { ("im_only", "im_s3") };
                for (rule, method, a) in [("random", random_method, &random), ("s3", s3_method, &s3)] {
                    write_json(&out.join(files::selection(name, rule)), &a.to_json())?;
                    let ds = make_distilled(&pool.selected_latents(&a.groups), ipc)?;
                    write_dataset(&out.join(files::distilled(method)), &ds)?;
                }
            }
            let train = read_dataset(&out.join(files::TRAIN), Split::Train)?;
            let random = random_real_subset(&train, cfg.data.n_classes, ipc, &mut master(cfg).derive("random-real"))?;
            write_dataset(&out.join(files::distilled("random")), &random)
        };
        run().map_err(at(Stage::Select))
    })
}

/// Downstream evaluation of the five distilled sets.
pub fn stage_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<EvalReport>, PipelineError> {
    timed(Stage::Eval, || {
        let run = || -> Result<Vec<EvalReport>, StageError> {
            let test = read_dataset(&out.join(files::TEST), Split::Test)?;
            let methods = METHODS
                .iter()
                .map(|m| Ok((m.to_string(), read_dataset(&out.join(files::distilled(m)), Split::Distilled)?)))
                .collect::<Result<Vec<_>, StageError>>()?;
            let reports = compare_methods(&methods, &test, cfg.selection.ipc, &cfg.eval.seeds, &cfg.eval.classifier)?;
            write_results_csv(&reports, create_file(&out.join(files::RESULTS))?)?;
            write_summary_csv(&reports, create_file(&out.join(files::SUMMARY))?)?;
            Ok(reports)
        };
        run().map_err(at(Stage::Eval))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// File name to SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
    pub eval_fingerprint: String,
    pub methods: Vec<MethodRow>,
}

pub fn write_manifest(cfg: &ExperimentConfig, out: &Path, reports: &[EvalReport]) -> Result<Manifest, PipelineError> {
    let run = || -> Result<Manifest, StageError> {
        let checkpoints = [files::PRETRAINED, files::FINETUNED]
            .iter()
            .map(|f| Ok((f.to_string(), file_sha256(&out.join(f))?)))
            .collect::<Result<BTreeMap<_, _>, StageError>>()?;
        let manifest = Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            checkpoints,
            eval_fingerprint: reports.first().map(|r| r.fingerprint.clone()).unwrap_or_default(),
            methods: reports
                .iter()
                .map(|r| MethodRow {
                    method: r.method.clone(),
                    mean: r.mean,
                    std: r.std,
                })
                .collect(),
        };
        write_json(&out.join(files::MANIFEST), &manifest)?;
        Ok(manifest)
    };
    run().map_err(at(Stage::Manifest))
}

/// data → pretrain → finetune → pool → select → eval → manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    cfg.validate().map_err(at(Stage::Config))?;
    stage_data(cfg, out)?;
    stage_pretrain(cfg, out)?;
    stage_finetune(cfg, out)?;
    stage_pool(cfg, out)?;
    stage_select(cfg, out)?;
    let reports = stage_eval(cfg, out)?;
    write_manifest(cfg, out, &reports)
}

/// Instability probe of the fine-tuned generator (pretrained if no
/// fine-tuned checkpoint exists).
pub fn stage_instability(cfg: &ExperimentConfig, out: &Path) -> Result<InstabilityReport, PipelineError> {
    timed(Stage::Instability, || {
        let sched = schedule(cfg, Stage::Instability)?;
        let run = || -> Result<InstabilityReport, StageError> {
            let path = [files::FINETUNED, files::PRETRAINED]
                .iter()
                .map(|f| out.join(f))
                .find(|p| p.exists())
                .ok_or_else(|| StageError::Config("no checkpoint in output directory".into()))?;
            let params = read_params(&path)?;
            let ic = &cfg.instability;
            let report = probe_flow(
                &sched,
                &params,
                ic.class_id,
                ic.n_probes,
                ic.sample_steps,
                ic.fd_step,
                &mut master(cfg).derive("instability"),
            )?;
            report.write_csv(create_file(&out.join(files::INSTABILITY))?)?;
            write_json(&out.join(files::INSTABILITY_SUMMARY), &report.summary())?;
            Ok(report)
        };
        run().map_err(at(Stage::Instability))
    })
}

/// φ-features of the real train split and of every distilled set present,
/// as `source,label,f_1..f_D`.
pub fn stage_export_embeddings(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, PipelineError> {
    let run = || -> Result<PathBuf, StageError> {
        let train = read_dataset(&out.join(files::TRAIN), Split::Train)?;
        let phi = feature_extractor(cfg, &train)?;
        let mut sources = vec![("real".to_string(), train)];
        for m in METHODS {
            let p = out.join(files::distilled(m));
            if p.exists() {
                sources.push((m.to_string(), read_dataset(&p, Split::Distilled)?));
            }
        }
        let path = out.join(files::EMBEDDINGS);
        let mut w = create_file(&path)?;
        write!(w, "source,label")?;
        for k in 1..=phi.feature_dim() {
            write!(w, ",f_{k}")?;
        }
        writeln!(w)?;
        for (name, ds) in &sources {
            for (x, y) in ds.samples.iter().zip(&ds.labels) {
                write!(w, "{name},{y}")?;
                for v in phi.features(x)? {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(path)
    };
    run().map_err(at(Stage::Embeddings))
}
