//! Sensitivity sweeps. The λ_IM sweep re-runs fine-tuning per value on top of
//! one pretrained generator; the selection-stage sweeps (α×β, G, K_i) reuse a
//! single fine-tuned generator and candidate pool and only redo selection and
//! evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    at, feature_extractor, file_sha256, files, pool_rng, read_dataset, read_pool, real_features_by_class, stage_data,
    stage_finetune, stage_pool, stage_pretrain, stage_select, write_json, ExperimentConfig, PipelineError, Stage,
    StageError,
};
use crate::data::{make_distilled, Split};
use crate::eval::compare_methods;
use crate::io::create_file;
use crate::selection::{real_centroids, reference_rng, select_greedy, CandidatePool};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaIm,
    /// Every (α, β) pair from the value list.
    AlphaBetaGrid,
    /// Subgroups per class, G.
    Groups,
    /// Real samples per reference centroid, K_i.
    KReal,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda_im" => Ok(Self::LambdaIm),
            "alpha_beta_grid" => Ok(Self::AlphaBetaGrid),
            "G" | "n_groups" => Ok(Self::Groups),
            "K_i" | "k_real" => Ok(Self::KReal),
            other => Err(format!(
                "unknown sweep axis {other:?} (expected lambda_im, alpha_beta_grid, G or K_i)"
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LambdaIm => "lambda_im",
            Self::AlphaBetaGrid => "alpha_beta_grid",
            Self::Groups => "G",
            Self::KReal => "K_i",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_im: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_groups: usize,
    pub k_real: usize,
    /// IM+S³ accuracy over the evaluation seeds.
    pub mean: f64,
    pub std: f64,
    /// SHA-256 of the fine-tuned generator checkpoint used by this cell.
    pub generator_hash: String,
}

fn row(cfg: &ExperimentConfig, mean: f64, std: f64, generator_hash: String) -> SweepRow {
    SweepRow {
        lambda_im: cfg.finetune.lambda_im,
        alpha: cfg.selection.alpha,
        beta: cfg.selection.beta,
        n_groups: cfg.selection.n_groups,
        k_real: cfg.selection.k_real,
        mean,
        std,
        generator_hash,
    }
}

/// `axis,lambda_im,alpha,beta,G,K_i,mean,std,generator_hash`
pub fn write_sweep_csv<W: Write>(axis: SweepAxis, rows: &[SweepRow], out: W) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "axis,lambda_im,alpha,beta,G,K_i,mean,std,generator_hash")?;
    for r in rows {
        writeln!(
            out,
            "{axis},{},{},{},{},{},{},{},{}",
            r.lambda_im, r.alpha, r.beta, r.n_groups, r.k_real, r.mean, r.std, r.generator_hash
        )?;
    }
    out.flush()
}

fn as_count(v: f64) -> Result<usize, StageError> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(StageError::Config(format!("sweep value {v} is not a positive integer")))
    }
}

/// IM+S³ selection and evaluation on a fixed pool.
fn select_and_eval(
    cfg: &ExperimentConfig,
    pool: &CandidatePool,
    test: &crate::data::LabeledDataset,
    cell: &Path,
) -> Result<(f64, f64), StageError> {
    let a = select_greedy(pool, &cfg.selection.params())?;
    write_json(cell, &a.to_json())?;
    let ds = make_distilled(&pool.selected_latents(&a.groups), cfg.selection.ipc)?;
    let reports = compare_methods(
        &[("im_s3".to_string(), ds)],
        test,
        cfg.selection.ipc,
        &cfg.eval.seeds,
        &cfg.eval.classifier,
    )?;
    Ok((reports[0].mean, reports[0].std))
}

fn lambda_sweep(cfg: &ExperimentConfig, values: &[f64], base: &Path) -> Result<Vec<SweepRow>, PipelineError> {
    stage_data(cfg, base)?;
    stage_pretrain(cfg, base)?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let mut c = cfg.clone();
        c.finetune.lambda_im = v;
        c.validate().map_err(at(Stage::Sweep))?;
        let cell = base.join(format!("cell_{i:03}"));
        let prepare = || -> Result<(), StageError> {
            std::fs::create_dir_all(&cell)?;
            std::fs::write(cell.join(files::CONFIG), c.to_json() + "\n")?;
            for f in [files::TRAIN, files::TEST, files::PRETRAINED] {
                std::fs::copy(base.join(f), cell.join(f))?;
            }
            Ok(())
        };
        prepare().map_err(at(Stage::Sweep))?;
        stage_finetune(&c, &cell)?;
        stage_pool(&c, &cell)?;
        stage_select(&c, &cell)?;
        let finish = || -> Result<SweepRow, StageError> {
            let test = read_dataset(&cell.join(files::TEST), Split::Test)?;
            let ds = read_dataset(&cell.join(files::distilled("im_s3")), Split::Distilled)?;
            let r = compare_methods(&[("im_s3".to_string(), ds)], &test, c.selection.ipc, &c.eval.seeds, &c.eval.classifier)?;
            Ok(row(&c, r[0].mean, r[0].std, file_sha256(&cell.join(files::FINETUNED))?))
        };
        let r = finish().map_err(at(Stage::Sweep))?;
        log::info!("lambda_im = {v}: {:.4} ± {:.4}", r.mean, r.std);
        rows.push(r);
    }
    Ok(rows)
}

fn selection_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    base: &Path,
) -> Result<Vec<SweepRow>, PipelineError> {
    let mut pool_cfg = cfg.clone();
    if axis == SweepAxis::Groups {
        let counts = values.iter().map(|&v| as_count(v)).collect::<Result<Vec<_>, _>>().map_err(at(Stage::Sweep))?;
        pool_cfg.selection.n_groups = counts.into_iter().max().unwrap_or(cfg.selection.n_groups);
    }
    pool_cfg.validate().map_err(at(Stage::Sweep))?;
    stage_data(&pool_cfg, base)?;
    stage_pretrain(&pool_cfg, base)?;
    stage_finetune(&pool_cfg, base)?;
    stage_pool(&pool_cfg, base)?;

    let run = || -> Result<Vec<SweepRow>, StageError> {
        let pool = read_pool(base, "im")?;
        let test = read_dataset(&base.join(files::TEST), Split::Test)?;
        let generator_hash = file_sha256(&base.join(files::FINETUNED))?;
        let cell = |i: usize| base.join(format!("cell_{i:03}.json"));
        let mut rows = Vec::new();
        match axis {
            SweepAxis::AlphaBetaGrid => {
                for &a in values {
                    for &b in values {
                        let mut c = cfg.clone();
                        c.selection.alpha = a;
                        c.selection.beta = b;
                        let (mean, std) = select_and_eval(&c, &pool, &test, &cell(rows.len()))?;
                        log::info!("alpha = {a}, beta = {b}: {mean:.4}");
                        rows.push(row(&c, mean, std, generator_hash.clone()));
                    }
                }
            }
            SweepAxis::Groups => {
                for &v in values {
                    let mut c = cfg.clone();
                    c.selection.n_groups = as_count(v)?;
                    let (mean, std) = select_and_eval(&c, &pool.truncated(c.selection.n_groups)?, &test, &cell(rows.len()))?;
                    log::info!("G = {v}: {mean:.4}");
                    rows.push(row(&c, mean, std, generator_hash.clone()));
                }
            }
            SweepAxis::KReal => {
                let train = read_dataset(&base.join(files::TRAIN), Split::Train)?;
                let phi = feature_extractor(cfg, &train)?;
                let real = real_features_by_class(&phi, &train, cfg.data.n_classes)?;
                for &v in values {
                    let mut c = cfg.clone();
                    c.selection.k_real = as_count(v)?;
                    c.validate()?;
                    let refs = real_centroids(&real, c.selection.k_real, &mut reference_rng(&pool_rng(&c)))?;
                    let (mean, std) = select_and_eval(&c, &pool.with_real_centroids(refs)?, &test, &cell(rows.len()))?;
                    log::info!("K_i = {v}: {mean:.4}");
                    rows.push(row(&c, mean, std, generator_hash.clone()));
                }
            }
            SweepAxis::LambdaIm => unreachable!("handled by lambda_sweep"),
        }
        Ok(rows)
    };
    run().map_err(at(Stage::Sweep))
}

/// Runs one cell per value (per pair for the α×β grid) under
/// `out/sweep_<axis>/` and writes `out/sweep_<axis>.csv`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
) -> Result<Vec<SweepRow>, PipelineError> {
    cfg.validate().map_err(at(Stage::Config))?;
    if values.is_empty() {
        return Err(at(Stage::Sweep)(StageError::Config("no sweep values".into())));
    }
    let base = out.join(format!("sweep_{axis}"));
    let rows = match axis {
        SweepAxis::LambdaIm => lambda_sweep(cfg, values, &base)?,
        _ => selection_sweep(cfg, axis, values, &base)?,
    };
    let write = || -> Result<(), StageError> {
        write_sweep_csv(axis, &rows, create_file(&out.join(format!("sweep_{axis}.csv")))?)?;
        Ok(())
    };
    write().map_err(at(Stage::Sweep))?;
    Ok(rows)
}
