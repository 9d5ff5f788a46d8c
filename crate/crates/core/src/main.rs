use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffdistill::pipeline::{
    self, run_pipeline, run_sweep, ExperimentConfig, PipelineError, Stage, StageError, SweepAxis,
};

#[derive(Parser)]
#[command(name = "diffdistill", version, about = "Desk-scale diffusion dataset distillation")]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mixture data and pretrain the generator.
    Pretrain,
    /// Inversion-matching fine-tuning of the pretrained generator.
    Finetune,
    /// Build candidate subgroup pools for both generators.
    Pool,
    /// Select subgroups and write the distilled sets.
    Select,
    /// Evaluate all distilled sets and write the manifest.
    Eval,
    /// Every stage from data generation to the manifest.
    Pipeline,
    /// Sensitivity sweep over one axis.
    Sweep {
        /// lambda_im, alpha_beta_grid, G or K_i
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Instability coefficients of the sampling map.
    Instability,
    /// Feature-space embeddings of real and distilled sets.
    ExportEmbeddings,
    /// Print the resolved config as JSON.
    Config,
}

fn resolve(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), PipelineError> {
    let fail = |source: StageError| PipelineError {
        stage: Stage::Config,
        source,
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(fail)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(fail)?;
    let out = PathBuf::from(&cfg.out_dir);
    Ok((cfg, out))
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let (cfg, out) = resolve(cli)?;
    match &cli.command {
        Command::Pretrain => {
            pipeline::stage_data(&cfg, &out)?;
            pipeline::stage_pretrain(&cfg, &out)?;
        }
        Command::Finetune => pipeline::stage_finetune(&cfg, &out)?,
        Command::Pool => pipeline::stage_pool(&cfg, &out)?,
        Command::Select => pipeline::stage_select(&cfg, &out)?,
        Command::Eval => {
            let reports = pipeline::stage_eval(&cfg, &out)?;
            pipeline::write_manifest(&cfg, &out, &reports)?;
            for r in &reports {
                println!("{:<8} {:.4} ± {:.4}", r.method, r.mean, r.std);
            }
        }
        Command::Pipeline => {
            let manifest = run_pipeline(&cfg, &out)?;
            for m in &manifest.methods {
                println!("{:<8} {:.4} ± {:.4}", m.method, m.mean, m.std);
            }
        }
        Command::Sweep { axis, values } => {
            for r in run_sweep(&cfg, *axis, values, &out)? {
                println!(
                    "lambda_im={} alpha={} beta={} G={} K_i={}: {:.4} ± {:.4}",
                    r.lambda_im, r.alpha, r.beta, r.n_groups, r.k_real, r.mean, r.std
                );
            }
        }
        Command::Instability => {
            let report = pipeline::stage_instability(&cfg, &out)?;
            if let Some(s) = report.summary() {
                println!("median {} (q1 {}, q3 {})", s.median, s.q1, s.q3);
            }
        }
        Command::ExportEmbeddings => {
            let path = pipeline::stage_export_embeddings(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Config => println!("{}", cfg.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
