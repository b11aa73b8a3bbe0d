use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mas_cli::pipeline::{self, Layout};
use mas_cli::{CliError, FusionMethod, Overrides, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "mas", version, about = "Multi-atlas cardiac segmentation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for the cohort and for registration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Consistency weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Fusion method: mv, lwf-oracle, lwf-learned or lwf-mi.
    #[arg(long, global = true)]
    fusion: Option<FusionMethod>,
    /// Patch radius of the ground-truth similarity.
    #[arg(long, global = true)]
    patch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort and a pipeline.json pointing at it.
    Phantom,
    /// Register every atlas to every target.
    Register,
    /// Train the similarity model on the training targets.
    TrainSimilarity,
    /// Fuse warped atlases for each evaluation target.
    Fuse,
    /// Fused Dice against the number of atlases.
    Sweep,
    /// Evaluate one prediction, or every fused output when no paths are given.
    Eval {
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gold: Option<PathBuf>,
        #[arg(long, default_value = "case")]
        case: String,
    },
}

fn load(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides { out: g.out.clone(), jobs: g.jobs, seed: g.seed, lambda: g.lambda, fusion: g.fusion, patch: g.patch });
    // a learned model trained earlier in the same output directory is picked up
    if cfg.fusion == FusionMethod::LwfLearned && cfg.similarity_model.is_none() {
        cfg.similarity_model = Some(Layout::new(&cfg.out_dir).model());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load(&cli.global)?;
    match cli.command {
        Command::Phantom => {
            let written = pipeline::cmd_phantom(&cfg)?;
            println!("wrote {} atlases and {} targets to {}", written.atlases.len(), written.targets.len(), cfg.out_dir.display());
        }
        Command::Register => {
            for r in pipeline::cmd_register(&cfg)? {
                println!("target {:02} atlas {:02}: DS {:.2} -> {:.2} ({} iterations)", r.target, r.atlas, r.initial_ds, r.final_ds, r.iterations);
            }
        }
        Command::TrainSimilarity => {
            let (path, report) = pipeline::cmd_train_similarity(&cfg)?;
            let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!("model written to {} (cross-entropy {last:.4})", path.display());
        }
        Command::Fuse => {
            let report = pipeline::cmd_fuse(&cfg)?;
            print!("{}", report.to_csv());
            println!("{}: mean DS {:.2}", cfg.fusion, report.mean_ds());
        }
        Command::Sweep => {
            println!("n,mean_ds,std_ds");
            for r in pipeline::cmd_sweep(&cfg)? {
                println!("{},{:.4},{:.4}", r.atlases, r.mean_ds, r.std_ds);
            }
        }
        Command::Eval { pred: Some(pred), gold: Some(gold), case } => {
            print!("{}", pipeline::evaluate_pair(&pred, &gold, &case)?.to_csv());
        }
        Command::Eval { .. } => {
            println!("method,label,ds,asd_mm,hd_mm,vd_ml");
            for r in pipeline::cmd_eval(&cfg)? {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                println!("{},{},{:.4},{},{},{:.4}", r.method, r.label, r.ds, f(r.asd_mm), f(r.hd_mm), r.vd_ml);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::JobsFailed(jobs) = &e {
                for j in jobs {
                    eprintln!("  {j}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
