use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ardit::blockplan::{
    build_fim_infer_plan, build_fim_train_plan, build_infer_step_plan, build_train_plan, BlockPartition, FimSplit,
};
use ardit::harness::{block_size_sweep, run_chain, run_stage, Artifacts, BlockSize, EvalReport, ExperimentConfig, Stage};
use ardit::{Error, Result};

#[derive(Parser)]
#[command(name = "ardit", version, about = "Autoregressive diffusion transformers on a synthetic token language")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overrides the configured block size (integer or `inf`).
    #[arg(long, global = true)]
    block_size: Option<BlockSize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test sets of the synthetic language.
    GenData,
    /// Train the latent autoencoder.
    TrainAe,
    /// Encode the training set into latent tokens.
    Encode,
    /// Train the block-autoregressive velocity model.
    #[command(visible_alias = "train")]
    TrainArdit,
    /// Cache teacher trajectories for distillation.
    CacheTrajectories,
    /// Distill the model into a one-step-per-block generator.
    Distill {
        #[arg(long)]
        beta_reg_phase1: Option<f32>,
        #[arg(long)]
        beta_reg_phase2: Option<f32>,
    },
    /// Generate test transcripts from scratch.
    Sample {
        /// Use the distilled generator.
        #[arg(long)]
        distilled: bool,
    },
    /// Regenerate the middle of test utterances from their context.
    Edit {
        #[arg(long)]
        distilled: bool,
    },
    /// Score samples and edits with the oracle; prints the report.
    Eval,
    /// Every stage from data generation to evaluation.
    RunAll,
    /// Train, sample and evaluate once per block size.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,inf")]
        sizes: Vec<BlockSize>,
    },
    /// Attention-plan utilities.
    Masks {
        #[command(subcommand)]
        command: MaskCommand,
    },
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Print a plan as a 0/1 matrix with a one-line header.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanKind {
    Train,
    Infer,
    FimTrain,
    FimInfer,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, value_enum, default_value = "train")]
    kind: PlanKind,
    #[arg(long)]
    n_text: usize,
    /// Speech tokens (the middle length for FIM plans).
    #[arg(long)]
    n_latent: usize,
    #[arg(long, default_value_t = 1)]
    block: usize,
    #[arg(long, default_value_t = 0)]
    shift: usize,
    /// Block being generated (inference plans).
    #[arg(long, default_value_t = 0)]
    step_block: usize,
    /// Noise level of noisy blocks.
    #[arg(long, default_value_t = 0.5)]
    t: f32,
    /// Prefix and suffix lengths (FIM plans).
    #[arg(long, default_value_t = 0)]
    prefix: usize,
    #[arg(long, default_value_t = 0)]
    suffix: usize,
}

fn render(a: &RenderArgs) -> Result<String> {
    let part = BlockPartition::new(a.n_latent, a.block, a.shift)?;
    let plan = match a.kind {
        PlanKind::Train => build_train_plan(a.n_text, &part, &vec![a.t; part.len()])?,
        PlanKind::Infer => build_infer_step_plan(a.n_text, &part, a.step_block, a.t)?,
        PlanKind::FimTrain | PlanKind::FimInfer => {
            let total = a.prefix + a.n_latent + a.suffix;
            let split = FimSplit::new(a.prefix, a.prefix + a.n_latent, total)?;
            if matches!(a.kind, PlanKind::FimTrain) {
                build_fim_train_plan(a.n_text, &split, &part, &vec![a.t; part.len()])?
            } else {
                build_fim_infer_plan(a.n_text, &split, &part, a.step_block, Some(a.t))?
            }
        }
    };
    Ok(plan.render())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(b) = c.block_size {
        cfg.block_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &EvalReport) {
    println!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Masks {
        command: MaskCommand::Render(a),
    } = &cli.command
    {
        print!("{}", render(a)?);
        return Ok(());
    }
    let mut cfg = load_config(&cli.common)?;
    let art = Artifacts::new(&cli.common.out);
    let stage = match cli.command {
        Command::GenData => Stage::GenData,
        Command::TrainAe => Stage::TrainAe,
        Command::Encode => Stage::Encode,
        Command::TrainArdit => Stage::TrainArdit,
        Command::CacheTrajectories => Stage::CacheTrajectories,
        Command::Distill {
            beta_reg_phase1,
            beta_reg_phase2,
        } => {
            cfg.beta_reg_phase1 = beta_reg_phase1.unwrap_or(cfg.beta_reg_phase1);
            cfg.beta_reg_phase2 = beta_reg_phase2.unwrap_or(cfg.beta_reg_phase2);
            Stage::Distill
        }
        Command::Sample { distilled } => {
            cfg.sample_distilled |= distilled;
            Stage::Sample
        }
        Command::Edit { distilled } => {
            cfg.sample_distilled |= distilled;
            Stage::Edit
        }
        Command::Eval => Stage::Eval,
        Command::RunAll => {
            if let Some(r) = run_chain(&Stage::ALL, &cfg, &art)? {
                print_report(&r);
            }
            return Ok(());
        }
        Command::Sweep { sizes } => {
            for r in block_size_sweep(&cfg, &art, &sizes)? {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            }
            return Ok(());
        }
        Command::Masks { .. } => unreachable!(),
    };
    if let Some(r) = run_stage(stage, &cfg, &art)? {
        print_report(&r);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
