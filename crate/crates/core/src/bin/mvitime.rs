use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use mvitime::eval::render_metrics;
use mvitime::model::CombineMode;
use mvitime::pipeline::{self, PipelineError, Run, RunConfig, DATA_DIR_ENV, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "mvitime", version, about = "Contrastive pre-training and MViTime sleep staging")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated subjects kept out of training.
    #[arg(long, global = true, value_delimiter = ',')]
    held_out: Option<Vec<String>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Features,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the recordings and write the dataset manifest.
    Ingest,
    /// Self-contrast pre-training.
    Pretrain,
    /// Cross-subject (inter-subject correlation) pre-training.
    PretrainIsc,
    /// Fine-tune a checkpoint, or a fresh network, with a new classifier.
    Finetune {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Combine the two pre-trained backbones and fine-tune the result.
    Combine {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Evaluate a checkpoint on the held-out subjects.
    Evaluate {
        /// Checkpoint file; names not found here are looked up in the run directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// MViTime, MViTime+ and MViTime++ per held-out subject.
    Loso,
    /// Baseline against the two pre-training configurations.
    Ablation,
    /// Summarize the artifacts of the run.
    Report,
}

fn configure(cli: &Cli) -> Result<Run, PipelineError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.data_dir {
        config.run.data_dir = d.clone();
    }
    if let Some(d) = &cli.out_dir {
        config.run.out_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        config.run.seed = s;
    }
    if let Some(h) = &cli.held_out {
        config.eval.held_out = h.clone();
    }
    if config.run.deterministic {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    Run::new(config)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let run = configure(&cli)?;
    eprintln!("run directory {}", run.dir.display());
    let data = || run.load_data().map(|(d, _)| d);
    let stage = |r: mvitime::train::TrainReport| {
        println!("{}: {} steps, final loss {:.4}", r.stage, r.losses.len(), r.final_loss);
    };
    match cli.command {
        Command::Ingest => {
            let (_, m) = pipeline::ingest(&run)?;
            println!("{} epochs from {} subjects", m.total_epochs, m.subjects.len());
        }
        Command::Pretrain => stage(pipeline::pretrain(&run, &data()?)?),
        Command::PretrainIsc => stage(pipeline::pretrain_isc(&run, &data()?)?),
        Command::Finetune { from } => stage(pipeline::finetune(&run, &data()?, from.as_deref())?),
        Command::Combine { alpha, mode } => {
            let mode = match mode {
                Some(Mode::Features) => CombineMode::Features,
                Some(Mode::Full) => CombineMode::Full,
                None => run.config.train.combine_mode,
            };
            let alpha = alpha.unwrap_or(run.config.train.combine_alpha);
            stage(pipeline::combine(&run, &data()?, mode, alpha)?);
        }
        Command::Evaluate { checkpoint } => {
            // bare artifact names refer to the run directory
            let checkpoint = if checkpoint.is_relative() && !checkpoint.exists() {
                run.dir.join(checkpoint)
            } else {
                checkpoint
            };
            let e = pipeline::evaluate(&run, &data()?, &checkpoint)?;
            print!("{}", render_metrics(&e.confusion, &e.metrics));
        }
        Command::Loso => print!("{}", pipeline::run_loso_cross_subject(&run)?.render()),
        Command::Ablation => print!("{}", pipeline::run_ablation(&run)?.render()),
        Command::Report => print!("{}", pipeline::report(&run)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
