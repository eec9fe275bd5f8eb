//! Command-line pipeline for masked generative body-mesh modeling:
//! synth -> fit-tokenizer -> pretrain -> train -> infer/generate -> eval.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mega_core::pipeline::Workspace;
use mega_core::sampler::GenerationMode;
use mega_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "mega", version, about = "Masked generative body-mesh modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Run configuration file (key = value lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory; relative paths in the config resolve against it.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferMode {
    Det,
    Stoch,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets.
    Synth {
        #[command(flatten)]
        shared: Shared,
    },
    /// Fit the frozen per-part tokenizer on the training set.
    FitTokenizer {
        #[command(flatten)]
        shared: Shared,
    },
    /// Self-supervised masked-token pre-training.
    Pretrain {
        #[command(flatten)]
        shared: Shared,
    },
    /// Conditioned training (tokens + rotation/camera losses).
    Train {
        #[command(flatten)]
        shared: Shared,
    },
    /// Run inference over the test set.
    Infer {
        #[command(flatten)]
        shared: Shared,
        /// Deterministic single pass or iterative stochastic sampling.
        #[arg(long, value_enum, default_value = "det")]
        mode: InferMode,
        /// Samples per record (stochastic mode).
        #[arg(long)]
        samples: Option<usize>,
        /// Generation steps T.
        #[arg(long)]
        steps: Option<usize>,
        /// Initial noise temperature A.
        #[arg(long)]
        temp: Option<f64>,
    },
    /// Unconditional mesh generation from the pretrain-stage checkpoint.
    Generate {
        #[command(flatten)]
        shared: Shared,
        /// Number of meshes to generate.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Metrics over the test set: CSV report plus summary.
    Eval {
        #[command(flatten)]
        shared: Shared,
    },
}

fn load_workspace(shared: &Shared) -> Result<Workspace, Error> {
    let mut cfg = match &shared.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    Ok(Workspace::new(cfg, &shared.out))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { shared } => {
            let ws = load_workspace(&shared)?;
            let (train, test) = ws.run_synth()?;
            println!(
                "wrote {train} training and {test} test records under {}",
                ws.out_dir.display()
            );
        }
        Command::FitTokenizer { shared } => {
            let ws = load_workspace(&shared)?;
            ws.run_fit_tokenizer()?;
            println!("tokenizer written to {}", ws.path(&ws.cfg.tokenizer).display());
        }
        Command::Pretrain { shared } => {
            let ws = load_workspace(&shared)?;
            let stats = ws.run_pretrain()?;
            println!(
                "pretrain done: {} steps, epoch loss {:.4} -> {:.4}",
                stats.steps, stats.first_epoch_loss, stats.final_epoch_loss
            );
        }
        Command::Train { shared } => {
            let ws = load_workspace(&shared)?;
            let stats = ws.run_train()?;
            println!(
                "train done: {} steps, epoch loss {:.4} -> {:.4}",
                stats.steps, stats.first_epoch_loss, stats.final_epoch_loss
            );
        }
        Command::Infer {
            shared,
            mode,
            samples,
            steps,
            temp,
        } => {
            let ws = load_workspace(&shared)?;
            let gen_mode = match mode {
                InferMode::Det => GenerationMode::Deterministic,
                InferMode::Stoch => GenerationMode::Stochastic,
            };
            let n = ws.run_infer(
                gen_mode,
                samples.unwrap_or(ws.cfg.q),
                steps.unwrap_or(ws.cfg.t),
                temp.unwrap_or(ws.cfg.a),
                shared.seed.unwrap_or(ws.cfg.seed),
            )?;
            println!("inference over {n} records written to {}/infer", ws.out_dir.display());
        }
        Command::Generate { shared, count } => {
            let ws = load_workspace(&shared)?;
            let n = ws.run_generate(count, shared.seed.unwrap_or(ws.cfg.seed))?;
            println!("{n} meshes written to {}/generated", ws.out_dir.display());
        }
        Command::Eval { shared } => {
            let ws = load_workspace(&shared)?;
            let summary = ws.run_eval()?;
            print!("{}", summary.render());
            println!("report written to {}/metrics.csv", ws.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
