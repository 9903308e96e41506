use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qrank::cli::{self, Baseline, RunConfig};
use qrank::Error;

/// Question relevancy ranking experiments.
#[derive(Parser)]
#[command(name = "qrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build vocabularies and featurize every configured split.
    Prepare(ConfigArgs),
    /// Train a model on the prepared training split.
    Train(ConfigArgs),
    /// Write a ranked candidate list for a split.
    Rank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score checkpoints and baselines; two systems get a significance test.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Vec<PathBuf>,
        /// `ir` or `random`.
        #[arg(long)]
        baseline: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Feature-group and leave-one-out tables, single- and multi-task.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Learning curves over training-set fractions.
    Curve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Compare backpropagated gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Perturb one gradient on purpose; the check should then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

enum Outcome {
    Done,
    Failed,
}

fn run(command: Command) -> Result<Outcome, Error> {
    match command {
        Command::Prepare(args) => {
            let summary = cli::cmd_prepare(&args.load()?)?;
            for (split, rows) in &summary.rows {
                println!("{split}\t{rows} pairs");
            }
        }
        Command::Train(args) => {
            let path = cli::cmd_train(&args.load()?)?;
            println!("wrote {}", path.display());
        }
        Command::Rank { cfg, model, split } => {
            let path = cli::cmd_rank(&cfg.load()?, &model, &split)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { cfg, model, baseline, split } => {
            let baselines = baseline.iter().map(|b| b.parse()).collect::<Result<Vec<Baseline>, _>>()?;
            let result = cli::cmd_evaluate(&cfg.load()?, &model, &baselines, &split)?;
            print!("{}", result.to_table());
        }
        Command::Ablate { cfg, split } => print!("{}", cli::cmd_ablate(&cfg.load()?, &split)?.to_table()),
        Command::Curve { cfg, split } => {
            for curve in cli::cmd_curve(&cfg.load()?, &split)? {
                println!("{}", curve.setting);
                println!("  fraction  mean_map  std_map");
                for r in &curve.summary {
                    println!("  {:>8.2}  {:>8.2}  {:>7.2}", r.fraction, r.mean_map, r.std_map);
                }
            }
        }
        Command::Gradcheck { seed, instances, corrupt } => {
            let outcome = cli::cmd_gradcheck(seed, instances, corrupt)?;
            println!("{}", outcome.line());
            if !outcome.passed {
                return Ok(Outcome::Failed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(parsed.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
