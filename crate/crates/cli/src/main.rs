//! `metatroll`: generate data, train, adapt and evaluate from one JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use metatroll::continual::SequenceMode;
use metatroll::Error;

use config::{RunConfig, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(name = "metatroll", version, about = "Few-shot troll detection with campaign adapters")]
struct Cli {
    /// JSON config merged over the defaults; falls back to $METATROLL_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.gamma=0.2`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic campaign suite to the data directory.
    Generate,
    /// Run the training stages and write checkpoints.
    Train,
    /// Adapt to one support set of a campaign and save its bundle.
    Adapt {
        /// Meta-test campaign id.
        #[arg(long)]
        campaign: String,
        /// Support users per class; defaults to `train.shots`.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Few-shot accuracy over several runs; CSV on stdout and in the reports directory.
    Eval {
        /// Campaigns to evaluate (repeatable); defaults to the config's list.
        #[arg(long)]
        campaign: Vec<String>,
        /// Shot counts (repeatable); defaults to the config's list.
        #[arg(long)]
        shots: Vec<usize>,
    },
    /// Sequential adaptation with per-campaign forgetting report.
    Continual {
        /// Comma-separated campaign order; defaults to the config's plan.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Registry)]
        mode: Mode,
    },
    /// Finite-difference check of every gradient path.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Registry,
    Shared,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> metatroll::Result<()> {
    let file = cli.config.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cfg = RunConfig::load(file.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Generate => {
            for ds in commands::generate(&cfg)? {
                println!("{}\t{:?}\t{} users", ds.campaign_id, ds.split, ds.users.len());
            }
        }
        Command::Train => {
            let model = commands::train(&cfg)?;
            println!("trained; {} campaign bundles in {}", model.registry.len(), cfg.paths.checkpoints.display());
        }
        Command::Adapt { campaign, shots } => {
            let acc = commands::adapt(&cfg, &campaign, shots.unwrap_or(cfg.train.shots))?;
            println!("{campaign}\theld-out accuracy {acc:.4}");
        }
        Command::Eval { campaign, shots } => {
            commands::eval(&cfg, &campaign, &shots)?;
            commands::write_csv_file_to_stdout(&cfg.paths.reports.join("eval.csv"))?;
        }
        Command::Continual { plan, mode } => {
            let mode = match mode {
                Mode::Registry => SequenceMode::Registry,
                Mode::Shared => SequenceMode::SharedAdapter,
            };
            let report = commands::continual(&cfg, plan.as_deref().unwrap_or(&cfg.continual.plan), mode)?;
            report.write_csv(std::io::stdout().lock())?;
        }
        Command::Gradcheck => {
            let cases = commands::gradcheck(&cfg)?;
            for c in &cases {
                println!("{}\t{}\tworst {:.3e}\t{} scalars", if c.report.pass { "PASS" } else { "FAIL" }, c.name, c.worst_ratio(), c.scalars);
            }
            if let Some(c) = cases.iter().find(|c| !c.report.pass) {
                return Err(Error::numeric(format!("gradient check failed: {}", c.name)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
