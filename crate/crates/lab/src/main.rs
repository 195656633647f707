use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use sane_lab::config::parse_override;
use sane_lab::{run_command, Command, ExperimentConfig, LabError, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CommandArg {
    GenData,
    Recovery,
    TrainSane,
    AnalyzeJacobian,
    Gap,
    Sweep,
}

impl From<CommandArg> for Command {
    fn from(c: CommandArg) -> Self {
        match c {
            CommandArg::GenData => Command::GenData,
            CommandArg::Recovery => Command::Recovery,
            CommandArg::TrainSane => Command::TrainSane,
            CommandArg::AnalyzeJacobian => Command::AnalyzeJacobian,
            CommandArg::Gap => Command::Gap,
            CommandArg::Sweep => Command::Sweep,
        }
    }
}

/// Self-labeling refinement lab: synthetic data, recovery and gap experiments,
/// SANE training.
#[derive(Debug, Parser)]
#[command(name = "sane-lab", version = sane_lab::records::version())]
struct Cli {
    command: CommandArg,
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Upper bound on concurrently running cells.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(cli: Cli) -> Result<(), LabError> {
    let text = std::fs::read_to_string(&cli.config).map_err(|e| LabError::Io {
        path: cli.config.display().to_string(),
        source: e,
    })?;
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let config = ExperimentConfig::parse(&text, Some(cli.command.into()), &overrides)?;
    let mut options = RunOptions {
        out: cli.out,
        ..RunOptions::default()
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(LabError::Config("--jobs must be at least 1".into()));
        }
        options.jobs = jobs;
    }
    let manifest = run_command(&config, &options)?;
    println!("{}", options.out.join(&manifest.run_id).display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sane-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
