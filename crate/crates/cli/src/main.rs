use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use iondfs_cli::config::{RawConfig, RunConfig};
use iondfs_cli::run::{run, ExitClass, RunError};

#[derive(Parser)]
#[command(
    name = "iondfs",
    version,
    about = "Geometric ion-trap gates on a decoherence-free code"
)]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Run the study described by a config file.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set noise.seed=7`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Put a `# generated_unix=…` line at the top of every CSV.
        #[arg(long)]
        stamp: bool,
    },
}

fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, RunError> {
    let mut raw = RawConfig::read(path)?;
    for o in overrides {
        raw.set(o)?;
    }
    Ok(RunConfig::from_raw(&raw)?)
}

fn main() -> ExitCode {
    let Cli {
        action: Action::Run {
            config,
            overrides,
            stamp,
        },
    } = Cli::parse();
    let stamp = stamp.then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
    match load(&config, &overrides).and_then(|cfg| run(&cfg, stamp)) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match e.class() {
                ExitClass::Config => "config error",
                ExitClass::Numerical => "numerical error",
                ExitClass::Guard => "guard violation",
            };
            eprintln!("iondfs: {kind}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
