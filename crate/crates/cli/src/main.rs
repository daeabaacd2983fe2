//! `smtfl`: run scenarios, sweeps and offline recovery drills.
//!
//! Exit status is 0 on success, 2 for configuration errors and 3 for
//! failures during a run. Log verbosity follows `SMTFL_LOG` (for example
//! `SMTFL_LOG=info`).

use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smtfl_core::protocol::ClientId;
use smtfl_core::sim::{
    emit_metrics, run_matrix, run_scenario_timed, Grid, ScenarioConfig, ShareDrillFile, SimError,
    SWEEP_CSV,
};
use smtfl_core::vault::{quorum_decrypt, RecordStore};

#[derive(Parser)]
#[command(
    name = "smtfl",
    version,
    about = "Secure federated learning scenario simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario (no-attack, attacked and defended runs) and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the full client count.
        #[arg(long = "paper-shape")]
        full_scale: bool,
        /// Also write the escrow store, update history and share drill file.
        #[arg(long)]
        escrow_files: bool,
    },
    /// Run the scenario once per cell of a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Directory for the consolidated CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Open a client's escrowed messages with the other clients' shares.
    Unlearn {
        #[arg(long)]
        store: PathBuf,
        /// Client number whose messages are recovered.
        #[arg(long)]
        target: u32,
        #[arg(long)]
        shares: PathBuf,
        #[arg(long, default_value_t = 0)]
        first_epoch: u32,
        #[arg(long, default_value_t = u32::MAX)]
        last_epoch: u32,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

/// Writes to stdout; a reader that hung up early is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(CliError::Runtime(e.to_string())),
        _ => Ok(()),
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn run(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    full_scale: bool,
    escrow_files: bool,
) -> Result<(), CliError> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if full_scale {
        cfg = cfg.full_scale();
    }
    if out.is_some() {
        cfg.output.dir = out;
    }
    cfg.output.escrow_files |= escrow_files;
    cfg.validate()?;
    let (metrics, timings) = run_scenario_timed(&cfg)?;
    match &cfg.output.dir {
        Some(dir) => {
            for path in emit_metrics(&metrics, Some(&timings), dir)? {
                log::info!("wrote {}", path.display());
            }
            emit(&format!(
                "acc_no_attack={:.4} acc_attacked={:.4} acc_defended={:.4} acc_loc={:.4} rate_false={:.4}\n",
                metrics.acc_no_attack, metrics.acc_attacked, metrics.acc_defended, metrics.acc_loc, metrics.rate_false
            ))
        }
        None => emit(&format!("{}\n", metrics.to_json())),
    }
}

fn sweep(config: &Path, grid: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let base = ScenarioConfig::load(config)?;
    let grid = Grid::load(grid)?;
    let cells = run_matrix(&base, &grid)?;
    let csv = smtfl_core::sim::sweep_csv(&grid, &cells)?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = dir.join(SWEEP_CSV);
            std::fs::write(&path, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
            emit(&format!(
                "{} cells, {failed} failed, wrote {}\n",
                cells.len(),
                path.display()
            ))
        }
        None => emit(&String::from_utf8_lossy(&csv)),
    }
}

fn unlearn(store: &Path, target: u32, shares: &Path, epochs: (u32, u32)) -> Result<(), CliError> {
    let text = std::fs::read_to_string(shares)
        .map_err(|e| CliError::Config(format!("{}: {e}", shares.display())))?;
    let drill: ShareDrillFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", shares.display())))?;
    let policy = drill.policy()?;
    let store = RecordStore::open(store).map_err(|e| CliError::Runtime(e.to_string()))?;
    if store.prime() != drill.prime {
        return Err(CliError::Config(format!(
            "share file is for prime {}, store uses {}",
            drill.prime,
            store.prime()
        )));
    }
    let target = ClientId(target);
    let submissions: Vec<_> = drill
        .submissions
        .into_iter()
        .filter(|s| s.holder != target)
        .collect();
    let report = quorum_decrypt(&store, target, epochs, &submissions, &policy)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let messages: Vec<_> = report
        .messages
        .iter()
        .map(|m| {
            serde_json::json!({
                "epoch": m.key.epoch,
                "group": m.key.group,
                "sender": m.key.sender.0,
                "receiver": m.key.owner.0,
                "norm": m.vector.norm(),
            })
        })
        .collect();
    let summary = serde_json::json!({
        "target": target.0,
        "opened": messages.len(),
        "blocked_owners": report.blocked_owners.iter().map(|c| c.0).collect::<Vec<_>>(),
        "blocked_epochs": report.blocked_epochs,
        "messages": messages,
    });
    if !report.is_complete() {
        log::warn!("some records stayed sealed");
    }
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(&summary).expect("json")
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMTFL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            full_scale,
            escrow_files,
        } => run(&config, seed, out, full_scale, escrow_files),
        Command::Sweep { config, grid, out } => sweep(&config, &grid, out),
        Command::Unlearn {
            store,
            target,
            shares,
            first_epoch,
            last_epoch,
        } => unlearn(&store, target, &shares, (first_epoch, last_epoch)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
