use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use aos_core::crypto::{Digest, PublicKey};
use aos_core::mechanisms::{TauRange, DEFAULT_TOLERANCE};
use aos_core::transactions::LedgerTx;
use aos_node::commands::{self, CliError, InspectQuery, MechanismArgs};
use aos_node::config::NodeConfig;
use aos_node::runtime::{self, RunOptions};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "aos", version, about = "Replicated ledger node")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataDirArg {
    /// Overrides `data_dir` from the config file.
    #[arg(long, env = "AOS_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Creates a data directory holding genesis and the node key.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        dir: DataDirArg,
    },
    /// Prints a new keypair, or writes its seed to `--out`.
    Keygen {
        /// Deterministic seed text, at least 16 bytes.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the node until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        dir: DataDirArg,
        #[arg(long)]
        exit_at_height: Option<u64>,
        /// Milliseconds spent serving peers after `--exit-at-height` is reached.
        #[arg(long, default_value_t = 2000)]
        linger_ms: u64,
        /// Overrides `dp_epsilon` from the config file.
        #[arg(long)]
        dp_epsilon: Option<f64>,
    },
    /// Sends a transaction (JSON file, or `-` for stdin) and prints its id.
    SubmitTx {
        #[arg(long)]
        address: String,
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value = "aos-local")]
        network_id: String,
    },
    /// Prints a running node's height and tip.
    Status {
        #[arg(long)]
        address: String,
        #[arg(long, default_value = "aos-local")]
        network_id: String,
    },
    /// Builds transactions.
    #[command(subcommand)]
    Tx(TxCommand),
    /// Read-only queries over a data directory.
    Inspect {
        #[command(flatten)]
        dir: DataDirArg,
        #[arg(long, conflicts_with_all = ["tx_id", "validate", "balances"])]
        height: Option<u64>,
        #[arg(long, conflicts_with_all = ["validate", "balances"])]
        tx_id: Option<Digest>,
        #[arg(long, conflicts_with = "balances")]
        validate: bool,
        /// Replays the chain over the genesis balances of `--config`.
        #[arg(long, requires = "config")]
        balances: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Runs a deterministic network simulation.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Runs the pricing mechanism and prints `lambda,p1,p2` as CSV.
    Mechanism {
        /// a1,a2,b1,b2
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        theta: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Samples the p-functions at `N + 1` evenly spaced points instead.
        #[arg(long)]
        sweep: Option<u32>,
        /// Seller range as min,max.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0.0, 1.0])]
        seller_range: Vec<f64>,
        /// Buyer range as min,max.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0.0, 1.0])]
        buyer_range: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum TxCommand {
    /// A sealed Type A transaction from the key holder to `--recipient`.
    CreateA {
        #[arg(long)]
        key: PathBuf,
        #[arg(long, value_parser = parse_public_key)]
        recipient: PublicKey,
        #[arg(long)]
        expr: String,
        #[arg(long, default_value_t = 1)]
        value: u64,
        #[arg(long, default_value_t = 0)]
        nonce: u64,
    },
    /// Opens a Type A with the recipient key and invokes it.
    CreateB {
        #[arg(long)]
        key: PathBuf,
        /// Type A transaction JSON as produced by `create-a`.
        #[arg(long)]
        target: PathBuf,
        /// NAME=0|1, repeatable or comma separated.
        #[arg(long = "bind", value_delimiter = ',')]
        bindings: Vec<String>,
        #[arg(long, default_value_t = 0)]
        nonce: u64,
    },
}

fn parse_public_key(s: &str) -> Result<PublicKey, String> {
    PublicKey::from_hex(s).map_err(|e| e.to_string())
}

fn data_dir(dir: DataDirArg, cfg: Option<&NodeConfig>) -> Result<PathBuf> {
    match cfg {
        Some(c) => c.resolve_data_dir(dir.data_dir),
        None => dir.data_dir.context("no data directory: pass --data-dir or set AOS_DATA_DIR"),
    }
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

fn read_tx(path: &Path) -> Result<LedgerTx> {
    serde_json::from_str(&read_input(path)?).context("malformed transaction JSON")
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Init { config, dir } => {
            let cfg = NodeConfig::load(&config)?;
            let dir = data_dir(dir, Some(&cfg))?;
            print(&commands::init(&cfg, &dir)?);
        }
        Command::Keygen { seed, out } => print(&commands::keygen(seed.as_deref(), out.as_deref())?),
        Command::Run {
            config,
            dir,
            exit_at_height,
            linger_ms,
            dp_epsilon,
        } => {
            let mut cfg = NodeConfig::load(&config)?;
            if dp_epsilon.is_some() {
                cfg.dp_epsilon = dp_epsilon;
                cfg.validate()?;
            }
            let dir = data_dir(dir, Some(&cfg))?;
            let opts = RunOptions {
                exit_at_height,
                linger: Duration::from_millis(linger_ms),
            };
            runtime::run(&cfg, &dir, &opts)?;
        }
        Command::SubmitTx {
            address,
            file,
            network_id,
        } => {
            let ack = commands::submit(&address, &network_id, &read_tx(&file)?)?;
            println!("{}", ack.tx_id);
        }
        Command::Status { address, network_id } => {
            print(&serde_json::to_value(commands::status(&address, &network_id)?)?);
        }
        Command::Tx(TxCommand::CreateA {
            key,
            recipient,
            expr,
            value,
            nonce,
        }) => {
            let sender = commands::load_key_file(&key)?;
            print(&serde_json::to_value(commands::create_type_a(&sender, recipient, &expr, value, nonce)?)?);
        }
        Command::Tx(TxCommand::CreateB {
            key,
            target,
            bindings,
            nonce,
        }) => {
            let recipient = commands::load_key_file(&key)?;
            let target = read_tx(&target)?;
            print(&serde_json::to_value(commands::create_type_b(&recipient, &target, &bindings, nonce)?)?);
        }
        Command::Inspect {
            dir,
            height,
            tx_id,
            validate,
            balances,
            config,
        } => {
            let cfg = config.as_deref().map(NodeConfig::load).transpose()?;
            let dir = data_dir(dir, cfg.as_ref())?;
            let query = match (height, tx_id, validate, &cfg) {
                (Some(h), ..) => InspectQuery::Height(h),
                (_, Some(id), ..) => InspectQuery::TxId(id),
                (_, _, true, _) => InspectQuery::Validate,
                (_, _, _, Some(c)) if balances => InspectQuery::Balances(c.genesis()),
                _ => anyhow::bail!("choose one of --height, --tx-id, --validate, --balances"),
            };
            let report = commands::inspect(&dir, query)?;
            print(&report);
            if report.get("valid") == Some(&Value::Bool(false)) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Simulate { config, seed, trace } => {
            let out = commands::simulate(&config, seed, trace.as_deref())?;
            print(&out.summary);
            if !out.safe {
                eprintln!("safety violation: honest nodes committed different blocks");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Mechanism {
            theta,
            tolerance,
            sweep,
            seller_range,
            buyer_range,
        } => {
            anyhow::ensure!(theta.len() == 4, "--theta takes a1,a2,b1,b2");
            anyhow::ensure!(seller_range.len() == 2 && buyer_range.len() == 2, "ranges take min,max");
            let range = |v: &[f64]| TauRange { min: v[0], max: v[1] };
            let args = MechanismArgs {
                theta: [theta[0], theta[1], theta[2], theta[3]],
                seller: range(&seller_range),
                buyer: range(&buyer_range),
                tolerance,
                sweep,
            };
            let (csv, summary) = commands::mechanism(&args)?;
            print!("{csv}");
            eprintln!("{summary}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<CliError>() {
                Some(CliError::DirNotEmpty(_)) => ExitCode::from(4),
                Some(CliError::NotFound(_)) => ExitCode::from(5),
                None => ExitCode::FAILURE,
            }
        }
    }
}
