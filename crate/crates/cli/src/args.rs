use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "holo", version, about = "Distributed network telescope and honeypot platform")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct HubArgs {
    /// Controller address (host:port).
    #[arg(long, env = "HOLO_HUB")]
    pub hub: String,
    /// API key. Defaults to `<data-dir>/admin.key`.
    #[arg(long, env = "HOLO_KEY", hide_env_values = true)]
    pub key: Option<String>,
    /// Controller data directory holding `admin.key`.
    #[arg(long, env = "HOLO_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the hub and controller.
    Controller {
        #[arg(long, env = "HOLO_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long, default_value = "0.0.0.0:7070")]
        listen: String,
        /// Address handed to sensors if it differs from `--listen`.
        #[arg(long)]
        advertise: Option<String>,
    },
    /// Run a sensor agent.
    Agent {
        #[arg(long, env = "HOLO_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long, env = "HOLO_HUB")]
        hub: Option<String>,
        /// Onboarding token, required on first start.
        #[arg(long)]
        bootstrap: Option<String>,
        /// Sensor descriptor document (YAML or JSON), required on first start.
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Stop after this many heartbeat rounds.
        #[arg(long)]
        steps: Option<u64>,
        /// Seconds between rounds with `--steps`; defaults to the hub's heartbeat interval.
        #[arg(long, requires = "steps")]
        interval: Option<u64>,
    },
    /// Onboarding tokens.
    #[command(subcommand)]
    Token(TokenCmd),
    /// Deploy module specs from a document.
    Deploy {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        #[command(flatten)]
        hub: HubArgs,
    },
    /// Remove a deployed module spec.
    Undeploy {
        name: String,
        #[command(flatten)]
        hub: HubArgs,
    },
    /// Sensors, instances, specs and pending actions.
    Status {
        #[command(flatten)]
        hub: HubArgs,
    },
    /// API principals.
    #[command(subcommand)]
    Principal(PrincipalCmd),
    /// Module catalog.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Simulated Internet.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Offline analysis of captured traces.
    Analyze(AnalyzeArgs),
    /// Sensor steering rules.
    #[command(subcommand)]
    Rules(RulesCmd),
    /// Trace upload to the data lake.
    #[command(subcommand)]
    Sync(SyncCmd),
}

#[derive(Debug, Subcommand)]
pub enum TokenCmd {
    /// Issue a single-use onboarding token.
    New {
        #[arg(long)]
        sensor: String,
        /// Lifetime such as `1h`, `30m` or `2days`.
        #[arg(long, default_value = "1h")]
        ttl: humantime::Duration,
        #[command(flatten)]
        hub: HubArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Admin,
    Operator,
    Reader,
}

#[derive(Debug, Subcommand)]
pub enum PrincipalCmd {
    /// Create a principal and print its API key.
    Add {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Organisation managed by an operator.
        #[arg(long, required_if_eq("role", "operator"))]
        org: Option<String>,
        #[command(flatten)]
        hub: HubArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum CatalogCmd {
    Put {
        #[arg(long)]
        name: String,
        #[arg(long)]
        file: PathBuf,
        #[command(flatten)]
        hub: HubArgs,
    },
    Get {
        #[arg(long)]
        name: String,
        #[arg(long)]
        version: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hub: HubArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    /// Run a simulation and write traces plus ground truth.
    Run {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump generated traffic as `traffic.pcap`.
        #[arg(long)]
        pcap: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Analysis {
    Flows,
    Overlap,
    Portcdf,
    Timeline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightArg {
    Packets,
    Flows,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub what: Analysis,
    /// Directory of sealed traces (spool, lake or `sim run` output).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub window_days: u32,
    /// First day of the overlap window; defaults to ending on the latest day.
    #[arg(long)]
    pub window_start: Option<NaiveDate>,
    #[arg(long, default_value_t = 500)]
    pub min_packets: u64,
    #[arg(long, default_value_t = 0.05)]
    pub top_fraction: f64,
    /// Keep every sender above `--min-packets` instead of the top fraction.
    #[arg(long)]
    pub all_senders: bool,
    /// Symmetric Jaccard overlap instead of row-normalised ratios.
    #[arg(long)]
    pub jaccard: bool,
    #[arg(long, value_enum, default_value = "packets")]
    pub weight: WeightArg,
}

#[derive(Debug, Subcommand)]
pub enum RulesCmd {
    /// Print the iptables ruleset a sensor runs.
    Emit {
        #[arg(long)]
        sensor: String,
        /// Also write `<dir>/<sensor>/holo-rules-<generation>.v4`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        hub: HubArgs,
    },
}

#[derive(Debug, Args, Clone)]
pub struct LakeArgs {
    /// Spool directory holding sealed traces.
    #[arg(long)]
    pub spool: PathBuf,
    /// Local lake directory. Without it the agent's hub session is used.
    #[arg(long)]
    pub lake: Option<PathBuf>,
    /// Agent data directory, used when `--lake` is absent.
    #[arg(long, env = "HOLO_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "HOLO_HUB")]
    pub hub: Option<String>,
    #[arg(long)]
    pub redact: bool,
}

#[derive(Debug, Subcommand)]
pub enum SyncCmd {
    /// Upload sealed traces once and apply retention.
    Run {
        #[command(flatten)]
        lake: LakeArgs,
        #[arg(long, default_value_t = 24)]
        retention_hours: u32,
        /// Bytes per second.
        #[arg(long, default_value_t = 10 * 1024 * 1024)]
        bandwidth_cap: u64,
    },
    /// Show which sealed traces the lake already holds.
    Status {
        #[command(flatten)]
        lake: LakeArgs,
    },
}
