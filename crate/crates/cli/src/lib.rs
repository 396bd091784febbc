//! `pmu-prospector` command-line front end.
//!
//! [`run`] is the whole program; `main` only sets up logging and exits with
//! its return value: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pmu_prospector::backend::SimModel;
use pmu_prospector::corpus::SuppressionMode;
use pmu_prospector::detection::{AttackName, F1Band};
use pmu_prospector::side_channel::AttackKind;
use pmu_prospector::EventSelector;

mod channel;
mod config;
mod detect;
mod report;
mod scan;

pub use config::{BackendKind, ConfigError, FileConfig};

pub const CONFIG_ENV: &str = "PMU_PROSPECTOR_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "pmu-prospector", version, about = "Find, analyze and use hidden PMU events")]
struct Cli {
    /// key = value config file (default: $PMU_PROSPECTOR_CONFIG)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; every random stream derives from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Simulated machine (JSON); a built-in model is used when absent
    #[arg(long, global = true, value_name = "PATH")]
    sim_model: Option<PathBuf>,
    /// Default directory for outputs without an explicit path
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Logical CPU for the native backend
    #[arg(long, global = true)]
    cpu: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a corpus against the whole event space
    Scan(ScanArgs),
    /// Infer umask relevance masks from a scan report
    AnalyzeUmask(UmaskArgs),
    /// Per-event attack detection
    #[command(subcommand)]
    Detect(DetectCommand),
    /// Secret recovery through a hidden event
    #[command(subcommand)]
    Sidechannel(ChannelCommand),
    /// Summarize an output file and emit plot data
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ScanArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<u32>,
    /// Minimum median delta for a readable selector
    #[arg(long)]
    threshold: Option<i64>,
    /// Report file
    #[arg(long)]
    out: Option<PathBuf>,
    /// NDJSON records file (default: report path with .ndjson)
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    any_thread: bool,
}

#[derive(Debug, Args)]
struct UmaskArgs {
    #[arg(long)]
    report: PathBuf,
    /// Catalog whose umasks are left out of inference (default: the one
    /// named in the report, if it exists)
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_attack(s: &str) -> Result<AttackName, String> {
    AttackName::parse(s).ok_or_else(|| {
        let names: Vec<_> = AttackName::ALL.iter().map(|a| a.as_str()).collect();
        format!("unknown attack `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_channel_attack(s: &str) -> Result<AttackKind, String> {
    match AttackKind::parse(s) {
        Some(k @ (AttackKind::Meltdown | AttackKind::SpectreV2)) => Ok(k),
        _ => Err(format!("unknown attack `{s}` (expected meltdown or spectre_v2)")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Suppression {
    Signal,
    Transactional,
}

impl From<Suppression> for SuppressionMode {
    fn from(s: Suppression) -> Self {
        match s {
            Suppression::Signal => SuppressionMode::SignalHandler,
            Suppression::Transactional => SuppressionMode::Transactional,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum F1BandArg {
    Off,
    Exclude,
    Retain,
}

impl From<F1BandArg> for F1Band {
    fn from(b: F1BandArg) -> Self {
        match b {
            F1BandArg::Off => F1Band::Off,
            F1BandArg::Exclude => F1Band::Exclude,
            F1BandArg::Retain => F1Band::Retain,
        }
    }
}

#[derive(Debug, Subcommand)]
enum DetectCommand {
    /// Collect a labeled dataset for one selector
    Collect {
        #[arg(long, value_parser = parse_attack)]
        attack: Option<AttackName>,
        #[arg(long)]
        selector: EventSelector,
        /// Samples per class
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score a model on a collected dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selector: Option<EventSelector>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline over many selectors and screen them
    Screen {
        #[arg(long, value_parser = parse_attack)]
        attack: Option<AttackName>,
        #[arg(long)]
        samples: Option<usize>,
        /// Take the hidden selectors of this scan report
        #[arg(long)]
        report: Option<PathBuf>,
        /// Explicit selectors, comma separated
        #[arg(long, value_delimiter = ',')]
        selectors: Vec<EventSelector>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "off")]
        f1_band: F1BandArg,
        /// Drop selectors with any metric of exactly 1.0
        #[arg(long)]
        exclude_perfect: bool,
    },
}

#[derive(Debug, Subcommand)]
enum ChannelCommand {
    /// Recover a secret through one selector
    Run {
        #[arg(long, value_parser = parse_channel_attack)]
        attack: AttackKind,
        #[arg(long)]
        selector: EventSelector,
        #[arg(long)]
        iterations: Option<u32>,
        #[arg(long)]
        secret_file: PathBuf,
        #[arg(long, value_enum, default_value = "signal")]
        suppression: Suppression,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the hidden selectors that leak the secret with accuracy >= 0.80
    Screen {
        #[arg(long, value_parser = parse_channel_attack)]
        attack: AttackKind,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        iterations: Option<u32>,
        #[arg(long)]
        secret_file: PathBuf,
        #[arg(long, value_enum, default_value = "signal")]
        suppression: Suppression,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Scan report, screening CSV, channel screening CSV or channel result
    #[arg(long = "in")]
    input: PathBuf,
    /// Where plot CSVs go (default: output dir)
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    /// Also write the summary text here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
pub(crate) enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub(crate) type Outcome = Result<(), Failure>;

/// Settings after merging flags over the config file.
pub(crate) struct Ctx {
    pub file: FileConfig,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub backend: BackendKind,
    pub sim_model: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cpu: usize,
}

impl Ctx {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The simulated machine. An explicit run seed replaces the model's own.
    pub fn sim_model(&self) -> Result<SimModel, Failure> {
        let mut model = match &self.sim_model {
            Some(path) => SimModel::load(path).map_err(Failure::runtime)?,
            None => SimModel::reference(0),
        };
        if let Some(seed) = self.seed {
            model.seed = seed;
        }
        Ok(model)
    }

    pub fn out_path(&self, flag: Option<PathBuf>, default_name: &str) -> PathBuf {
        flag.unwrap_or_else(|| self.output_dir.join(default_name))
    }

    /// Fails unless the simulated backend is selected. The native backend
    /// is opened first so that a missing capability is reported as such.
    pub fn require_sim(&self, what: &str) -> Outcome {
        if self.backend == BackendKind::Sim {
            return Ok(());
        }
        scan::open_native(self.cpu)?;
        Err(Failure::Runtime(format!("{what} drives simulated workloads and needs --backend sim")))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let chunk = items.len().div_ceil(jobs.max(1));
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn context(cli: &Cli) -> Result<Ctx, Failure> {
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let file = match config_path {
        Some(p) => FileConfig::load(&p).map_err(|e| Failure::Usage(format!("config error: {e}")))?,
        None => FileConfig::default(),
    };
    let jobs = cli.jobs.or(file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    Ok(Ctx {
        seed: cli.seed.or(file.seed),
        jobs,
        backend: cli.backend.or(file.backend).unwrap_or(BackendKind::Sim),
        sim_model: cli.sim_model.clone().or_else(|| file.sim_model.clone()),
        output_dir: cli
            .output_dir
            .clone()
            .or_else(|| file.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
        cpu: cli.cpu.or(file.cpu).unwrap_or(0),
        file,
    })
}

/// Parses `args` (program name first) and runs the selected subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = context(&cli).and_then(|ctx| match cli.command {
        Command::Scan(a) => scan::scan(&ctx, a),
        Command::AnalyzeUmask(a) => scan::analyze_umask(&ctx, a),
        Command::Detect(c) => detect::dispatch(&ctx, c),
        Command::Sidechannel(c) => channel::dispatch(&ctx, c),
        Command::Report(a) => report::report(&ctx, a),
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
