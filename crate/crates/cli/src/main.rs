//! `pruner`: batch front end for tuning, training, evaluation, benchmarking
//! and schedule inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pruner_core::engine::{Mode, TunerConfig};

#[derive(Parser, Debug)]
#[command(name = "pruner", version, about = "Draft-then-verify tensor program autotuner")]
struct Cli {
    /// Worker threads for parallel evaluation; results do not depend on it
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tune every subgraph of a workload against the simulated device
    Tune(TuneArgs),
    /// Train a cost model checkpoint on oracle-labeled samples or a record log
    Train(TrainArgs),
    /// Report Top_k of a model and Best_k of the drafted sets
    Eval(EvalArgs),
    /// Run the tuner and a baseline search with paired seeds
    Bench(BenchArgs),
    /// Print the analyzer's symbols and penalties for one schedule
    Inspect(InspectArgs),
}

/// Workload, visible device and simulated oracle; built-in fixtures are used
/// when a file is not given.
#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Workload file (TOML, or JSON starting with '{')
    #[arg(long, value_name = "FILE")]
    pub workload: Option<PathBuf>,
    /// Device spec seen by the tuner (TOML)
    #[arg(long, value_name = "FILE")]
    pub device: Option<PathBuf>,
    /// Simulated hardware oracle (TOML)
    #[arg(long, value_name = "FILE")]
    pub oracle: Option<PathBuf>,
}

/// Tuner settings: a config file (every field optional) overridden by flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Tuner config file (TOML with the fields below)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// trials: total measurements, must equal rounds x batch [default: 2000]
    #[arg(long)]
    pub trials: Option<usize>,
    /// rounds: tuning rounds [default: 200]
    #[arg(long)]
    pub rounds: Option<usize>,
    /// batch: measurements per round [default: 10]
    #[arg(long)]
    pub batch: Option<usize>,
    /// draft_size: candidates handed to the learned model per round [default: 512]
    #[arg(long)]
    pub draft_size: Option<usize>,
    /// pop_size: explorer population [default: 512]
    #[arg(long)]
    pub pop_size: Option<usize>,
    /// n_steps: explorer generations per round [default: 32]
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// random_mix: fraction of candidates sampled uniformly [default: 0.2]
    #[arg(long)]
    pub random_mix: Option<f64>,
    /// decay: task-scheduler stagnation decay [default: 0.9]
    #[arg(long)]
    pub decay: Option<f64>,
    /// mode: online (retrain after every round) or offline [default: online]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// moa_enabled: momentum adaptation of a Siamese model [default: true]
    #[arg(long, value_name = "BOOL")]
    pub moa_enabled: Option<bool>,
    /// momentum: Siamese momentum m [default: 0.99]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// hidden: width of a freshly initialized model [default: 64]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// train_epochs: epochs per online update [default: 10]
    #[arg(long)]
    pub train_epochs: Option<usize>,
    /// train_lr: learning rate [default: 0.01]
    #[arg(long)]
    pub train_lr: Option<f64>,
    /// train_batch: largest listwise batch [default: 512]
    #[arg(long)]
    pub train_batch: Option<usize>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "online" => Ok(Mode::Online),
        "offline" => Ok(Mode::Offline),
        other => Err(format!("expected online or offline, got {other}")),
    }
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// seed: run seed (required)
    #[arg(long)]
    pub seed: u64,
    /// Search strategy: pruner, random, plain_ga or model_only
    #[arg(long, default_value = "pruner")]
    pub strategy: String,
    /// Siamese checkpoint (or plain model file) to start from
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Run seed (required)
    #[arg(long)]
    pub seed: u64,
    /// Train on this record log instead of fresh oracle samples
    #[arg(long, value_name = "FILE")]
    pub records: Option<PathBuf>,
    /// Oracle-measured samples per task
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Start from this checkpoint instead of a fresh model
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Hidden width of a fresh model
    #[arg(long, default_value_t = pruner_core::model::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Largest listwise batch
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    /// Momentum stored in the checkpoint
    #[arg(long, default_value_t = pruner_core::adaptation::DEFAULT_MOMENTUM)]
    pub momentum: f64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Model checkpoint to evaluate; a fresh model when omitted
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Labeled dataset from a record log; otherwise oracle-labeled samples
    #[arg(long, value_name = "FILE")]
    pub records: Option<PathBuf>,
    /// Noiseless-labeled samples per task when no record log is given
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    /// k values to report (repeatable)
    #[arg(long = "k", default_values_t = [1usize, 5])]
    pub k: Vec<usize>,
    /// Drafted-set sizes for Best_k (repeatable)
    #[arg(long = "draft-size", default_values_t = [50usize, 128, 256, 512])]
    pub draft_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the JSON report
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run seed (required)
    #[arg(long)]
    pub seed: u64,
    /// Baseline search: random, plain_ga or model_only
    #[arg(long, default_value = "random")]
    pub baseline: String,
    /// Siamese checkpoint both searches start from
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Target tolerance for trials-to-target
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Task name or index within the workload
    #[arg(long, default_value = "0")]
    pub task: String,
    /// Schedule as JSON {"factors": {axis: [..]}, "unroll": u}, or @FILE
    #[arg(long)]
    pub schedule: String,
    /// Print JSON instead of the table
    #[arg(long)]
    pub json: bool,
    /// Directory for the JSON report
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    /// Config file (or defaults) with every given flag applied.
    pub fn resolve(&self, seed: u64) -> pruner_core::Result<TunerConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| pruner_core::Error::Io {
                    path: path.clone(),
                    source,
                })?;
                let cfg: TunerConfig = toml::from_str(&text)
                    .map_err(|e| pruner_core::Error::Parse {
                        what: "tuner config".into(),
                        message: e.message().to_string(),
                    })?;
                cfg
            }
            None => TunerConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                })*
            };
        }
        apply!(
            trials,
            rounds,
            batch,
            draft_size,
            pop_size,
            n_steps,
            random_mix,
            decay,
            mode,
            moa_enabled,
            momentum,
            hidden,
            train_epochs,
            train_lr,
            train_batch
        );
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error[E_USAGE]: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[E_USAGE]: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Tune(a) => commands::tune(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.code());
            ExitCode::from(1)
        }
    }
}
