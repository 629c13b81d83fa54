//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::commands::{ablate, dataset, eval, localize, train};
use crate::config::{resolve, AblateConfig, EvalConfig, IngestConfig, LocalizeConfig, SynthConfig, TrainRunConfig};
use crate::error::{CliError, Result, EXIT_USAGE};
use crate::run::{config_hash, create_dir, new_run_dir, output_root, write_json, OUTPUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "landmark", version, about = "Landmark localization with patch-based fully convolutional networks")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root for run directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub out_root: Option<PathBuf>,
    /// Write into this directory instead of a new timestamped one.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Convert the ISBI cephalometric layout into a dataset directory.
    Ingest(IngestArgs),
    /// Train a global or local network.
    Train(TrainArgs),
    /// Localize landmarks on one split of a dataset.
    Localize(LocalizeArgs),
    /// Compare predictions with references.
    Eval(EvalArgs),
    /// Train and compare all loss and fusion variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON configuration file; flags override its keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// The two observer annotation directories.
    #[arg(long, num_args = 2)]
    pub annotations: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub resample_mm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// global or local.
    #[arg(long)]
    pub role: Option<String>,
    /// R, R_log, C, R+C or R_log+C.
    #[arg(long)]
    pub variant: Option<String>,
    /// Train a single-landmark network for landmark `k`.
    #[arg(long)]
    pub landmark: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub global_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub global_checkpoint: Option<PathBuf>,
    /// Local checkpoints in landmark order.
    #[arg(long, num_args = 1..)]
    pub local_checkpoints: Option<Vec<PathBuf>>,
    /// Skip refinement.
    #[arg(long)]
    pub global_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated subset of variants.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

fn path(p: &Path) -> Value {
    json!(p.to_string_lossy())
}

struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn set<T: Serialize>(&mut self, key: &'static str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, serde_json::to_value(v).expect("flag values serialize")));
        }
        self
    }

    fn path(&mut self, key: &'static str, v: Option<&PathBuf>) -> &mut Self {
        if let Some(p) = v {
            self.0.push((key, path(p)));
        }
        self
    }
}

fn load<T: DeserializeOwned + Serialize>(c: &ConfigArg, o: &Overrides) -> Result<(T, Value)> {
    resolve(c.config.as_deref(), &o.0)
}

/// The run directory, created, with the resolved configuration saved in it.
fn prepare(cli: &Cli, kind: &str, resolved: &Value) -> Result<PathBuf> {
    let dir = match &cli.run_dir {
        Some(d) => {
            create_dir(d)?;
            d.clone()
        }
        None => new_run_dir(&output_root(cli.out_root.as_deref()), kind, &config_hash(resolved))?,
    };
    write_json(&dir.join("config.json"), resolved)?;
    Ok(dir)
}

fn to_value<T: Serialize>(v: T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Execute a parsed command and return its summary.
pub fn execute(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Synth(a) => {
            let mut o = Overrides::new();
            o.set("seed", a.seed).set("count", a.count);
            let (cfg, resolved): (SynthConfig, _) = load(&a.config, &o)?;
            cfg.validate()?;
            let dir = prepare(cli, "synth", &resolved)?;
            to_value(dataset::run_synth(&cfg, &resolved, &dir)?)
        }
        Command::Ingest(a) => {
            let mut o = Overrides::new();
            o.path("image_dir", a.image_dir.as_ref())
                .set("annotation_dirs", a.annotations.as_ref())
                .set("resample_mm", a.resample_mm);
            let (cfg, resolved): (IngestConfig, _) = load(&a.config, &o)?;
            cfg.validate()?;
            let dir = prepare(cli, "dataset", &resolved)?;
            to_value(dataset::run_ingest(&cfg, &resolved, &dir)?)
        }
        Command::Train(a) => {
            let mut o = Overrides::new();
            o.path("dataset", a.dataset.as_ref())
                .set("role", a.role.as_ref())
                .set("variant", a.variant.as_ref())
                .set("landmark", a.landmark)
                .set("training.iterations", a.iterations)
                .set("training.seed", a.seed)
                .path("global_checkpoint", a.global_checkpoint.as_ref());
            let (cfg, resolved): (TrainRunConfig, _) = load(&a.config, &o)?;
            cfg.validate()?;
            let dir = prepare(cli, "train", &resolved)?;
            to_value(train::run_train(&cfg, &dir)?)
        }
        Command::Localize(a) => {
            let mut o = Overrides::new();
            o.path("dataset", a.dataset.as_ref())
                .set("split", a.split.as_ref())
                .path("global_checkpoint", a.global_checkpoint.as_ref())
                .set("local_checkpoints", a.local_checkpoints.as_ref())
                .set("global_only", a.global_only.then_some(true));
            let (cfg, resolved): (LocalizeConfig, _) = load(&a.config, &o)?;
            cfg.validate()?;
            let dir = prepare(cli, "localize", &resolved)?;
            to_value(localize::run_localize(&cfg, &dir)?)
        }
        Command::Eval(a) => {
            let mut o = Overrides::new();
            o.path("predictions", a.predictions.as_ref())
                .path("references", a.references.as_ref());
            let (cfg, resolved): (EvalConfig, _) = load(&a.config, &o)?;
            cfg.validate()?;
            let dir = prepare(cli, "eval", &resolved)?;
            to_value(eval::run_eval(&cfg, &dir)?)
        }
        Command::Ablate(a) => {
            let mut o = Overrides::new();
            o.path("dataset", a.dataset.as_ref())
                .set("variants", a.variants.as_ref());
            let (cfg, resolved): (AblateConfig, _) = load(&a.config, &o)?;
            cfg.validate()?;
            let dir = prepare(cli, "ablate", &resolved)?;
            let cache = output_root(cli.out_root.as_deref()).join("cache");
            to_value(ablate::run_ablate(&cfg, &dir, &cache)?)
        }
    }
}

/// Execute inside a thread pool capped at `--threads` workers.
pub fn run(cli: &Cli) -> Result<Value> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| execute(cli))
}

/// Parse `args`, run, print the JSON summary and map the outcome to an exit
/// status: 0 on success, 1 for usage or configuration errors, 2 otherwise.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
