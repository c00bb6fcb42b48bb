//! `concnn`: pre-process, train, classify and cross-validate thin-section images.
//!
//! Exit status is 0 on success, 1 when the input or configuration is invalid,
//! and 2 when a run fails for any other reason.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::PairInput;
use config::RunConfig;

/// Rejected input or configuration.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

/// Sections that failed during a batch command; each was already reported.
#[derive(Debug, Default)]
pub struct SectionFailures {
    pub count: usize,
    pub runtime: bool,
}

impl SectionFailures {
    pub fn record(&mut self, e: &concnn::Error) {
        self.count += 1;
        self.runtime |= is_runtime(e);
    }
}

impl fmt::Display for SectionFailures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} section(s) failed", self.count)
    }
}

impl std::error::Error for SectionFailures {}

fn is_runtime(e: &concnn::Error) -> bool {
    use concnn::Error::*;
    matches!(e, Io { .. } | NonFiniteLoss { .. } | CacheMismatch { .. })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 1;
        }
        if let Some(f) = cause.downcast_ref::<SectionFailures>() {
            return if f.runtime { 2 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<concnn::Error>() {
            return if is_runtime(e) { 2 } else { 1 };
        }
    }
    2
}

#[derive(Parser)]
#[command(
    name = "concnn",
    version,
    about = "Thin-section rock classification with a three-branch CNN ensemble"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    settings: Settings,
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args)]
struct Settings {
    /// Settings file of `key = value` lines
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Section manifest (`id | rock type | angle | ppl | xpl` per line)
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed for every random choice
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    patch_size: Option<usize>,

    /// Convolution padding
    #[arg(long, global = true, value_parser = ["0", "1"])]
    padding: Option<String>,

    /// Branch weights for PPL, XPL and CI
    #[arg(long, global = true, value_name = "W1,W2,W3")]
    weights: Option<String>,

    /// Cross-validation folds
    #[arg(long, global = true, value_name = "K")]
    folds: Option<usize>,

    #[arg(long, global = true, value_parser = ["section", "patch"])]
    split: Option<String>,

    /// Revision vote: fused classes per position, or every branch's vote
    #[arg(long, global = true, value_parser = ["concat108", "branch324"])]
    vote: Option<String>,

    /// Any other setting, e.g. `--set learning_rate=0.05`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Equalize, fuse and write PPL/XPL/CI rasters for a manifest
    Preprocess,
    /// Train the three branches; writes model files and a loss log
    Train,
    /// Classify sections from a manifest or a single image pair
    Classify(ClassifyArgs),
    /// k-fold cross-validation with metrics, confusion matrices and ROC data
    Crossval,
    /// Generate a synthetic corpus and its manifest
    Synth,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Directory holding ppl.ccnn, xpl.ccnn and ci.ccnn
    #[arg(long, value_name = "DIR")]
    models: Option<PathBuf>,

    /// PPL image of a single section (with --xpl)
    #[arg(long, requires = "xpl", value_name = "FILE")]
    ppl: Option<PathBuf>,

    #[arg(long, requires = "ppl", value_name = "FILE")]
    xpl: Option<PathBuf>,

    /// Section id used in the report for --ppl/--xpl input
    #[arg(long, default_value = "section")]
    section_id: String,
}

impl Settings {
    fn resolve(&self, models: Option<&PathBuf>) -> Result<RunConfig, ValidationError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("manifest", path(&self.manifest)),
            ("out", path(&self.out)),
            ("models", models.map(|p| p.display().to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("patch_size", self.patch_size.map(|v| v.to_string())),
            ("padding", self.padding.clone()),
            ("weights", self.weights.clone()),
            ("folds", self.folds.map(|v| v.to_string())),
            ("split", self.split.clone()),
            ("vote", self.vote.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ValidationError(format!("--set {kv:?}: expected KEY=VALUE")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let models = match &cli.command {
        Command::Classify(a) => a.models.as_ref(),
        _ => None,
    };
    let cfg = cli.settings.resolve(models)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
    pool.install(|| match cli.command {
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Classify(a) => {
            let pair = match (a.ppl, a.xpl) {
                (Some(ppl), Some(xpl)) => Some(PairInput {
                    section_id: a.section_id,
                    ppl,
                    xpl,
                }),
                _ => None,
            };
            commands::classify(&cfg, pair)
        }
        Command::Crossval => commands::crossval(&cfg),
        Command::Synth => commands::synth(&cfg),
    })
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
