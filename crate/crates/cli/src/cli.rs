use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use veilscan_core::pipeline::RUN_FILE;
use veilscan_core::{Error, PipelineConfig, Result, Run, Stage};

/// Surface mislabeled training examples by tracing probe influence.
#[derive(Debug, Parser)]
#[command(name = "veilscan", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. Precedence: flag > `VEILSCAN_*` env >
/// `--config` file > the run directory's `run.json` > built-in defaults.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML or JSON pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory (for `serve`: the directory holding run directories).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Influence methods, comma separated or repeated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Vec<String>,
    /// Absolute precision cut-offs, comma separated or repeated.
    #[arg(long = "k", global = true, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Number of probes to score with.
    #[arg(long, global = true)]
    pub probes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the corpus.
    Generate,
    /// Train the student on the teacher's labels.
    Distill,
    /// Score every candidate against every probe.
    Score,
    /// Aggregate scores into rankings.
    Rank,
    /// Veiled counts, rank histograms and probe-subset robustness.
    Report,
    /// Build fix and flip plans.
    Remediate,
    /// Retrain the gold benchmark and every planned model.
    Retrain,
    /// Class recall of every model.
    Evaluate,
    /// Serve the triage HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Every stage in order.
    RunAll,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Generate => Stage::Generate,
            Command::Distill => Stage::Distill,
            Command::Score => Stage::Score,
            Command::Rank => Stage::Rank,
            Command::Report => Stage::Report,
            Command::Remediate => Stage::Remediate,
            Command::Retrain => Stage::Retrain,
            Command::Evaluate => Stage::Evaluate,
            Command::Serve { .. } | Command::RunAll => return None,
        })
    }
}

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_STAGE: u8 = 2;

/// Builds the effective configuration from `common`, the process environment and any saved run.
pub fn resolve_config<I>(common: &Common, env: I) -> Result<PipelineConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let env: Vec<(String, String)> = env.into_iter().collect();
    let mut base = match &common.config {
        Some(path) => PipelineConfig::from_path(path)?,
        None => {
            let dir = common.out.clone().unwrap_or_else(|| PipelineConfig::default().out_dir);
            let saved = dir.join(RUN_FILE);
            if saved.is_file() {
                serde_json::from_str(&std::fs::read_to_string(&saved).map_err(|e| Error::Io { path: saved.clone(), source: e })?)
                    .map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", saved.display())]))?
            } else {
                PipelineConfig::default()
            }
        }
    };
    base = base.apply_env(env)?;
    if let Some(out) = &common.out {
        base.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        base.seed = seed;
    }
    if !common.method.is_empty() {
        base.methods = common.method.clone();
    }
    if !common.k.is_empty() {
        base.ks = common.k.clone();
    }
    if let Some(p) = common.probes {
        base.probe_count = p;
    }
    Ok(base)
}

fn print_artifact(run: &Run, rel: &str) {
    if let Ok(text) = std::fs::read_to_string(run.path(rel)) {
        println!("== {rel}\n{text}");
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = resolve_config(&cli.common, std::env::vars())?;
    if let Command::Serve { addr } = cli.command {
        let root = config.out_dir.clone();
        let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: root.clone(), source: e })?;
        return rt
            .block_on(crate::service::serve(root.clone(), addr))
            .map_err(|e| Error::Io { path: root, source: e }.in_stage("serve"));
    }
    let run = Run::create(&config)?;
    let manifests = match cli.command.stage() {
        Some(stage) => vec![run.run_stage(stage)?],
        None => run.run_all()?,
    };
    for m in &manifests {
        println!("{:<10} {:>7} ms  {}", m.stage.name(), m.elapsed_ms, m.artifacts.len());
    }
    let last = manifests.last().map(|m| m.stage);
    if matches!(last, Some(Stage::Report) | Some(Stage::Evaluate)) || manifests.len() > 1 {
        if manifests.iter().any(|m| m.stage == Stage::Report) {
            print_artifact(&run, "reports/veiled_found.tsv");
        }
        if manifests.iter().any(|m| m.stage == Stage::Evaluate) {
            print_artifact(&run, "reports/class_recall.tsv");
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 1 for invalid arguments or configuration, 2 for a failing stage.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_STAGE })
        }
    }
}
