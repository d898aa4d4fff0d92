//! Command-line front end: one subcommand per pipeline stage plus
//! `pipeline`, which chains them.
//!
//! Exit codes: 0 on success, 1 when a stage fails, 2 on a usage error.
//! Failures print one JSON object to stderr:
//! `{"error": {"stage", "kind", "message", "path"?}}`.

pub mod config;
pub mod error;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::{Ctx, StageOutput};

#[derive(Debug, Parser)]
#[command(name = "bsdp", version, about = "Dynamic bicycle-station planning for dockless bike sharing")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "BSDP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every randomised stage; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-subset and per-region work (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Fail on malformed rows and on rides outside every region.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Config override `section.key=value`; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic city: trajectories, ground truth, legal positions, regions.
    Synth,
    /// Cluster drop-off positions of every (region, period) subset.
    Cluster,
    /// Build and prune one station graph per subset.
    Graph,
    /// Assemble per-region graph sequences and fit their grid codecs.
    Sequence,
    /// Train one recurrent predictor per region.
    Train,
    /// Predict next-period stations per region.
    Predict,
    /// Snap predicted stations onto legal parking positions.
    Recommend,
    /// Cross-validated prediction scores and clustering AUC.
    Eval {
        /// Score only this fold of the plan.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Run every stage in order (synth first when the config has a [synth] table).
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Cluster => "cluster",
            Command::Graph => "graph",
            Command::Sequence => "sequence",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Recommend => "recommend",
            Command::Eval { .. } => "eval",
            Command::Pipeline => "pipeline",
        }
    }
}

struct Failure {
    stage: &'static str,
    error: CliError,
}

fn at(stage: &'static str) -> impl Fn(CliError) -> Failure {
    move |error| Failure { stage, error }
}

fn execute(cmd: Command, ctx: &Ctx) -> Result<StageOutput, Failure> {
    let one = |c: Command| -> Result<StageOutput, Failure> {
        match c {
            Command::Synth => stages::synth(ctx),
            Command::Cluster => stages::cluster(ctx),
            Command::Graph => stages::graph(ctx),
            Command::Sequence => stages::sequence(ctx),
            Command::Train => stages::train(ctx),
            Command::Predict => stages::predict(ctx),
            Command::Recommend => stages::recommend(ctx),
            Command::Eval { fold } => stages::eval(ctx, fold),
            Command::Pipeline => unreachable!("expanded below"),
        }
        .map_err(at(c.name()))
    };
    if cmd != Command::Pipeline {
        return one(cmd);
    }
    let mut chain = Vec::new();
    if ctx.cfg.synth.is_some() {
        chain.push(Command::Synth);
    }
    chain.extend([
        Command::Cluster,
        Command::Graph,
        Command::Sequence,
        Command::Train,
        Command::Predict,
        Command::Recommend,
        Command::Eval { fold: None },
    ]);
    let mut out = StageOutput::default();
    for c in chain {
        out.extend(one(c)?);
    }
    Ok(out)
}

fn fail(stage: &str, kind: &str, message: String, path: Option<String>) -> String {
    let mut err = json!({ "stage": stage, "kind": kind, "message": message });
    if let Some(p) = path {
        err["path"] = json!(p);
    }
    json!({ "error": err }).to_string()
}

fn run_parsed(cli: Cli) -> Result<StageOutput, Failure> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed).map_err(at("config"))?;
    std::fs::create_dir_all(&cfg.paths.output_dir).map_err(|e| at("config")(CliError::io(&cfg.paths.output_dir, e)))?;
    let record = cfg.paths.out("run_config.toml");
    let text = toml::to_string(&cfg).map_err(|e| at("config")(CliError::Config(e.to_string())))?;
    std::fs::write(&record, text).map_err(|e| at("config")(CliError::io(&record, e)))?;

    let ctx = Ctx { cfg, strict: cli.strict };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| at("config")(CliError::Config(format!("cannot start {} worker threads: {e}", cli.jobs))))?;
    let mut out = pool.install(|| execute(cli.command, &ctx))?;
    out.artifacts.insert(0, record);
    Ok(out)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", fail("usage", "usage", e.render().to_string().trim().to_string(), None));
            return 2;
        }
    };
    let command = cli.command.name();
    match run_parsed(cli) {
        Ok(out) => {
            println!("{}", json!({ "command": command, "artifacts": out.artifacts, "notes": out.notes }));
            0
        }
        Err(Failure { stage, error }) => {
            eprintln!("{}", fail(stage, error.kind(), error.to_string(), error.path().map(|p| p.display().to_string())));
            1
        }
    }
}
