//! `cpp`: map checks, scenario generation, the greedy planner, scripted
//! rollouts, training, evaluation, rendering and mask inspection.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpp_core::config::Config;
use cpp_core::par::Execution;
use cpp_core::MaskLevel;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cpp", version, about = "Power-constrained coverage path planning with recharge")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file; falls back to $CPP_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Config override, e.g. `--set battery.b_max=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set safety.mask=LEVEL`.
    #[arg(long, global = true, value_name = "LEVEL")]
    pub mask: Option<MaskLevel>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Map files.
    #[command(subcommand)]
    Map(MapCmd),
    /// Scenario files.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Run the greedy recharge-aware planner on a scenario.
    Heuristic(HeuristicArgs),
    /// Play a fixed action script and record trace and observations.
    Rollout(RolloutArgs),
    /// Train a tabular masked policy.
    Train(TrainArgs),
    /// Evaluate actors on generated scenarios.
    Eval(EvalArgs),
    /// Draw a trace as PPM or ASCII.
    Render(RenderArgs),
    /// Action masks.
    #[command(subcommand)]
    Mask(MaskCmd),
    /// Effective configuration.
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Debug, Subcommand)]
pub enum MapCmd {
    /// Parse and summarise map files.
    Check {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Random map; connectivity is not guaranteed.
    Gen {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        landing: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCmd {
    /// Random target patches, spawn cell and initial battery.
    Gen {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct HeuristicArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// PPM image of the trajectory.
    #[arg(long, value_name = "FILE")]
    pub render: Option<PathBuf>,
    /// JSON-lines trace.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Print the trajectory as text.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Comma-separated names or indices, or `@FILE` with one per line.
    #[arg(long)]
    pub actions: String,
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Every observation, initial one first, in the binary wire format.
    #[arg(long, value_name = "FILE")]
    pub obs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Map files or directories; targets are generated per episode.
    #[arg(long, num_args = 1.., required_unless_present = "scenario", conflicts_with = "scenario")]
    pub maps: Vec<PathBuf>,
    /// Train on this scenario's fixed target set instead.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Map files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub maps: Vec<PathBuf>,
    /// heuristic, random, grounded, policy:CKPT or greedy:CKPT.
    #[arg(long, default_value = "heuristic", value_delimiter = ',')]
    pub actors: Vec<String>,
    /// Episodes; defaults to `eval.episodes`.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ascii: bool,
    /// Pixels per cell.
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
}

#[derive(Debug, Subcommand)]
pub enum MaskCmd {
    /// Masks at every level for one state, e.g. `--state landed,b=1,p=0:0`.
    Probe {
        #[arg(long)]
        state: String,
        /// Map file; a 3 x 3 map with one landing cell when absent.
        #[arg(long)]
        map: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigCmd {
    /// Print the effective configuration as TOML.
    Dump,
}

/// Human and machine renderings of a command's result.
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
}

impl Cli {
    pub fn load_config(&self) -> CliResult<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(m) = self.mask {
            overrides.push(format!("safety.mask=\"{m}\""));
        }
        Ok(Config::load(self.config.as_deref(), std::env::vars(), &overrides)?)
    }

    pub fn execution(&self) -> Execution {
        match self.jobs {
            Some(1) => Execution::Sequential,
            _ => Execution::default(),
        }
    }
}

fn run(cli: &Cli) -> CliResult<Report> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        if n > 1 && !cpp_core::par::set_threads(n) {
            log::warn!("could not resize the worker pool to {n} threads");
        }
    }
    let cfg = cli.load_config()?;
    match &cli.command {
        Command::Map(MapCmd::Check { files }) => commands::map_check(files, &cfg),
        Command::Map(MapCmd::Gen { size, landing, out }) => {
            commands::map_gen(*size, *landing, out.as_deref(), cli.seed.unwrap_or(0))
        }
        Command::Scenario(ScenarioCmd::Gen { map, out }) => {
            commands::scenario_gen(map, out.as_deref(), &cfg, cli.seed.unwrap_or(0))
        }
        Command::Heuristic(a) => commands::heuristic(a, &cfg),
        Command::Rollout(a) => commands::rollout(a, &cfg, cli.seed.unwrap_or(0)),
        Command::Train(a) => commands::train(a, cfg, cli.seed, cli.execution()),
        Command::Eval(a) => commands::eval(a, &cfg, cli.seed, cli.execution()),
        Command::Render(a) => commands::render(a),
        Command::Mask(MaskCmd::Probe { state, map }) => {
            commands::mask_probe(state, map.as_deref(), &cfg)
        }
        Command::Config(ConfigCmd::Dump) => commands::config_dump(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(report) => {
            if cli.json {
                println!("{}", report.json);
            } else if !report.text.is_empty() {
                print!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "error": e.to_string(), "kind": e.kind(), "code": code })
                );
            }
            eprintln!("error: {e}");
            ExitCode::from(code as u8)
        }
    }
}
