mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vltrack_core::pipeline::Mode;

/// Vision-language single-object tracker.
#[derive(Debug, Parser)]
#[command(name = "vltrack", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct GlobalOpts {
    /// Engine configuration (TOML). Defaults to `<sequence>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `rpo.epsilon=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Backend mode: live, record or replay.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Directory of per-sequence cassettes.
    #[arg(long, global = true)]
    cassette_dir: Option<PathBuf>,
    /// Sequences processed concurrently.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    /// Seed for everything random.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track one or more sequences.
    Track {
        /// Sequence directories, or dataset roots containing them.
        #[arg(required = true)]
        sequences: Vec<PathBuf>,
        /// Output root; results go to `<out>/<sequence>/`.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run only the first-frame description loop and print its trace.
    Rpo {
        sequence: PathBuf,
        /// Also write the trace to this file.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Score predictions against groundtruth.
    Eval {
        /// Sequence directories (or dataset roots) holding groundtruth.txt.
        #[arg(required = true)]
        sequences: Vec<PathBuf>,
        /// Output root of a `track` run.
        #[arg(long)]
        pred: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic moving-square sequence with a scripted backend config.
    Synth(SynthArgs),
    /// Replay recorded sequences and compare against earlier outputs.
    ReplayVerify {
        #[arg(required = true)]
        sequences: Vec<PathBuf>,
        /// Output root of the recorded run.
        #[arg(long)]
        expected: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory to create.
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    /// Square side in pixels.
    #[arg(long, default_value_t = 24)]
    size: u32,
    /// Largest per-frame speed in pixels.
    #[arg(long, default_value_t = 3)]
    speed: i64,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    /// Per-frame drift of the scripted tracker along x.
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    drift_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    drift_y: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::dispatch(&cli.global, cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
