//! Batch command-line pipelines: synthetic data, training, masks, comparisons, figures.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{RunDir, RESOLVED_CONFIG};
use config::{ConfigError, Key, RunConfig};

/// Environment variable naming the default parent of run directories.
pub const RUN_ROOT_ENV: &str = "NEUROMASK_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "neuromask", version, about = "3D CNN classification and perturbation-mask visualization")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output directory (default: $NEUROMASK_RUN_ROOT/<command>, or runs/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(short, long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort, atlas and manifest.
    Synth(ConfigArgs),
    /// Reject volumes whose maximum is below 0.95.
    Qc(ConfigArgs),
    /// Train one fold.
    Train(ConfigArgs),
    /// Train every fold.
    Cv(ConfigArgs),
    /// Random architecture and optimizer search on fold 0.
    RandomSearch(ConfigArgs),
    /// One mask over all correctly classified target-class training images.
    MaskGroup(ConfigArgs),
    /// One mask per target-class session.
    MaskSession(ConfigArgs),
    /// Group masks over a one-axis-at-a-time hyperparameter grid.
    GridSearch(ConfigArgs),
    /// Pairwise ROI similarity and prob_CNN across runs, masks or sessions.
    Compare(ConfigArgs),
    /// Slice montage of a volume with an optional mask overlay.
    Render(ConfigArgs),
}

const COMMANDS: [&str; 10] =
    ["synth", "qc", "train", "cv", "random-search", "mask-group", "mask-session", "grid-search", "compare", "render"];

fn keys_for(name: &str) -> Vec<Key> {
    match name {
        "synth" => config::synth_keys(),
        "qc" => config::qc_keys(),
        "train" => config::classifier_keys(true),
        "cv" => config::classifier_keys(false),
        "random-search" => config::search_keys(),
        "mask-group" => config::mask_group_keys(),
        "mask-session" => config::mask_session_keys(),
        "grid-search" => config::grid_keys(),
        "compare" => config::compare_keys(),
        "render" => config::render_keys(),
        other => unreachable!("no key table for {other}"),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Qc(_) => "qc",
            Command::Train(_) => "train",
            Command::Cv(_) => "cv",
            Command::RandomSearch(_) => "random-search",
            Command::MaskGroup(_) => "mask-group",
            Command::MaskSession(_) => "mask-session",
            Command::GridSearch(_) => "grid-search",
            Command::Compare(_) => "compare",
            Command::Render(_) => "render",
        }
    }

    fn args(&self) -> &ConfigArgs {
        match self {
            Command::Synth(a)
            | Command::Qc(a)
            | Command::Train(a)
            | Command::Cv(a)
            | Command::RandomSearch(a)
            | Command::MaskGroup(a)
            | Command::MaskSession(a)
            | Command::GridSearch(a)
            | Command::Compare(a)
            | Command::Render(a) => a,
        }
    }
}

/// The clap command with every subcommand's key table appended to its help.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in COMMANDS {
        let help = config::keys_help(&keys_for(name));
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help));
    }
    cmd
}

fn default_run_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

/// Resolves the config, writes it into the run directory, then runs the command.
pub fn execute(cli: &Cli) -> anyhow::Result<PathBuf> {
    let name = cli.command.name();
    let args = cli.command.args();
    let cfg = RunConfig::resolve(&keys_for(name), args.config.as_deref(), &args.set)?;
    let run = RunDir::create(cli.run_dir.clone().unwrap_or_else(|| default_run_dir(name)))?;
    neuromask::dataio::write_text(&run.path(RESOLVED_CONFIG), &cfg.to_text())?;
    log::info!("{name}: writing to {}", run.root().display());
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg, &run)?,
        Command::Qc(_) => commands::qc(&cfg, &run)?,
        Command::Train(_) => commands::train(&cfg, &run)?,
        Command::Cv(_) => commands::cv(&cfg, &run)?,
        Command::RandomSearch(_) => commands::search(&cfg, &run)?,
        Command::MaskGroup(_) => commands::mask_group(&cfg, &run)?,
        Command::MaskSession(_) => commands::mask_session(&cfg, &run)?,
        Command::GridSearch(_) => commands::grid_search(&cfg, &run)?,
        Command::Compare(_) => commands::compare(&cfg, &run)?,
        Command::Render(_) => commands::render(&cfg, &run)?,
    }
    Ok(run.root().to_path_buf())
}

/// The error chain, skipping causes already quoted by an outer message.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 2;
        }
        // Fails harmlessly if a pool was already installed in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
