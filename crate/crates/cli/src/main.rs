//! `mvpose` experiment runner.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvpose::active::Policy;
use mvpose::harness::{
    comparison_csv, compare_policies, parse_seeds, plot_csv, plot_rows, read_summary, read_trajectory_lines,
    run_experiment, write_outputs, ExperimentConfig, HarnessError,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mvpose", version, about = "Multi-view active pose estimation experiments")]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, object, policy) trajectory and write the artifacts.
    Run(RunArgs),
    /// Align summaries into a views × policy table with NBV deltas.
    Compare {
        /// summary.json files.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection rate vs number of views, per policy.
    PlotData {
        /// Trajectory .jsonl files or directories holding them.
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config, printing it with defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; defaults are used for absent fields (or entirely, if omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, env = "MVPOSE_OUT_DIR")]
    out: Option<PathBuf>,
    /// Seeds as `a..b`, `n` or `a,b,c`.
    #[arg(long)]
    seeds: Option<String>,
    /// Restrict to these policies (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    policy: Vec<Policy>,
    /// View budget including the two bootstrap views.
    #[arg(long)]
    views: Option<usize>,
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config { .. } | HarnessError::Parse(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), HarnessError> {
    match out {
        Some(p) => fs::write(p, text)
            .map_err(|e| HarnessError::Io { path: p.display().to_string(), message: e.to_string() }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(args: RunArgs) -> Result<u8, HarnessError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s).map_err(|m| HarnessError::Config { field: "seeds".into(), message: m })?;
    }
    if !args.policy.is_empty() {
        cfg.policies = args.policy.clone();
    }
    if let Some(v) = args.views {
        cfg.views = v;
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    cfg.output_dir = out.display().to_string();
    cfg.validate()?;

    let result = run_experiment(&cfg)?;
    fs::create_dir_all(&out)
        .map_err(|e| HarnessError::Io { path: out.display().to_string(), message: e.to_string() })?;
    write_outputs(&result, &out)?;

    for r in &result.summary.rates {
        println!(
            "{:<12} views {:>2}  ADD* {:>6.2}%  (5,10) {:>6.2}%  n={}",
            r.policy.name(),
            r.views,
            r.add_rate,
            r.five_ten_rate,
            r.trials
        );
    }
    println!("wrote {}", out.display());
    if result.failures.is_empty() {
        Ok(0)
    } else {
        for f in &result.failures {
            eprintln!("estimator failure: {f}");
        }
        Ok(EXIT_PARTIAL)
    }
}

fn dispatch(command: Command) -> Result<u8, HarnessError> {
    match command {
        Command::Run(args) => run(args),
        Command::Compare { summaries, out } => {
            let loaded = summaries.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>, _>>()?;
            emit(&comparison_csv(&compare_policies(&loaded)?)?, out.as_deref())?;
            Ok(0)
        }
        Command::PlotData { trajectories, out } => {
            let lines = read_trajectory_lines(&trajectories)?;
            emit(&plot_csv(&plot_rows(&lines)?)?, out.as_deref())?;
            Ok(0)
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let text = serde_json::to_string_pretty(&cfg).map_err(|e| HarnessError::Input(e.to_string()))?;
            println!("{text}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
