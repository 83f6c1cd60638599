use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qadapt_core::config::RunConfig;
use qadapt_core::pipeline::SweepParam;
use qadapt_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "qadapt", version, about = "Query-driven test-time adaptation for open-vocabulary segment retrieval")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "QADAPT_THREADS")]
    threads: Option<usize>,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Setting override, `section.key=value`. Repeatable; wins over the
    /// environment and the config file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate an archive and optionally write a canonical copy.
    Ingest {
        archive: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark.
    Synth(SynthArgs),
    /// Adapt the text side to a query or class list and write a checkpoint.
    Adapt(AdaptArgs),
    /// Rank the segments of one scene for a class.
    Retrieve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long = "class")]
        class_name: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Recall@1 of class queries against ground truth.
    EvalClasses {
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated classes.
        #[arg(long, value_delimiter = ',', conflicts_with = "class_sets", required_unless_present = "class_sets")]
        classes: Vec<String>,
        /// Class-set file; every target of every set is queried.
        #[arg(long)]
        class_sets: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Average task recall over a tasks file.
    EvalTasks {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Compare the pre-trained prompt, the baselines and the ablation variants.
    Ablate {
        #[command(flatten)]
        bench: BenchArgs,
        /// Directory receiving ablation.json and ablation.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// One adapt-and-evaluate run per parameter value.
    Sweep {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_parser = parse_sweep_param)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic-benchmark configuration.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shift_degrees: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    distractor_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    store: PathBuf,
    /// Natural-language query, decomposed into target classes.
    #[arg(long, conflicts_with = "classes", required_unless_present = "classes")]
    query: Option<String>,
    /// Comma-separated target classes; no language model is consulted.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Archive the adaptation data is selected from.
    #[arg(long)]
    adapt: PathBuf,
    /// Archive with ground truth that is scored.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    class_sets: PathBuf,
}

#[derive(Args, Debug)]
struct ReportOut {
    /// JSON report destination; stdout when absent.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_sweep_param(s: &str) -> Result<SweepParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.family().exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> qadapt_core::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let mut config = RunConfig::resolve(cli.config.as_deref())?;
    for o in &cli.overrides {
        config = config.with_override(o)?;
    }
    config.train.validate()?;

    match cli.command {
        Command::Ingest { archive, out } => commands::ingest(&archive, out.as_deref()),
        Command::Synth(a) => commands::synth(&a),
        Command::Adapt(a) => commands::adapt(&config, &a),
        Command::Retrieve {
            store,
            scene,
            class_name,
            checkpoint,
            top_k,
        } => commands::retrieve(&config, &store, &scene, &class_name, checkpoint.as_deref(), top_k),
        Command::EvalClasses {
            store,
            classes,
            class_sets,
            checkpoint,
            out,
        } => commands::eval_classes(&config, &store, classes, class_sets.as_deref(), checkpoint.as_deref(), &out),
        Command::EvalTasks {
            store,
            tasks,
            checkpoint,
            out,
        } => commands::eval_tasks(&config, &store, &tasks, checkpoint.as_deref(), &out),
        Command::Ablate { bench, out } => commands::ablate(&config, &bench, &out),
        Command::Sweep {
            bench,
            param,
            values,
            out,
        } => commands::sweep(&config, &bench, param, &values, out.as_deref()),
    }
}
