//! Command-line driver: declarative TOML config, flag overrides, staged
//! subcommands over a content-addressed run directory.

use clap::{Args, Parser, Subcommand};
use mode_core::embed::EmbeddingMatrix;
use mode_core::pipeline::{Pipeline, RunConfig, StageOutcome, TrainOrder};
use mode_core::ModeError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mode",
    about = "Cluster a paired corpus, train per-cluster data experts, route tasks, evaluate",
    version
)]
struct Cli {
    /// Declarative run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    cmd: Cmd,
}

/// Flag overrides applied on top of the config file. Every resolved value
/// (including untouched defaults) is printed into the run manifest.
#[derive(Args)]
struct Overrides {
    /// Run directory for artifacts, manifest, and reports.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Fine cluster count.
    #[arg(long, global = true)]
    m: Option<usize>,

    /// Coarse cluster (expert) count.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Corpus generation seed.
    #[arg(long, global = true)]
    corpus_seed: Option<u64>,

    /// Paired corpus size for gen-corpus.
    #[arg(long, global = true)]
    corpus_size: Option<usize>,

    /// Total optimizer steps per training run.
    #[arg(long, global = true)]
    total_steps: Option<u64>,

    /// Routing temperature.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Evaluation seeds for the ablation matrix, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(dir) = &self.out_dir {
            cfg.paths.out_dir = dir.clone();
        }
        if let Some(m) = self.m {
            cfg.clustering.m = m;
        }
        if let Some(n) = self.n {
            cfg.clustering.n = n;
        }
        if let Some(seed) = self.corpus_seed {
            cfg.corpus.seed = seed;
        }
        if let Some(size) = self.corpus_size {
            cfg.corpus.corpus_size = size;
        }
        if let Some(steps) = self.total_steps {
            cfg.training.total_steps = steps;
        }
        if let Some(lambda) = self.lambda {
            cfg.routing.lambda = lambda;
        }
        if let Some(seeds) = &self.seeds {
            cfg.evaluation.seeds = seeds.clone();
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic paired corpus into the run directory.
    GenCorpus,
    /// Validate external embedding files and write canonical copies.
    Ingest,
    /// Fit fine/coarse clusters and assign the full corpus.
    Cluster,
    /// Train the shared seed model.
    TrainSeed,
    /// Train per-condition experts branched from the seed model.
    TrainExperts {
        /// 'priority' (descending cluster diversity), 'all', or a
        /// comma-separated condition list like '2,0,1'.
        #[arg(long, default_value = "priority")]
        order: String,
    },
    /// Rank trained conditions for a task metadata file.
    SelectExpert {
        /// Embedding file whose rows describe the task.
        #[arg(long)]
        metadata: PathBuf,
    },
    /// Evaluate the trained system plus the configured ablation matrix.
    Evaluate,
    /// Render the summary table from stored evaluation records.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig, ModeError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcome(stage: &str, outcome: &StageOutcome) {
    for msg in &outcome.messages {
        println!("{stage}: {msg}");
    }
    if outcome.skipped && outcome.messages.is_empty() {
        println!("{stage}: up to date; skipped");
    }
}

fn run(cli: &Cli) -> Result<(), ModeError> {
    let cfg = load_config(cli)?;
    let mut pipeline = Pipeline::open(cfg)?;
    match &cli.cmd {
        Cmd::GenCorpus => print_outcome("gen-corpus", &pipeline.gen_corpus()?),
        Cmd::Ingest => print_outcome("ingest", &pipeline.ingest()?),
        Cmd::Cluster => print_outcome("cluster", &pipeline.cluster()?),
        Cmd::TrainSeed => print_outcome("train-seed", &pipeline.train_seed_stage()?),
        Cmd::TrainExperts { order } => {
            let order = TrainOrder::parse(order)?;
            print_outcome("train-experts", &pipeline.train_experts(&order)?);
        }
        Cmd::SelectExpert { metadata } => {
            let rows = EmbeddingMatrix::read_file(metadata)?;
            let ranked = pipeline.select_expert(&rows)?;
            for (condition, hits) in ranked {
                println!("condition {condition}: {hits} hits");
            }
        }
        Cmd::Evaluate => {
            print_outcome("evaluate", &pipeline.evaluate()?);
            println!("{}", pipeline.report()?);
        }
        Cmd::Report => println!("{}", pipeline.report()?),
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn init_thread_pool() -> Result<(), ModeError> {
    let Ok(raw) = std::env::var("MODE_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| ModeError::Config(format!("MODE_THREADS must be a number, got '{raw}'")))?;
    if threads == 0 {
        return Err(ModeError::Config("MODE_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| ModeError::Config(format!("cannot size the thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn init_thread_pool() -> Result<(), ModeError> {
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_thread_pool().and_then(|()| run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
