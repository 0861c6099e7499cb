//! `emrq`: run the questionnaire pipeline stage by stage over a run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use emrq_core::pipeline::{Config, GenerateTarget, Outcome, Pipeline, SynthesizeTarget};

#[derive(Parser, Debug)]
#[command(
    name = "emrq",
    version,
    about = "Pre-consultation questionnaires from medical records"
)]
struct Cli {
    /// TOML configuration file; built-in defaults (mock provider) when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Recompute artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for per-record work (overrides the config file).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Mock provider seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split each record into atomic assertions.
    Extract {
        /// JSONL corpus of records; reuses the run directory's copy when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Link each record's assertions into a causal network.
    Network,
    /// Cluster networks per disease into weighted representative pathways.
    Synthesize {
        #[command(flatten)]
        target: DiseaseOrAll,
        /// Dendrogram cutoff in [0, 2] (overrides the config file).
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Generate personal or disease questionnaires.
    Generate {
        #[command(flatten)]
        target: GenerateArgs,
    },
    /// Score stored questionnaires and write report.json.
    Evaluate {
        /// Cosine threshold in (0, 1] for a fact to count as covered.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Print the stored evaluation table.
    Report,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct DiseaseOrAll {
    /// One ICD-10 code.
    #[arg(long)]
    disease: Option<String>,
    /// Every disease code in the corpus.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct GenerateArgs {
    /// Personal questionnaire for one record id.
    #[arg(long)]
    personal: Option<String>,
    /// Disease questionnaire for one ICD-10 code.
    #[arg(long)]
    disease: Option<String>,
    /// Every record and every synthesized disease.
    #[arg(long)]
    all: bool,
}

fn build_pipeline(cli: &Cli) -> Result<Pipeline> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(Pipeline::new(config, &cli.run_dir)?.force(cli.force))
}

fn summarize(stage: &str, outcome: &Outcome) -> u8 {
    println!(
        "{stage}: {} produced, {} cached, {} failed",
        outcome.produced,
        outcome.cached,
        outcome.failures.len()
    );
    for f in &outcome.failures {
        eprintln!("failed: {f}");
    }
    if outcome.is_success() {
        0
    } else {
        2
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let p = build_pipeline(cli).context("cannot set up the pipeline")?;
    let code = match &cli.command {
        Command::Extract { corpus } => summarize("extract", &p.extract(corpus.as_deref())?),
        Command::Network => summarize("network", &p.network()?),
        Command::Synthesize { target, cutoff } => {
            let target = match &target.disease {
                Some(code) => SynthesizeTarget::Disease(code.clone()),
                None => SynthesizeTarget::All,
            };
            summarize("synthesize", &p.synthesize(&target, *cutoff)?)
        }
        Command::Generate { target } => {
            let target = match (&target.personal, &target.disease) {
                (Some(id), _) => GenerateTarget::Personal(id.clone()),
                (_, Some(code)) => GenerateTarget::Disease(code.clone()),
                _ => GenerateTarget::All,
            };
            summarize("generate", &p.generate(&target)?)
        }
        Command::Evaluate { tau } => {
            let (outcome, report) = p.evaluate(*tau)?;
            print!("{}", report.render());
            summarize("evaluate", &outcome)
        }
        Command::Report => {
            print!("{}", p.report()?);
            0
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
