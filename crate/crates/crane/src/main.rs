use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crane::stages::Run;
use crane::{verify, CliError, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "crane", version, about = "Relevance-based language-neuron identification on toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one of the configured seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/held-out corpora and multiple-choice tasks.
    GenCorpus(Common),
    /// Build the (optionally planted) model.
    BuildModel(Common),
    /// Train the model on the mixed corpus.
    Train(Common),
    /// Attribute relevance and accumulate statistics.
    Attribute(Common),
    /// Compute kurtosis and select neuron sets.
    Select(Common),
    /// Mask neuron sets and score every language.
    Intervene(Common),
    /// Apply the selected sets to a fine-tuned or perturbed model.
    Transfer(Common),
    /// Aggregate per-seed results.
    Report(Common),
    /// Run every stage, reusing completed ones.
    Run(Common),
    /// Recompute LangSpec-F1 for score tables (built-in fixtures if none given).
    VerifyMetric { files: Vec<PathBuf> },
}

fn seeds(run: &Run, only: Option<u64>) -> Result<Vec<u64>, CliError> {
    match only {
        None => Ok(run.cfg.seeds.clone()),
        Some(s) if run.cfg.seeds.contains(&s) => Ok(vec![s]),
        Some(s) => Err(CliError::Config(format!("seed {s} is not in the config's seed list"))),
    }
}

fn open(c: &Common) -> Result<Run, CliError> {
    Run::new(PipelineConfig::load(&c.config)?, c.out.clone())
}

fn stage(stage: Stage, c: &Common) -> Result<(), CliError> {
    let mut run = open(c)?;
    for s in seeds(&run, c.seed)? {
        run.execute(stage, s, true)?;
    }
    run.finish()?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenCorpus(c) => stage(Stage::GenCorpus, &c),
        Command::BuildModel(c) => stage(Stage::BuildModel, &c),
        Command::Train(c) => stage(Stage::Train, &c),
        Command::Attribute(c) => stage(Stage::Attribute, &c),
        Command::Select(c) => stage(Stage::Select, &c),
        Command::Intervene(c) => stage(Stage::Intervene, &c),
        Command::Transfer(c) => stage(Stage::Transfer, &c),
        Command::Report(c) => {
            let mut run = open(&c)?;
            run.report()?;
            run.finish()?;
            Ok(())
        }
        Command::Run(c) => {
            let mut run = open(&c)?;
            for s in seeds(&run, c.seed)? {
                for st in Stage::ALL {
                    run.execute(st, s, false)?;
                }
            }
            run.report()?;
            run.finish()?;
            Ok(())
        }
        Command::VerifyMetric { files } => {
            let mut failed = 0;
            if files.is_empty() {
                for (name, text) in verify::FIXTURES {
                    failed += verify::verify(name, text)?;
                }
            } else {
                for f in &files {
                    let text = std::fs::read_to_string(f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
                    failed += verify::verify(&f.display().to_string(), &text)?;
                }
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} row(s) differ from the printed F1")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("CRANE_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("[crane] warning: could not size the worker pool: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("[crane] error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
