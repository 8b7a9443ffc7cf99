use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use profile_pref::config::PipelineConfig;
use profile_pref::fixture::{write_fixture, FixtureSpec};
use profile_pref::pipeline::{Pipeline, PipelineError, StageStatus};
use profile_pref::prompts::dump_registry;
use profile_pref::runstore::Stage;

/// Profile exploration, task-driven evaluation and preference-pair export.
#[derive(Debug, Parser)]
#[command(name = "profile-pref", version)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,
    /// Run directory name under the output root; derived from the config digest by default.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Redo a completed stage and reset the stages after it.
    #[arg(long, global = true)]
    force: bool,
    /// Replace every model with its declared mock.
    #[arg(long, global = true)]
    mock: bool,
    /// Use this seed for every seeded step.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads and in-flight requests per endpoint.
    #[arg(long, global = true, default_value_t = 4)]
    parallel: usize,
    /// Override the config's output root.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Ingest,
    Explore,
    Evaluate,
    Pairs,
    Export,
    ToyDpo,
    /// Print the condition table of a run.
    Report,
    /// Run every remaining stage, then print the report.
    RunAll,
    /// Write every prompt template to a directory.
    TemplatesDump {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write the synthetic MovieLens-style corpus.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// 198 users, equal target label counts.
        #[arg(long)]
        balanced: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    if cli.mock {
        cfg.force_mock()?;
    }
    if let Some(seed) = cli.seed_override {
        cfg.override_seeds(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let stage = match &cli.command {
        Command::TemplatesDump { dir } => {
            let written = dump_registry(dir).map_err(|e| PipelineError::Stage {
                stage: Stage::Ingest,
                message: e.to_string(),
            })?;
            for p in written {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Command::Fixture { out, balanced } => {
            let spec = if *balanced { FixtureSpec::balanced() } else { FixtureSpec::standard() };
            write_fixture(out, &spec).map_err(|e| PipelineError::Stage {
                stage: Stage::Ingest,
                message: e.to_string(),
            })?;
            println!("wrote {} users to {}", spec.users, out.display());
            return Ok(());
        }
        Command::Ingest => Some(Stage::Ingest),
        Command::Explore => Some(Stage::Explore),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Pairs => Some(Stage::Pairs),
        Command::Export => Some(Stage::Export),
        Command::ToyDpo => Some(Stage::ToyDpo),
        Command::Report | Command::RunAll => None,
    };
    let cfg = load_config(cli)?;
    let parallel = cli.parallel.max(1);
    let gate = Pipeline::gateway_for(&cfg, parallel);
    let pipeline = Pipeline::new(cfg, gate)?.with_force(cli.force);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .expect("thread pool");
    let mut store = pipeline.open_or_init(cli.run_id.as_deref())?;
    match (stage, &cli.command) {
        (Some(stage), _) => {
            let status = pool.install(|| pipeline.run_stage(&mut store, stage))?;
            let word = match status {
                StageStatus::Completed => "complete",
                StageStatus::AlreadyDone => "already complete",
                StageStatus::Skipped => "skipped",
            };
            println!("{stage}: {word} ({})", store.dir().display());
        }
        (None, Command::RunAll) => {
            pool.install(|| pipeline.run_all(&mut store))?;
            println!("run {} complete ({})", store.manifest().run_id, store.dir().display());
            print!("{}", pipeline.report(&store)?);
        }
        (None, _) => print!("{}", pipeline.report(&store)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
