use clap::{Args, Parser, Subcommand};
use metaref_cli::config::{split_methods, DataSource, ExperimentConfig};
use metaref_cli::pipeline::{self, Layout};
use metaref_cli::CliError;
use metaref_core::geodata::{BiasProfile, ProblemKind};
use std::path::PathBuf;
use std::process::ExitCode;

/// Fairness-aware meta-learning experiments on spatial data.
#[derive(Parser, Debug)]
#[command(name = "metaref", version)]
struct Cli {
    /// Experiment configuration file (flat key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for evaluate.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(GenData),
    /// Split locations and sample the frozen evaluation tasks.
    GenTasks,
    /// Train each method and write checkpoints and logs.
    Train(MethodArgs),
    /// Fine-tune and score every method on the frozen tasks.
    Evaluate(MethodArgs),
    /// Build comparison matrices and a summary from report CSVs.
    Compare {
        /// Report CSVs; defaults to the evaluate output.
        reports: Vec<PathBuf>,
    },
    /// Print the effective configuration as a config file.
    ShowConfig,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    locations: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    /// uniform, linear-noise or drift.
    #[arg(long)]
    profile: Option<String>,
    /// regression or classification.
    #[arg(long)]
    kind: Option<ProblemKind>,
}

#[derive(Args, Debug)]
struct MethodArgs {
    /// Comma-separated method list; overrides the configuration.
    #[arg(long)]
    methods: Option<String>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    match &cli.command {
        Command::GenData(g) => {
            if let DataSource::Synthetic(spec) = &mut cfg.data {
                spec.n_locations = g.locations.unwrap_or(spec.n_locations);
                spec.points_per_location = g.points.unwrap_or(spec.points_per_location);
                spec.feature_dim = g.features.unwrap_or(spec.feature_dim);
                spec.kind = g.kind.unwrap_or(spec.kind);
                if let Some(name) = &g.profile {
                    spec.profile = BiasProfile::named(name).map_err(|e| CliError::Usage(e.to_string()))?;
                }
            }
        }
        Command::Train(m) | Command::Evaluate(m) => {
            if let Some(list) = &m.methods {
                cfg.methods = split_methods(list);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out or `out` in --config)".into()))?;
    let layout = Layout::new(out);
    match &cli.command {
        Command::GenData(_) => pipeline::gen_data(&cfg, &layout, cli.force).map(|_| ()),
        Command::GenTasks => pipeline::gen_tasks(&cfg, &layout, cli.force),
        Command::Train(_) => pipeline::train_all(&cfg, &layout, &cfg.methods, cli.force),
        Command::Evaluate(_) => pipeline::evaluate_all(&cfg, &layout, &cfg.methods, cli.threads, cli.force).map(|_| ()),
        Command::Compare { reports } => {
            let inputs = if reports.is_empty() { vec![layout.task_reports()] } else { reports.clone() };
            let cmp = pipeline::compare(&layout, &inputs, cli.force)?;
            for s in &cmp.summaries {
                println!("{:<10} tasks {:>4}  quality {:.6}  LF {:.6}  ALF {:.6}", s.method, s.tasks, s.quality, s.lf, s.alf);
            }
            Ok(())
        }
        Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
