use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand as ClapSubcommand};
use marcus_nls_cli::{
    commands, parse_config, ArtifactDir, ConfigError, ExperimentConfig, Subcommand,
};
use serde::Serialize;

/// Split-step NLS solvers with Marcus jump noise, and their large-deviation experiments.
///
/// Precedence for seed, workers and output directory: command-line flag, then
/// environment variable, then config file, then built-in default.
#[derive(Debug, Parser)]
#[command(name = "marcus-nls", version)]
struct Cli {
    /// TOML experiment config; built-in defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for the artifacts and the manifest.
    #[arg(long, global = true, env = "MARCUS_NLS_OUT", default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides the config value.
    #[arg(long, global = true, env = "MARCUS_NLS_SEED")]
    seed: Option<u64>,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "MARCUS_NLS_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, ClapSubcommand)]
enum Command {
    /// Stochastic trajectory at the first configured noise level.
    Simulate {
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Skeleton trajectory for the configured control.
    Skeleton,
    /// Yosida-regularized skeleton distances over the configured mu list.
    Yosida,
    /// Controlled stochastic solutions against the skeleton.
    Convergence {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Skeleton distances along a control sequence converging to the configured control.
    Continuity,
    /// Minimum-cost control reaching the terminal-distance level.
    Instanton {
        #[arg(long)]
        level: Option<f64>,
    },
    /// Monte Carlo estimate of the terminal-distance exceedance probability.
    #[command(name = "rare-event")]
    RareEvent {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Piecewise-linear approximations of the linear single-jump fixture.
    #[command(name = "wongzakai")]
    WongZakai,
    /// Conservation suite and closed-form checks.
    Check,
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    status: &'static str,
    subcommand: &'a str,
    message: String,
    causes: Vec<String>,
    violations: Vec<marcus_nls_cli::Violation>,
}

fn apply(cfg: &mut ExperimentConfig, command: &Command) -> Subcommand {
    match *command {
        Command::Simulate { eps } => {
            if let Some(e) = eps {
                cfg.experiment.eps = vec![e];
            }
            Subcommand::Simulate
        }
        Command::Skeleton => Subcommand::Skeleton,
        Command::Yosida => Subcommand::Yosida,
        Command::Convergence { samples } => {
            if let Some(n) = samples {
                cfg.experiment.samples = n;
            }
            Subcommand::Convergence
        }
        Command::Continuity => Subcommand::Continuity,
        Command::Instanton { level } => {
            if let Some(a) = level {
                cfg.experiment.level = a;
            }
            Subcommand::Instanton
        }
        Command::RareEvent { samples, level } => {
            if let Some(n) = samples {
                cfg.experiment.rare_event_samples = n;
            }
            if let Some(a) = level {
                cfg.experiment.level = a;
            }
            Subcommand::RareEvent
        }
        Command::WongZakai => Subcommand::WongZakai,
        Command::Check => Subcommand::Check,
    }
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, Subcommand), ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cmd = apply(&mut cfg, &cli.command);
    let violations = cfg.validate();
    if violations.is_empty() {
        Ok((cfg, cmd))
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

fn write_failure(out: &std::path::Path, record: &FailureRecord) {
    if std::fs::create_dir_all(out).is_ok() {
        if let Ok(text) = serde_json::to_string_pretty(record) {
            let _ = std::fs::write(out.join("failure.json"), text + "\n");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let name = apply(&mut ExperimentConfig::default(), &cli.command).name();

    let (cfg, cmd) = match load(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            let violations = match &e {
                ConfigError::Invalid(v) => v.clone(),
                _ => Vec::new(),
            };
            write_failure(
                &cli.out,
                &FailureRecord {
                    status: "invalid_config",
                    subcommand: name,
                    message: e.to_string(),
                    causes: Vec::new(),
                    violations,
                },
            );
            return ExitCode::from(2);
        }
    };

    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
        {
            eprintln!("error: cannot start {w} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let workers = rayon::current_num_threads();

    let mut out = match ArtifactDir::create(&cli.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = commands::run(cmd, &cfg, &mut out);
    for c in &out.checks {
        println!(
            "[{}] {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let (status, code) = match &result {
        Ok(()) => match commands::verdict(&out) {
            Ok(()) => ("ok", ExitCode::SUCCESS),
            Err(e) => {
                eprintln!("error: {e}");
                ("checks_failed", ExitCode::from(1))
            }
        },
        Err(e) => {
            eprintln!("error: {e:#}");
            write_failure(
                out.root(),
                &FailureRecord {
                    status: "error",
                    subcommand: name,
                    message: e.to_string(),
                    causes: e.chain().skip(1).map(|c| c.to_string()).collect(),
                    violations: Vec::new(),
                },
            );
            ("error", ExitCode::from(2))
        }
    };
    let root = out.root().to_path_buf();
    if let Err(e) = out.finish(
        name,
        cfg.seed,
        workers,
        start.elapsed().as_secs_f64(),
        status,
    ) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    println!("{status}: artifacts in {}", root.display());
    code
}
