use std::path::PathBuf;
use std::process::ExitCode;

use benign_attn::experiment::{
    self, parse_suites, run_checks, run_to_dir, sweep_to_dir, ExperimentConfig, OutputFormat, SweepSpec, EXIT_CHECK_FAILED,
    EXIT_DIVERGED, EXIT_OK,
};
use benign_attn::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "benign-attn", version, about = "Token selection under label noise in one-layer attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write trace, summary and config echo.
    Run {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run a (d, mu_norm, seed) grid and write heatmap.csv.
    Sweep {
        /// Sweep spec JSON.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run check suites and print the report as JSON.
    Check {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated suites (gradients, update, softmax, goodrun, init,
        /// etf, glinear, tokens) or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Also write report.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the predicted regime.
    Classify {
        #[command(flatten)]
        source: Source,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config: harmful, benign or not-overfitting.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => Err(Error::config("config", "missing")),
        }
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Error> {
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(k) = self.log_every {
            cfg.log_every = k;
        }
        cfg.validate()
    }
}

fn execute(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Run { source, overrides, seed, out_dir, format } => {
            let mut cfg = source.load()?;
            overrides.apply(&mut cfg)?;
            let format = match format {
                Format::Csv => OutputFormat::Csv,
                Format::Json => OutputFormat::Json,
            };
            let art = run_to_dir(&cfg, seed, &out_dir, format)?;
            println!("{}", art.trace_path.display());
            println!("{}", art.summary_path.display());
            if let Some(step) = art.diverged_at {
                eprintln!("diverged at step {step}; partial trace kept");
                return Ok(EXIT_DIVERGED);
            }
            Ok(EXIT_OK)
        }
        Command::Sweep { config, overrides, threads, out_dir } => {
            let mut spec = SweepSpec::load(&config)?;
            overrides.apply(&mut spec.base)?;
            let (path, cells) = sweep_to_dir(&spec, threads, &out_dir)?;
            println!("{}", path.display());
            let bad = cells.iter().filter(|c| c.status != "ok").count();
            if bad > 0 {
                eprintln!("{bad} of {} cells did not finish cleanly", cells.len());
            }
            Ok(EXIT_OK)
        }
        Command::Check { source, overrides, seed, suite, out_dir } => {
            let suites = parse_suites(&suite)?;
            let mut cfg = source.load()?;
            overrides.apply(&mut cfg)?;
            let report = run_checks(&cfg, seed, &suites)?;
            let text = serde_json::to_string_pretty(&report.to_json())?;
            println!("{text}");
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.json"), text + "\n")?;
            }
            if report.all_pass() {
                Ok(EXIT_OK)
            } else {
                eprintln!("failing checks: {}", report.failing().join(", "));
                Ok(EXIT_CHECK_FAILED)
            }
        }
        Command::Classify { source } => {
            let cfg = source.load()?;
            println!("{}", experiment::classify(&cfg)?.as_str());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = execute(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        experiment::exit_code(&e)
    });
    ExitCode::from(code as u8)
}
