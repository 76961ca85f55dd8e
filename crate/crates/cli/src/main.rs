use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curlgauge::experiment::{run, Command, ExperimentConfig, ModelSource};
use curlgauge::report::{write_artifacts, OutputFormat};
use curlgauge::Error;

/// Exact curl, total-correlation and order-error diagnostics for small
/// conditional models.
#[derive(Parser, Debug)]
#[command(name = "curlgauge", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Local curl, ECircAbs and per-pair order-swap KL.
    CurlScan(Common),
    /// Adjacent-swap decomposition of the gap between two orders.
    OrderGap(Common),
    /// Conditional total correlation and the independent-parallel gap.
    Tc(Common),
    /// Order cross-entropy profiles, rankings and strata.
    OrderError(Common),
    /// Operator commutators between position pairs.
    Commutator(Common),
    /// Parallel-decoding stress test over schedulers and widths.
    Stress(Common),
    /// Generate a synthetic joint and write it as a model file.
    SynthGen(Common),
    /// Train a tabular oracle and write it as a model file.
    Train(Common),
    /// Exact order-consistency check of every context block.
    Consistency(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    #[value(name = "json+csv")]
    JsonCsv,
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::CurlScan(c) => (Command::CurlScan, c),
            Sub::OrderGap(c) => (Command::OrderGap, c),
            Sub::Tc(c) => (Command::Tc, c),
            Sub::OrderError(c) => (Command::OrderError, c),
            Sub::Commutator(c) => (Command::Commutator, c),
            Sub::Stress(c) => (Command::Stress, c),
            Sub::SynthGen(c) => (Command::SynthGen, c),
            Sub::Train(c) => (Command::Train, c),
            Sub::Consistency(c) => (Command::Consistency, c),
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let ModelSource::File { path: model } = &mut config.model {
        if model.is_relative() {
            if let Some(dir) = path.parent() {
                *model = dir.join(&*model);
            }
        }
    }
    Ok(config)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("CURLGAUGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CURLGAUGE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn execute(command: Command, args: Common) -> Result<(), Error> {
    configure_threads()?;
    let config = load_config(&args.config, args.seed)?;
    let out = args.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let format = match args.format {
        Format::Json => OutputFormat::Json,
        Format::JsonCsv => OutputFormat::JsonCsv,
    };
    let result = run(&config, command)?;
    let written = write_artifacts(&out, &result.report, result.model_file.as_ref(), format)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = cli.command.split();
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
