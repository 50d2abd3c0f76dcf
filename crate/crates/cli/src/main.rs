//! `ruas`: search, train, enhance and evaluate low-light enhancement models,
//! and run the ablation harnesses.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! failure (including a failed gradient check).

mod commands;
mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ruas::scene::WarmStart;
use ruas::task::Variant;
use ruas::{Error, Result};

#[derive(Parser)]
#[command(name = "ruas", version, about = "Retinex-inspired unrolling with architecture search for low-light enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides RUAS_SEED and the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "ruas-out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct DataArg {
    /// Data directory; overrides `data.dir` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
pub enum VariantArg {
    #[value(name = "ruas_s")]
    RuasS,
    #[value(name = "ruas")]
    Ruas,
    #[value(name = "ruas_a")]
    RuasA,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::RuasS => Variant::RuasS,
            VariantArg::Ruas => Variant::Ruas,
            VariantArg::RuasA => Variant::RuasA,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
pub enum WarmStartArg {
    Fixed,
    #[value(name = "no_rectify")]
    NoRectify,
    Rectify,
}

impl From<WarmStartArg> for WarmStart {
    fn from(w: WarmStartArg) -> WarmStart {
        match w {
            WarmStartArg::Fixed => WarmStart::Fixed,
            WarmStartArg::NoRectify => WarmStart::NoRectify,
            WarmStartArg::Rectify => WarmStart::Rectify,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Architecture search; writes alpha_final.json, history.csv, arch.dot.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// cooperative, independent or global.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Weight training of a discrete network; writes model.ckpt, curve.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// end_to_end or hierarchical.
        #[arg(long)]
        strategy: Option<String>,
        /// Searched logits (alpha_final.json) defining the architecture.
        #[arg(long)]
        alpha: Option<PathBuf>,
    },
    /// Enhances one PNG or every PNG of a directory into `out/{id}.png`.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "ruas")]
        variant: VariantArg,
        /// Also write per-stage t/u maps (and the noise map) to `out/{id}/`.
        #[arg(long)]
        dump_stages: bool,
        /// Overrides the checkpoint's warm-start mode.
        #[arg(long, value_enum)]
        warm_start: Option<WarmStartArg>,
    },
    /// Per-image PSNR/SSIM against references; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "ruas")]
        variant: VariantArg,
    },
    /// Finite-difference gradient suite; writes gradcheck.csv.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Trains one network per stage count; writes ablation.csv.
    AblateK {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated counts or an inclusive range such as `1..5`.
        #[arg(long, default_value = "1..5")]
        k_list: String,
        #[arg(long)]
        alpha: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ruas")]
        variant: VariantArg,
    },
    /// Runs all three search strategies on one seed; writes strategies.csv.
    CompareStrategies {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Trains every single-operator cell and the mixed supernet; writes
    /// fixed_op.csv.
    FixedOp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum, default_value = "ruas")]
        variant: VariantArg,
    },
    /// Writes a synthetic paired set (`low/`, `high/`, `split.txt`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = config::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 0.03)]
        noise_sigma: f64,
    },
}

/// Sends log records to stderr and `run.log` in the output directory.
struct Tee(Mutex<File>);

impl Write for &Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("log file lock").flush()
    }
}

fn init_logging(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("run.log");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let tee: &'static Tee = Box::leak(Box::new(Tee(Mutex::new(file))));
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(tee)))
        .try_init()
        .ok();
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io { .. } => 3,
        Error::Numeric(_) | Error::Domain(_) => 4,
        Error::Contract(_) => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    use commands::*;
    match cli.command {
        Command::Search { common, data, strategy } => {
            init_logging(&common.out)?;
            search(&common, &data, strategy.as_deref())
        }
        Command::Train { common, data, strategy, alpha } => {
            init_logging(&common.out)?;
            train(&common, &data, strategy.as_deref(), alpha.as_deref())
        }
        Command::Enhance { common, model, input, variant, dump_stages, warm_start } => {
            init_logging(&common.out)?;
            enhance(&common, &model, &input, variant.into(), dump_stages, warm_start.map(Into::into))
        }
        Command::Eval { common, data, model, variant } => {
            init_logging(&common.out)?;
            eval(&common, &data, &model, variant.into())
        }
        Command::Gradcheck { common } => {
            init_logging(&common.out)?;
            gradcheck(&common)
        }
        Command::AblateK { common, data, k_list, alpha, variant } => {
            init_logging(&common.out)?;
            ablate_k(&common, &data, &k_list, alpha.as_deref(), variant.into())
        }
        Command::CompareStrategies { common, data } => {
            init_logging(&common.out)?;
            compare_strategies(&common, &data)
        }
        Command::FixedOp { common, data, variant } => {
            init_logging(&common.out)?;
            fixed_op(&common, &data, variant.into())
        }
        Command::Synth { out, count, size, seed, noise_sigma } => {
            init_logging(&out)?;
            synth(&out, count, size, seed, noise_sigma)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
