//! Command-line front end shared by the `nlroi` binary and the tests.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{fit_scaling_exponent, run_bench, write_csv, BenchSize, MIN_REPS};
use crate::config::{parse_config, ConfigFile};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all_gradients, random_problem, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::operator::{nlroi_forward, nlroi_reference, NlRoiConfig, Scaling};
use crate::prng::Prng;
use crate::toy::{evaluate, train, ToyModel, Variant};
use crate::weights::{load_weights, save_weights};

/// Largest forward/reference difference `oracle-diff` accepts.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

const DEFAULT_WEIGHTS: &str = "weights.bin";

#[derive(Parser, Debug)]
#[command(
    name = "nlroi",
    version,
    about = "Non-local RoI attention: checks, training and benchmarks"
)]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; overrides `seed` from the configuration file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output file (weights for train/init, CSV for bench).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare analytic gradients with central differences.
    Gradcheck,
    /// Time forward/backward passes over a grid of RoI counts and emit CSV.
    Bench(BenchArgs),
    /// Train a model on the synthetic task and save its weights.
    Train(VariantArg),
    /// Load weights and print accuracy on fresh scenes.
    Eval(EvalArgs),
    /// Compare the operator against the loop-level reference.
    OracleDiff(OracleArgs),
    /// Write freshly initialized weights.
    Init(VariantArg),
}

#[derive(Args, Debug)]
struct VariantArg {
    #[arg(long, default_value = "nlroi", value_parser = ["baseline", "nlroi"])]
    variant: String,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated RoI counts; other sizes come from the configuration.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    n_values: Vec<usize>,
    #[arg(long, default_value_t = MIN_REPS)]
    reps: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Weights file to evaluate.
    #[arg(long, default_value = DEFAULT_WEIGHTS)]
    weights: PathBuf,
    /// Number of evaluation scenes.
    #[arg(long, default_value_t = 1000)]
    scenes: usize,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Number of random cases.
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

/// Runs the CLI with process stdio and returns the exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`cli_main`] with explicit output streams: data goes to `out`,
/// diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<output>"),
        source: e,
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let weights_out = || {
        cli.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WEIGHTS))
    };

    match cli.command {
        Command::Gradcheck => {
            let report =
                check_all_gradients(&cfg.nlroi(), cfg.n, seed, DEFAULT_STEP, DEFAULT_TOLERANCE)?;
            writeln!(out, "{report}").map_err(io_err)?;
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Bench(args) => {
            let grid: Vec<BenchSize> = args
                .n_values
                .iter()
                .map(|&n| BenchSize {
                    n,
                    d: cfg.d,
                    d_f: cfg.d_f,
                    d_g: cfg.d_g,
                    h: cfg.h,
                    w: cfg.w,
                })
                .collect();
            let records = run_bench(&grid, args.reps, seed)?;
            match &cli.out {
                Some(path) => {
                    let mut buf = Vec::new();
                    write_csv(&records, &mut buf).map_err(io_err)?;
                    std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
                }
                None => write_csv(&records, &mut *out).map_err(io_err)?,
            }
            if let Ok(slope) = fit_scaling_exponent(&records) {
                writeln!(err, "log-log slope of forward time vs n: {slope:.3}").map_err(io_err)?;
            }
            Ok(0)
        }
        Command::Train(v) => {
            let variant: Variant = v.variant.parse()?;
            let mut hyper = cfg.train();
            hyper.seed = seed;
            let mut write_failed = None;
            let (model, _) = train(variant, &cfg.nlroi(), &cfg.task(), &hyper, |step, loss| {
                if step % 100 == 0 {
                    if let Err(e) = writeln!(out, "step={step} loss={loss}") {
                        write_failed.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = write_failed {
                return Err(io_err(e));
            }
            let path = weights_out();
            save_weights(&path, &model.named_tensors())?;
            writeln!(
                err,
                "saved {} weights to {}",
                variant.name(),
                path.display()
            )
            .map_err(io_err)?;
            Ok(0)
        }
        Command::Eval(args) => {
            let tensors = load_weights(&args.weights)?;
            let model = ToyModel::from_named(&tensors, &cfg.nlroi(), cfg.k_classes)?;
            let acc = evaluate(&model, &cfg.task(), args.scenes, seed)?;
            writeln!(out, "ACCURACY {acc}").map_err(io_err)?;
            Ok(0)
        }
        Command::OracleDiff(args) => {
            let diff = match &cli.config {
                Some(_) => oracle_diff_fixed(&cfg.nlroi(), cfg.n, seed, args.cases)?,
                None => oracle_diff_random(seed, args.cases)?,
            };
            writeln!(
                out,
                "ORACLE_DIFF max_abs_diff={diff:e} cases={}",
                args.cases
            )
            .map_err(io_err)?;
            Ok(if diff < ORACLE_TOLERANCE { 0 } else { 1 })
        }
        Command::Init(v) => {
            let variant: Variant = v.variant.parse()?;
            let model = ToyModel::seeded(variant, &cfg.nlroi(), cfg.k_classes, seed)?;
            let path = weights_out();
            save_weights(&path, &model.named_tensors())?;
            writeln!(
                err,
                "wrote initial {} weights to {}",
                variant.name(),
                path.display()
            )
            .map_err(io_err)?;
            Ok(0)
        }
    }
}

/// A random operator configuration and RoI count: `N ∈ 1..=16`,
/// `D ∈ 4..=16`, `H, W ∈ 1..=5`, random scaling, and masking whenever
/// `N ≥ 2` allows it.
pub fn random_case(prng: &mut Prng) -> (NlRoiConfig, usize) {
    let n = 1 + prng.below(16);
    let d = 4 + prng.below(13);
    let mut config = NlRoiConfig {
        d,
        d_f: 1 + prng.below(d),
        d_mid: 1 + prng.below(d),
        d_g: 1 + prng.below(d),
        h: 1 + prng.below(5),
        w: 1 + prng.below(5),
        ..NlRoiConfig::default()
    };
    config.scaling = if prng.below(2) == 0 {
        Scaling::PerChannel
    } else {
        Scaling::FullFlatten
    };
    config.attend_to_self = n < 2 || prng.below(2) == 0;
    (config, n)
}

fn max_diff(config: &NlRoiConfig, n: usize, seed: u64) -> Result<f64> {
    let (x, params) = random_problem(config, n, seed);
    let (fast, _) = nlroi_forward(&x, &params, config)?;
    let slow = nlroi_reference(&x, &params, config)?;
    fast.max_abs_diff(&slow)
}

/// Largest `|forward − reference|` over `cases` random configurations.
pub fn oracle_diff_random(seed: u64, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..cases as u64 {
        let mut prng = Prng::derived(seed, i);
        let (config, n) = random_case(&mut prng);
        worst = worst.max(max_diff(&config, n, prng.next_u64())?);
    }
    Ok(worst)
}

/// Largest `|forward − reference|` over `cases` random inputs of one configuration.
pub fn oracle_diff_fixed(config: &NlRoiConfig, n: usize, seed: u64, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..cases as u64 {
        worst = worst.max(max_diff(config, n, Prng::derived(seed, i).next_u64())?);
    }
    Ok(worst)
}
