//! Experiment harness for quantized adaptive subgradient training.
//!
//! Subcommands: `train` (run the round engine, stream JSON-lines metrics),
//! `quantcheck` (certify the threshold quantizer against the brute-force
//! oracle), `audit` (replay a metrics trace and check the norm inequalities,
//! regret bound, and decay slope), `gen-synth` (write a synthetic LIBSVM
//! dataset).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qsubgrad::data::{load_libsvm, save_libsvm, synth_sparse_dataset, Dataset};
use qsubgrad::diagnostics::{audit, quantizer_check, AuditOptions};
use qsubgrad::engine::{full_precision_reference, Engine, EngineConfig, RoundMetrics};
use qsubgrad::optimizer::{Method, OptimizerConfig};
use qsubgrad::quantize::QuantizerKind;

#[derive(Parser)]
#[command(
    name = "qsubgrad",
    version,
    about = "Communication-efficient sparse model training with quantized adaptive subgradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment and stream per-round metrics.
    Train(Box<TrainArgs>),
    /// Certify the exact threshold quantizer against the brute-force oracle.
    Quantcheck(QuantcheckArgs),
    /// Replay a metrics trace and check inequalities, regret, and decay.
    Audit(AuditArgs),
    /// Generate a synthetic sparse dataset in LIBSVM format.
    GenSynth(GenSynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    ProxGd,
    Cmd,
    Rda,
    Qcmd,
    Qrda,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::ProxGd => Method::ProxGd,
            MethodArg::Cmd => Method::Cmd,
            MethodArg::Rda => Method::Rda,
            MethodArg::Qcmd => Method::Qcmd,
            MethodArg::Qrda => Method::Qrda,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantizerArg {
    TernaryStochastic,
    ThresholdExact,
    ThresholdApprox,
    Identity,
}

impl From<QuantizerArg> for QuantizerKind {
    fn from(q: QuantizerArg) -> Self {
        match q {
            QuantizerArg::TernaryStochastic => QuantizerKind::TernaryStochastic,
            QuantizerArg::ThresholdExact => QuantizerKind::ThresholdExact,
            QuantizerArg::ThresholdApprox => QuantizerKind::ThresholdApprox,
            QuantizerArg::Identity => QuantizerKind::Identity,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// LIBSVM training file.
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    dataset: Option<PathBuf>,
    /// Synthetic spec `n=4000,d=500,k=25[,noise=0.02][,ntest=1000][,seed=1]`.
    #[arg(long)]
    synth: Option<String>,
    /// LIBSVM held-out file (only with --dataset).
    #[arg(long, requires = "dataset")]
    test_dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Quantizer applied at both the worker and server stages.
    #[arg(long, value_enum, default_value = "identity")]
    quantizer: QuantizerArg,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = 20)]
    batch_per_worker: usize,
    #[arg(long)]
    rounds: u64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-8)]
    delta: f64,
    #[arg(long, env = "QSUBGRAD_SEED", default_value_t = 42)]
    seed: u64,
    /// Mark the run for lagged-inequality auditing (you must pick delta >= max ‖q_t‖∞).
    #[arg(long)]
    strict_qrda_delta: bool,
    /// Do not bootstrap round 1 with a full indicator.
    #[arg(long)]
    no_bootstrap_indicator: bool,
    /// Evaluate held-out accuracy every N rounds (0 = only in the summary).
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    /// First train a full-precision reference 10x longer on the same data,
    /// then record per-round regret against its final iterate.
    #[arg(long)]
    with_regret_reference: bool,
    /// Dump every wire message under this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Emit a flat CSV projection instead of JSON lines.
    #[arg(long)]
    csv: bool,
    /// Output file (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct QuantcheckArgs {
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    /// Vector dimensions are sampled from 1..=max-dim (oracle cap: 12).
    #[arg(long, default_value_t = 12)]
    max_dim: usize,
    /// Stochastic realizations per trial for the dominance check.
    #[arg(long, default_value_t = 3)]
    stochastic_draws: u32,
    #[arg(long, env = "QSUBGRAD_SEED", default_value_t = 42)]
    seed: u64,
    /// Relative tolerance for optimality and dominance comparisons.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

#[derive(Args)]
struct AuditArgs {
    /// JSON-lines trace produced by `train`.
    #[arg(long)]
    input: PathBuf,
    /// Relative slack for floating-point inequality checks.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Check the lagged inequality even if the run was not marked strict.
    #[arg(long)]
    strict: bool,
    /// Skip this many leading rounds in the regret decay fit.
    #[arg(long, default_value_t = 10)]
    fit_min_round: u64,
    /// Fail unless the decay slope is at least this (e.g. -0.8).
    #[arg(long)]
    slope_min: Option<f64>,
    /// Fail unless the decay slope is at most this (e.g. -0.3).
    #[arg(long)]
    slope_max: Option<f64>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    k_true: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, env = "QSUBGRAD_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the planted separator as a JSON array.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
}

/// Resolved experiment configuration, echoed verbatim as the first output
/// line so every trace is self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExperimentConfig {
    dataset: String,
    test_dataset: Option<String>,
    method: Method,
    quantizer: QuantizerKind,
    workers: usize,
    batch_per_worker: usize,
    rounds: u64,
    eta: f64,
    lambda: f64,
    delta: f64,
    seed: u64,
    strict_qrda_delta: bool,
    bootstrap_full_indicator: bool,
    eval_every: u64,
    with_regret_reference: bool,
    dim: usize,
    train_examples: usize,
    test_examples: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(*args),
        Command::Quantcheck(args) => cmd_quantcheck(args),
        Command::Audit(args) => cmd_audit(args),
        Command::GenSynth(args) => cmd_gen_synth(args),
    }
}

/// `n=..,d=..,k=..[,noise=..][,ntest=..][,seed=..]`
fn parse_synth_spec(spec: &str) -> Result<(usize, usize, usize, f64, usize, u64)> {
    let (mut n, mut d, mut k) = (None, None, None);
    let (mut noise, mut ntest, mut seed) = (0.0, 0usize, 1u64);
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("bad synth field {part:?} (expected key=value)"))?;
        match key.trim() {
            "n" => n = Some(value.parse()?),
            "d" => d = Some(value.parse()?),
            "k" => k = Some(value.parse()?),
            "noise" => noise = value.parse()?,
            "ntest" => ntest = value.parse()?,
            "seed" => seed = value.parse()?,
            other => bail!("unknown synth field {other:?}"),
        }
    }
    let n = n.context("synth spec needs n=")?;
    let d = d.context("synth spec needs d=")?;
    let k = k.context("synth spec needs k=")?;
    Ok((n, d, k, noise, ntest, seed))
}

fn load_datasets(args: &TrainArgs) -> Result<(Dataset, Option<Dataset>, String)> {
    if let Some(spec) = &args.synth {
        let (n, d, k, noise, ntest, seed) = parse_synth_spec(spec)?;
        // One generation pass, then split: train and held-out must share the
        // planted separator.
        let (full, _) = synth_sparse_dataset(n + ntest, d, k, noise, seed)?;
        let (train, test) = if ntest > 0 {
            let (train, test) = full.split_at(n)?;
            (train, Some(test))
        } else {
            (full, None)
        };
        return Ok((train, test, format!("synth:{spec}")));
    }
    let path = args
        .dataset
        .as_ref()
        .expect("clap enforces dataset xor synth");
    let train = load_libsvm(path).with_context(|| format!("loading {}", path.display()))?;
    let test = match &args.test_dataset {
        Some(p) => Some(load_libsvm(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    Ok((train, test, path.display().to_string()))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let (train, test, dataset_label) = load_datasets(&args)?;

    let opt = OptimizerConfig {
        method: args.method.into(),
        eta: args.eta,
        lambda: args.lambda,
        delta: args.delta,
    };
    let mut engine_cfg = EngineConfig::new(opt, args.quantizer.into(), args.workers);
    engine_cfg.batch_per_worker = args.batch_per_worker;
    engine_cfg.seed = args.seed;
    engine_cfg.bootstrap_full_indicator = !args.no_bootstrap_indicator;
    engine_cfg.eval_every = args.eval_every;
    engine_cfg.trace_dir = args.trace_dir.clone();

    let config = ExperimentConfig {
        dataset: dataset_label,
        test_dataset: args.test_dataset.as_ref().map(|p| p.display().to_string()),
        method: opt.method,
        quantizer: engine_cfg.quantizer,
        workers: args.workers,
        batch_per_worker: args.batch_per_worker,
        rounds: args.rounds,
        eta: args.eta,
        lambda: args.lambda,
        delta: args.delta,
        seed: args.seed,
        strict_qrda_delta: args.strict_qrda_delta,
        bootstrap_full_indicator: engine_cfg.bootstrap_full_indicator,
        eval_every: args.eval_every,
        with_regret_reference: args.with_regret_reference,
        dim: 0, // resolved below
        train_examples: train.len(),
        test_examples: test.as_ref().map_or(0, Dataset::len),
    };

    let reference = if args.with_regret_reference {
        Some(full_precision_reference(
            &train,
            &engine_cfg,
            args.rounds.saturating_mul(10).max(1),
        )?)
    } else {
        None
    };

    let mut engine = Engine::new(train, test, engine_cfg)?;
    let config = ExperimentConfig {
        dim: engine.dim(),
        ..config
    };
    if let Some(x_star) = reference {
        engine.set_reference(x_star)?;
    }

    let mut out: BufWriter<Box<dyn Write>> = BufWriter::new(match &args.output {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(std::io::stdout()),
    });

    if args.csv {
        writeln!(out, "# config {}", serde_json::to_string(&config)?)?;
        writeln!(out, "{}", csv_header())?;
        let mut io_err = None;
        let summary = engine.run(args.rounds, |m| {
            if io_err.is_none() {
                io_err = writeln!(out, "{}", csv_row(m)).err();
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        writeln!(out, "# summary {}", serde_json::to_string(&summary)?)?;
    } else {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&serde_json::json!({ "config": config }))?
        )?;
        let mut io_err = None;
        let summary = engine.run(args.rounds, |m| {
            if io_err.is_none() {
                io_err = serde_json::to_writer(&mut out, m)
                    .map_err(std::io::Error::from)
                    .and_then(|()| writeln!(out))
                    .err();
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        writeln!(
            out,
            "{}",
            serde_json::to_string(&serde_json::json!({ "summary": summary }))?
        )?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn csv_header() -> &'static str {
    "round,train_loss,bits_up,bits_down,k_syn,mse_error,psi_error,mse_single,sparsity_pct,\
     accuracy_pct,obj_current,obj_next,obj_ref,dist_inf,dual_norm_sq,dual_norm_sq_lagged,col_norm_sum,\
     g_inf,q_inf"
}

fn csv_row(m: &RoundMetrics) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.round,
        m.train_loss,
        m.bits_up,
        m.bits_down,
        m.k_syn,
        m.mse_error,
        m.psi_error,
        opt(m.mse_single),
        m.sparsity_pct,
        opt(m.accuracy_pct),
        m.obj_current,
        m.obj_next,
        opt(m.obj_ref),
        opt(m.dist_inf),
        m.dual_norm_sq,
        m.dual_norm_sq_lagged,
        m.col_norm_sum,
        m.g_inf,
        m.q_inf
    )
}

fn cmd_quantcheck(args: QuantcheckArgs) -> Result<ExitCode> {
    let report = quantizer_check(
        args.trials,
        args.max_dim,
        args.stochastic_draws,
        args.seed,
        args.tol,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.clean() {
        println!(
            "quantcheck: PASS ({} trials, max oracle gap {:.3e})",
            report.trials, report.max_oracle_rel_gap
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!("quantcheck: FAIL");
        Ok(ExitCode::FAILURE)
    }
}

/// Parsed `train` output: config header plus round records.
fn read_trace(path: &PathBuf) -> Result<(ExperimentConfig, Vec<RoundMetrics>)> {
    let text = std::fs::read_to_string(path)?;
    let mut config = None;
    let mut rounds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("line {} is not JSON", i + 1))?;
        if let Some(c) = value.get("config") {
            config = Some(serde_json::from_value(c.clone()).context("bad config header")?);
        } else if value.get("summary").is_some() {
            // end-of-run aggregate; the audit recomputes everything
        } else {
            rounds.push(serde_json::from_value(value).with_context(|| {
                format!(
                    "line {} is neither config, summary, nor round metrics",
                    i + 1
                )
            })?);
        }
    }
    let config: ExperimentConfig = config.context("trace has no config header")?;
    Ok((config, rounds))
}

fn cmd_audit(args: AuditArgs) -> Result<ExitCode> {
    let (config, rounds) = read_trace(&args.input)?;
    if rounds.is_empty() {
        bail!("trace {} contains no round records", args.input.display());
    }
    let mut opts = AuditOptions::new(config.eta, config.delta, config.dim);
    opts.ineq_tol = args.tol;
    opts.fit_min_round = args.fit_min_round;
    opts.check_lagged = args.strict || config.strict_qrda_delta;
    opts.check_bound =
        config.quantizer == QuantizerKind::TernaryStochastic && config.with_regret_reference;

    let report = audit(&rounds, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let mut failed = false;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "colnorm-inequality: {} ({} violations over {} rounds, max ratio {:.6})",
        verdict(report.colnorm_violations == 0),
        report.colnorm_violations,
        report.rounds,
        report.colnorm_max_ratio
    );
    failed |= report.colnorm_violations > 0;

    if report.lagged_checked {
        let precondition = report.delta_covers_q_inf.unwrap_or(false);
        println!(
            "lagged-inequality: {} ({} violations, max ratio {:.6}, delta covers ‖q‖∞: {})",
            verdict(report.lagged_violations == 0 && precondition),
            report.lagged_violations,
            report.lagged_max_ratio,
            precondition
        );
        failed |= report.lagged_violations > 0 || !precondition;
    }

    if report.bound_checked {
        println!(
            "regret-bound: {} ({} violations, final regret {:.6e} vs bound {:.6e})",
            verdict(report.bound_violations == 0),
            report.bound_violations,
            report.final_avg_regret.unwrap_or(f64::NAN),
            report.regret_bound_final.unwrap_or(f64::NAN)
        );
        failed |= report.bound_violations > 0;
    }

    match report.regret_slope {
        Some(slope) => {
            let min_ok = args.slope_min.is_none_or(|m| slope >= m);
            let max_ok = args.slope_max.is_none_or(|m| slope <= m);
            if args.slope_min.is_some() || args.slope_max.is_some() {
                println!("regret-slope: {} ({slope:.4})", verdict(min_ok && max_ok));
                failed |= !(min_ok && max_ok);
            } else {
                println!("regret-slope: {slope:.4}");
            }
        }
        None => {
            println!("regret-slope: n/a (no positive-regret prefixes recorded)");
            if args.slope_min.is_some() || args.slope_max.is_some() {
                failed = true;
            }
        }
    }

    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<ExitCode> {
    let (dataset, x_true) =
        synth_sparse_dataset(args.n, args.d, args.k_true, args.noise, args.seed)?;
    save_libsvm(&dataset, &args.out)?;
    if let Some(path) = &args.ground_truth {
        std::fs::write(path, serde_json::to_string(&x_true)?)?;
    }
    eprintln!(
        "wrote {} examples (dim {}) to {}",
        dataset.len(),
        dataset.dim(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
