//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or input
//! error, 3 I/O error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{apply_override, RunConfig, Verbosity};
use crate::error::LabError;
use crate::math::ClipFns;
use crate::policy::PolicyParams;
use crate::trainer::{dataset, evaluate_pass_at_k, steps_to_threshold, train_with, StepMetrics};
use crate::verify::{mutated_clip_up, run_all, write_report, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "grpo-lab", version, about = "Desk-scale GRPO, BiCC and RCC experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write metrics, checkpoints and the resolved config.
    Train(TrainArgs),
    /// Run the oracle-backed self checks and write a report.
    Verify(VerifyArgs),
    /// Train once per value of a config key.
    Sweep(SweepArgs),
    /// Pass@k of a checkpoint on the run's query pool.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `variant.bicc-enabled=true`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides `output-dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mutation {
    ClipUp,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "verify-report.txt")]
    pub report: PathBuf,
    #[arg(long, default_value_t = VerifyOptions::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = VerifyOptions::default().variance_trials)]
    pub variance_trials: usize,
    /// Inject a known-bad implementation to confirm the suite catches it.
    #[arg(long, hide = true, value_enum)]
    pub mutate: Option<Mutation>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dotted config key to vary, e.g. `context.ratio`.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values, each read as JSON when possible.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples per query; defaults to `eval.samples`.
    #[arg(long)]
    pub samples: Option<u64>,
    /// Comma-separated k values; defaults to `eval.ks`.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<u64>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        let code = match e {
            LabError::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_all(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_mean_reward: f64,
    pub pass_at_1: f64,
    pub steps_to_08: Option<usize>,
}

/// Trains and writes the run directory.
pub fn execute_run(cfg: &RunConfig) -> Result<RunSummary, Failure> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_failure(&ckpt_dir, e))?;
    write_all(&dir.join("resolved-config.json"), &(cfg.to_json_pretty() + "\n"))?;

    let metrics_path = dir.join("metrics.jsonl");
    let summary_path = dir.join("summary.csv");
    let timings_path = dir.join("timings.csv");
    let mut metrics_w = create(&metrics_path)?;
    let mut summary_w = create(&summary_path)?;
    let mut timings_w = create(&timings_path)?;
    writeln!(summary_w, "step,mean-reward,cov,clip-fraction,grad-norm").map_err(|e| io_failure(&summary_path, e))?;
    writeln!(timings_w, "step,wall-clock-ms").map_err(|e| io_failure(&timings_path, e))?;

    let interval = cfg.train.eval_interval;
    let verbosity = cfg.verbosity;
    let outcome = train_with(&cfg.train, |m: &StepMetrics, params: &PolicyParams| {
        let line = serde_json::to_string(m).map_err(std::io::Error::from)?;
        writeln!(metrics_w, "{line}")?;
        writeln!(summary_w, "{},{},{},{},{}", m.step, m.mean_reward, m.cov, m.clip_fraction, m.grad_norm)?;
        writeln!(timings_w, "{},{:.3}", m.step, m.wall_clock_ms)?;
        if (m.step + 1).is_multiple_of(interval) {
            let path = ckpt_dir.join(format!("step-{:06}.params", m.step + 1));
            params.save(BufWriter::new(File::create(path)?))?;
        }
        let report = match verbosity {
            Verbosity::Quiet => false,
            Verbosity::Normal => m.pass_at_k.is_some(),
            Verbosity::Verbose => true,
        };
        if report {
            eprintln!(
                "step {:>5}  reward {:.3}  cov {:+.4}  clip {:.3}  grad {:.3}",
                m.step, m.mean_reward, m.cov, m.clip_fraction, m.grad_norm
            );
        }
        Ok(())
    })?;
    for (w, p) in [(&mut metrics_w, &metrics_path), (&mut summary_w, &summary_path), (&mut timings_w, &timings_path)] {
        w.flush().map_err(|e| io_failure(p, e))?;
    }
    let final_path = ckpt_dir.join("final.params");
    outcome.params.save(create(&final_path)?)?;

    let env = cfg.train.environment();
    let table = evaluate_pass_at_k(&outcome.params, &env, &dataset(&cfg.train), cfg.train.eval.samples, &[1], cfg.train.seed)?;
    let tail = outcome.metrics.len().min(10);
    let final_mean_reward = if tail == 0 {
        0.0
    } else {
        outcome.metrics[outcome.metrics.len() - tail..].iter().map(|m| m.mean_reward).sum::<f64>() / tail as f64
    };
    Ok(RunSummary { final_mean_reward, pass_at_1: table.rows[0].value, steps_to_08: steps_to_threshold(&outcome.metrics, 0.8, 10) })
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.config)?;
    let s = execute_run(&cfg)?;
    if cfg.verbosity != Verbosity::Quiet {
        eprintln!("done: final mean reward {:.4}, pass@1 {:.4}, output in {}", s.final_mean_reward, s.pass_at_1, cfg.output_dir.display());
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let mut opts = VerifyOptions { seed: args.seed, variance_trials: args.variance_trials, ..VerifyOptions::default() };
    if args.mutate == Some(Mutation::ClipUp) {
        opts.clips = ClipFns { up: mutated_clip_up, ..ClipFns::default() };
    }
    let results = run_all(&opts);
    let mut w = create(&args.report)?;
    write_report(&results, &mut w).map_err(|e| io_failure(&args.report, e))?;
    w.flush().map_err(|e| io_failure(&args.report, e))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed; report in {}", results.len(), args.report.display());
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, message: format!("failed checks: {}", failed.join(", ")) })
    }
}

/// Directory-safe label for a sweep value.
fn value_label(raw: &str) -> String {
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    if args.values.is_empty() {
        return Err(Failure { code: EXIT_CONFIG, message: "sweep needs at least one value".into() });
    }
    let base = resolve(&args.config)?;
    // Check the axis and every value before any run starts.
    let mut runs = Vec::with_capacity(args.values.len());
    for raw in &args.values {
        let mut value = base.to_value();
        apply_override(&mut value, &format!("{}={raw}", args.axis))?;
        let mut cfg = RunConfig::from_value(value)?;
        cfg.validate()?;
        cfg.output_dir = base.output_dir.join(format!("{}={}", value_label(&args.axis), value_label(raw)));
        runs.push((raw.clone(), cfg));
    }
    fs::create_dir_all(&base.output_dir).map_err(|e| io_failure(&base.output_dir, e))?;
    let summary_path = base.output_dir.join("sweep-summary.csv");
    let mut w = create(&summary_path)?;
    writeln!(w, "axis,value,final-mean-reward,pass-at-1,steps-to-0.8").map_err(|e| io_failure(&summary_path, e))?;
    for (raw, cfg) in &runs {
        let s = execute_run(cfg)?;
        let steps = s.steps_to_08.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", args.axis, raw.replace(',', ";"), s.final_mean_reward, s.pass_at_1, steps)
            .map_err(|e| io_failure(&summary_path, e))?;
        if base.verbosity != Verbosity::Quiet {
            eprintln!("{}={raw}: final mean reward {:.4}, pass@1 {:.4}", args.axis, s.final_mean_reward, s.pass_at_1);
        }
    }
    w.flush().map_err(|e| io_failure(&summary_path, e))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.config)?;
    let file = File::open(&args.checkpoint).map_err(|e| io_failure(&args.checkpoint, e))?;
    let params = PolicyParams::load(BufReader::new(file), cfg.train.environment().vocab)?;
    if *params.spec() != cfg.train.policy.feature_spec() {
        return Err(Failure { code: EXIT_CONFIG, message: "checkpoint feature layout differs from the config's policy settings".into() });
    }
    let samples = args.samples.unwrap_or(cfg.train.eval.samples);
    let ks = if args.ks.is_empty() { cfg.train.eval.ks.clone() } else { args.ks.clone() };
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > samples) {
        return Err(Failure { code: EXIT_CONFIG, message: format!("every k must lie in 1..={samples}") });
    }
    let env = cfg.train.environment();
    let table = evaluate_pass_at_k(&params, &env, &dataset(&cfg.train), samples, &ks, cfg.train.seed)?;
    let text = serde_json::to_string_pretty(&table).map_err(|e| Failure { code: EXIT_IO, message: e.to_string() })? + "\n";
    match &args.out {
        Some(path) => write_all(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
