//! `sidemoe` command line: quantize, train, memory-report, ablate.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{
    ablation_sweep, config_memory_report, csv_text, run_experiment, run_memory, AblationAxis, Component,
    RunConfig, RunMemory,
};
use crate::memory_model::MemoryReport;
use crate::numerics::{DenseTensor, TENSOR_MAGIC};
use crate::quantizer::{max_abs_residual, quantization_error, quantize_tensor, Rounding};

#[derive(Debug, Parser)]
#[command(name = "sidemoe", version, about = "Quantized side-network fine-tuning with sparse experts")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize a weight file (CSV of floats or SMTN tensor container).
    #[command(after_help = config_keys_help())]
    Quantize {
        input: PathBuf,
        /// Bitwidth; defaults to `quantizer.bits`.
        #[arg(long, short = 'n')]
        bits: Option<u8>,
        /// floor | nearest; defaults to `quantizer.rounding`.
        #[arg(long)]
        rounding: Option<Rounding>,
    },
    /// Pretrain, quantize, fine-tune and evaluate one seeded run.
    #[command(after_help = config_keys_help())]
    Train,
    /// Analytic memory budgets, reduction-factor sweep and PETL floor.
    #[command(after_help = config_keys_help())]
    MemoryReport,
    /// One run per value along an ablation axis.
    #[command(after_help = config_keys_help())]
    Ablate {
        /// component | p | N
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the standard sweep for the axis when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

/// Every configuration key with its default, one per line.
pub fn config_keys_help() -> String {
    let mut out = String::from("Configuration keys (defaults):\n");
    let mut section = String::new();
    for line in RunConfig::default().to_toml().lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = format!("{name}.");
            continue;
        }
        out.push_str("  ");
        out.push_str(&section);
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Standard sweep values for an axis.
pub fn default_values(axis: AblationAxis) -> Vec<String> {
    match axis {
        AblationAxis::Component => Component::ALL.iter().map(ToString::to_string).collect(),
        AblationAxis::P => ["0", "0.05", "0.10", "0.50"].map(String::from).to_vec(),
        AblationAxis::N => (3..=8).map(|n| n.to_string()).collect(),
    }
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("output path {} has no file name", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

/// Weights from a CSV of floats (any layout; equal-length rows keep their
/// matrix shape) or an SMTN container.
pub fn read_weights(path: &Path) -> Result<DenseTensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        return DenseTensor::from_bytes(&bytes);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: `{f}` is not a number", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::config(format!("{} contains no weights", path.display())));
    }
    let cols = rows[0].len();
    if rows.len() > 1 && rows.iter().all(|r| r.len() == cols) {
        DenseTensor::new(vec![rows.len(), cols], rows.concat())
    } else {
        Ok(DenseTensor::vector(rows.concat()))
    }
}

/// The quantize subcommand's JSON report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantReport {
    pub s: f64,
    pub z: i32,
    pub n: u8,
    pub error_q: f64,
    pub max_abs_residual: f64,
}

#[derive(Serialize)]
struct MemoryOutput<'a> {
    report: &'a MemoryReport,
    run: &'a RunMemory,
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    verbose: bool,
}

impl Context {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::from_toml(&text)
                .map_err(|e| Error::config(format!("{}: {}", p.display(), e.to_string().trim_start_matches("configuration error: "))))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_quantize(ctx: &Context, input: &Path, bits: Option<u8>, rounding: Option<Rounding>) -> Result<QuantReport> {
    let bits = bits.unwrap_or(ctx.cfg.quantizer.bits);
    let rounding = rounding.unwrap_or(ctx.cfg.quantizer.rounding);
    let weights = read_weights(input)?;
    let q = quantize_tensor(&weights, bits, rounding)?;
    let p = q.params();
    let report = QuantReport {
        s: p.scale,
        z: p.zero_point,
        n: p.bits,
        error_q: quantization_error(&weights, &q)?,
        max_abs_residual: max_abs_residual(&weights, &q)?,
    };
    fs::create_dir_all(&ctx.out)?;
    write_atomic(&ctx.out.join("quantized.smqt"), &q.to_blob())?;
    write_json(&ctx.out.join("quantized.json"), &q.to_sidecar())?;
    write_json(&ctx.out.join("quant_report.json"), &report)?;
    ctx.log(format!(
        "quantized {} values at n={bits}: s={} z={} error_q={}",
        weights.len(),
        report.s,
        report.z,
        report.error_q
    ));
    Ok(report)
}

fn cmd_train(ctx: &Context) -> Result<()> {
    fs::create_dir_all(&ctx.out)?;
    ctx.log(format!("training seed {} for {} epochs", ctx.cfg.seed, ctx.cfg.train.epochs));
    let run = run_experiment(&ctx.cfg)?;
    if ctx.verbose {
        for r in &run.report.rows {
            eprintln!(
                "epoch {:>3}  loss {:.5}  balance {:.5}  train {:.4}  val {:.4}  error_q {:.3e}  events {}",
                r.epoch, r.total_loss, r.balance_loss, r.train_accuracy, r.val_accuracy, r.error_q, r.requant_events
            );
        }
        eprintln!("wall clock {:.2}s", run.report.wall_clock_secs);
    }
    write_atomic(&ctx.out.join("report.csv"), run.report.to_csv()?.as_bytes())?;
    write_atomic(&ctx.out.join("summary.json"), run.report.summary_json()?.as_bytes())?;
    write_atomic(&ctx.out.join("requant_events.csv"), csv_text(&run.events)?.as_bytes())?;
    write_atomic(&ctx.out.join("routing.csv"), csv_text(&run.routing)?.as_bytes())?;
    let (bytes, manifest) = run.checkpoint(&ctx.cfg).to_bytes();
    write_atomic(&ctx.out.join("checkpoint.smck"), &bytes)?;
    write_json(&ctx.out.join("checkpoint.json"), &manifest)?;
    Ok(())
}

fn cmd_memory_report(ctx: &Context) -> Result<String> {
    let report = config_memory_report(&ctx.cfg)?;
    let run = run_memory(&ctx.cfg)?;
    let text = serde_json::to_string_pretty(&MemoryOutput {
        report: &report,
        run: &run,
    })? + "\n";
    write_atomic(&ctx.out.join("memory_report.json"), text.as_bytes())?;
    Ok(text)
}

fn cmd_ablate(ctx: &Context, axis: &str, values: &[String]) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let values = if values.is_empty() { default_values(axis) } else { values.to_vec() };
    ctx.log(format!("ablating {axis} over {}", values.join(",")));
    let rows = ablation_sweep(axis, &values, &ctx.cfg)?;
    let dir = ctx.out.join(format!("ablation_{axis}"));
    for row in &rows {
        write_json(&dir.join(format!("{}.json", row.value)), row)?;
    }
    write_atomic(&ctx.out.join(format!("ablation_{axis}.csv")), csv_text(&rows)?.as_bytes())?;
    Ok(())
}

/// Parse `args` (program name first) and execute. Returns the process
/// exit code: 0 success, 2 configuration or usage error, 3 numeric
/// divergence, 4 I/O or format error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sidemoe: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let ctx = Context {
        cfg,
        out: cli.out,
        verbose: cli.verbose,
    };
    match &cli.command {
        Command::Quantize { input, bits, rounding } => cmd_quantize(&ctx, input, *bits, *rounding).map(|_| ()),
        Command::Train => cmd_train(&ctx),
        Command::MemoryReport => {
            let text = cmd_memory_report(&ctx)?;
            print!("{text}");
            Ok(())
        }
        Command::Ablate { axis, values } => cmd_ablate(&ctx, axis, values),
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
