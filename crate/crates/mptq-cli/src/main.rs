//! `mptq` command line: generate toy models and calibration data, run
//! calibration, fit and apply quantizers in single- or mixed-precision
//! mode, and inspect the resulting reports.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mptq_core::alloc::{AllocOrder, MetricMode};
use mptq_core::calibrate::{run_calibration, CalibrationSummary};
use mptq_core::model::{ModelConfig, ToyViT};
use mptq_core::pipeline::{
    self, emit_report, load_data, load_model, load_quantized_model, run_allocation, run_mptq,
    save_data, save_model, save_quantized_model, Mode, PipelineConfig,
};
use mptq_core::quant::sqnr_db;
use mptq_core::redistribute::Strategy;
use mptq_core::synthetic;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mptq",
    version,
    about = "Post-training quantization pipeline for a toy transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy encoder and write it as a container file
    GenModel(GenModelArgs),
    /// Generate a seeded synthetic calibration pool
    GenData(GenDataArgs),
    /// Run calibration and write a JSON summary of sites and statistics
    Calibrate(RunArgs),
    /// Run the full pipeline and write the quantized model plus report
    Quantize(RunArgs),
    /// Compute a mixed-precision allocation plan
    Allocate(RunArgs),
    /// Compare a quantized model against its floating-point source
    Eval(EvalArgs),
    /// Pretty-print a report JSON file
    Report(ReportArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    embed: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ff: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, default_value_t = 32)]
    embed: usize,
}

/// Pipeline configuration: a JSON config file plus individual flag
/// overrides; flags win.
#[derive(Args)]
struct RunArgs {
    /// JSON file holding a PipelineConfig
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Calibration sample count
    #[arg(long)]
    samples: Option<usize>,
    /// sp or mp
    #[arg(long)]
    mode: Option<Mode>,
    /// Uniform bit-width for sp mode
    #[arg(long)]
    bits: Option<u8>,
    /// Target mean weight bits for mp mode
    #[arg(long)]
    bw: Option<f64>,
    /// Target mean activation bits for mp mode
    #[arg(long)]
    ba: Option<f64>,
    /// Redistribution strategy: sq, sq-b, osup-shift, osup-smooth, none
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Selection metric: sqnr-times-lognumel or sqnr-only
    #[arg(long)]
    metric: Option<MetricMode>,
    /// Greedy order: weights-first or activations-first
    #[arg(long)]
    order: Option<AllocOrder>,
    /// Quantize Softmax and LayerNorm outputs too
    #[arg(long)]
    fully_quantized: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (summary, quantized model, or plan depending on command)
    #[arg(long)]
    out: PathBuf,
    /// Report path for `quantize` (defaults to `<out>.report.json`)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Apply a saved allocation plan instead of searching (quantize only)
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Base path of a quantized model (expects the .quant.json sidecar)
    #[arg(long)]
    quantized: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON produced by `quantize`
    #[arg(long = "in")]
    input: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut config: PipelineConfig = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .with_context(|| format!("stage load: reading config {}", path.display()))?;
                serde_json::from_slice(&bytes)
                    .with_context(|| format!("stage load: parsing config {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(m) = &self.model {
            config.model_path = Some(m.display().to_string());
        }
        if let Some(d) = &self.data {
            config.data_path = Some(d.display().to_string());
        }
        if let Some(s) = self.samples {
            config.sample_count = s;
        }
        if let Some(m) = self.mode {
            config.mode = m;
        }
        if let Some(b) = self.bits {
            config.bits = b;
        }
        if let Some(b) = self.bw {
            config.weight_bits = b;
        }
        if let Some(b) = self.ba {
            config.act_bits = b;
        }
        if let Some(s) = self.strategy {
            config.strategy = s;
        }
        if let Some(m) = self.metric {
            config.metric_mode = m;
        }
        if let Some(o) = self.order {
            config.order = o;
        }
        if let Some(f) = self.fully_quantized {
            config.fully_quantized = f;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        Ok(config)
    }

    fn load_inputs(&self, config: &PipelineConfig) -> Result<(ToyViT, mptq_core::Tensor)> {
        let model_path = config
            .model_path
            .as_ref()
            .context("stage load: no model path (use --model or the config file)")?;
        let data_path = config
            .data_path
            .as_ref()
            .context("stage load: no data path (use --data or the config file)")?;
        let model = load_model(Path::new(model_path))?;
        let data = load_data(Path::new(data_path))?;
        Ok((model, data))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
        .with_context(|| format!("stage emit: writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(with = "mptq_core::floats")]
    end_to_end_sqnr_db: f64,
    max_abs_logit_diff: f32,
    act_bits: BTreeMap<String, u8>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenModel(args) => {
            let config = ModelConfig {
                embed: args.embed,
                depth: args.depth,
                num_heads: args.heads,
                ff: args.ff,
                classes: args.classes,
            };
            let model = ToyViT::seeded(config, args.seed)?;
            save_model(&args.out, &model)?;
            println!(
                "wrote model (embed {}, depth {}, heads {}) to {}",
                args.embed,
                args.depth,
                args.heads,
                args.out.display()
            );
        }
        Command::GenData(args) => {
            let data =
                synthetic::calibration_tokens(args.samples, args.tokens, args.embed, args.seed)?;
            save_data(&args.out, &data)?;
            println!(
                "wrote {} samples of {}x{} tokens to {}",
                args.samples,
                args.tokens,
                args.embed,
                args.out.display()
            );
        }
        Command::Calibrate(args) => {
            let config = args.resolve()?;
            let (model, data) = args.load_inputs(&config)?;
            let cache = run_calibration(
                &model,
                &data,
                config.sample_count,
                config.seed,
                config.fully_quantized,
            )?;
            let summary = CalibrationSummary::from_cache(&cache, &model);
            write_json(&args.out, &summary)?;
            println!(
                "calibrated {} sites over {} samples -> {}",
                summary.sites.len(),
                summary.sample_count,
                args.out.display()
            );
        }
        Command::Quantize(args) => {
            let config = args.resolve()?;
            let (model, data) = args.load_inputs(&config)?;
            let out = match &args.plan {
                Some(path) => {
                    let bytes = std::fs::read(path)
                        .with_context(|| format!("stage load: reading plan {}", path.display()))?;
                    let plan = serde_json::from_slice(&bytes)?;
                    pipeline::run_with_plan(&model, &data, &config, &plan)?
                }
                None => run_mptq(&model, &data, &config)?,
            };
            save_quantized_model(&args.out, &out.quantized)?;
            let report_path = args
                .report
                .clone()
                .or_else(|| config.report_path.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| {
                    let mut p = args.out.as_os_str().to_owned();
                    p.push(".report.json");
                    PathBuf::from(p)
                });
            emit_report(&out.report, &report_path)?;
            if let Some(plan) = &out.plan {
                let mut p = args.out.as_os_str().to_owned();
                p.push(".plan.json");
                write_json(&PathBuf::from(p), plan)?;
            }
            if !out.redistribution.is_empty() {
                let mut p = args.out.as_os_str().to_owned();
                p.push(".redist.json");
                write_json(&PathBuf::from(p), &out.redistribution)?;
            }
            println!(
                "quantized ({:?} mode): end-to-end SQNR {:.2} dB, mean bits W {:.2} / A {:.2}",
                config.mode,
                out.report.end_to_end_sqnr_db.0,
                out.report.mean_weight_bits,
                out.report.mean_act_bits
            );
            println!(
                "model -> {}, report -> {}",
                args.out.display(),
                report_path.display()
            );
        }
        Command::Allocate(args) => {
            let config = args.resolve()?;
            let (model, data) = args.load_inputs(&config)?;
            let plan = run_allocation(&model, &data, &config)?;
            write_json(&args.out, &plan)?;
            println!(
                "allocation plan: {} entries, {} steps, metric {:?} -> {}",
                plan.entries.len(),
                plan.trace.len(),
                plan.metric_mode,
                args.out.display()
            );
        }
        Command::Eval(args) => {
            let model = load_model(&args.model)?;
            let quantized = load_quantized_model(&args.quantized)?;
            let data = load_data(&args.data)?;
            let fp = model.forward(&data)?;
            let q = quantized.forward(&data)?;
            let diff = fp
                .data()
                .iter()
                .zip(q.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            let out = EvalOutput {
                end_to_end_sqnr_db: sqnr_db(&fp, &q)?,
                max_abs_logit_diff: diff,
                act_bits: quantized
                    .act_quantizers
                    .iter()
                    .map(|(k, v)| (k.clone(), v.bits()))
                    .collect(),
            };
            write_json(&args.out, &out)?;
            println!(
                "eval: end-to-end SQNR {:.2} dB, max |logit diff| {:.4} -> {}",
                out.end_to_end_sqnr_db,
                out.max_abs_logit_diff,
                args.out.display()
            );
        }
        Command::Report(args) => {
            // the file may hold an evaluation report or an allocation plan
            let bytes = std::fs::read(&args.input)
                .with_context(|| format!("stage load: reading {}", args.input.display()))?;
            if let Ok(report) = serde_json::from_slice(&bytes) {
                // ignore EPIPE so `mptq report ... | head` stays clean
                let _ = print_report(&report);
            } else {
                let plan: mptq_core::alloc::AllocationPlan = serde_json::from_slice(&bytes)
                    .context("stage load: file is neither a report nor a plan")?;
                let _ = print_plan(&plan);
            }
        }
    }
    Ok(())
}

fn print_report(report: &mptq_core::pipeline::EvalReport) -> std::io::Result<()> {
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    writeln!(
        out,
        "mode {:?} | strategy {:?} | metric {:?} | fully quantized {} | seed {}",
        report.mode, report.strategy, report.metric_mode, report.fully_quantized, report.seed
    )?;
    writeln!(
        out,
        "end-to-end SQNR {:.2} dB | mean bits W {:.2} A {:.2} | clamping loss {:.4}",
        report.end_to_end_sqnr_db.0,
        report.mean_weight_bits,
        report.mean_act_bits,
        report.clamping.total
    )?;
    writeln!(out, "bit histogram:")?;
    for (bits, count) in &report.bit_histogram {
        writeln!(out, "  {bits} bits: {count} sites")?;
    }
    writeln!(out, "{:<28} {:>4} {:>12}", "site", "bits", "SQNR (dB)")?;
    for (site, bits) in &report.per_layer_bits {
        let db = report.per_layer_sqnr_db[site].0;
        writeln!(out, "{site:<28} {bits:>4} {db:>12.2}")?;
    }
    Ok(())
}

fn print_plan(plan: &mptq_core::alloc::AllocationPlan) -> std::io::Result<()> {
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    writeln!(
        out,
        "allocation plan | metric {:?} | order {:?} | targets W {:.2} A {:.2} | {} steps",
        plan.metric_mode,
        plan.order,
        plan.target_weight_bits,
        plan.target_act_bits,
        plan.trace.len()
    )?;
    writeln!(out, "{:<28} {:>10} {:>5}", "site", "kind", "bits")?;
    for e in &plan.entries {
        writeln!(
            out,
            "{:<28} {:>10} {:>5}",
            e.layer_id,
            format!("{:?}", e.kind),
            e.bits
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    pipeline::init_thread_cap_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
