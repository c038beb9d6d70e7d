//! Command-line front end: run cells or sweeps from a TOML config,
//! generate traces, and print the analytical quantities for a config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prefillsim::backend::{calibrate_threshold, fallback_threshold, feasibility_check};
use prefillsim::comm::{
    asyncep_gather_bytes, offload_h2d_bytes, per_layer_comm_bytes, transfer_time, Strategy,
};
use prefillsim::cost::{activation_bytes, kv_bytes, weight_bytes};
use prefillsim::error::Result;
use prefillsim::report::{
    emit_report, load_config, run_cell, run_experiment, write_report, ExperimentConfig,
    MetricsRow,
};
use prefillsim::workload::{gen_synthetic, write_trace, Regime};

#[derive(Parser)]
#[command(
    name = "prefillsim",
    version,
    about = "Deterministic prefill-only MoE serving simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single (strategy, gpus) cell and emit its report row.
    Simulate(RunArgs),
    /// Run the full strategy-by-degree grid and emit the report.
    Sweep(RunArgs),
    /// Generate a synthetic trace file.
    Gen(GenArgs),
    /// Print communication volumes, memory footprints, and thresholds.
    Calc(RunArgs),
    /// Check a config: parse it, resolve its trace, and report per-cell
    /// placement feasibility.
    Validate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config, TOML.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one strategy (e.g. dp_asyncep+offload).
    #[arg(long)]
    strategy: Option<String>,
    /// Restrict to one device count.
    #[arg(long)]
    gpus: Option<u64>,
    /// Serve KV-cache-free: no prefix cache, no KV residency.
    #[arg(long)]
    kv_free: bool,
    /// Force async strategies into host-offload mode.
    #[arg(long)]
    offload: bool,
    /// Offload residency window, in expert layers.
    #[arg(long)]
    window: Option<u32>,
    /// Report path; stdout when absent (config `out` applies first).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: csv or jsonl.
    #[arg(long)]
    format: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.kv_free {
            cfg.kv_free = true;
        }
        if let Some(ref s) = self.strategy {
            cfg.strategies = vec![s.parse()?];
        }
        if let Some(p) = self.gpus {
            cfg.gpus = vec![p];
        }
        if self.offload || self.window.is_some() {
            for s in &mut cfg.strategies {
                if let Strategy::DpAsyncEp { offload, window } = s {
                    if self.offload {
                        *offload = true;
                    }
                    if let Some(w) = self.window {
                        *window = w;
                    }
                }
            }
        }
        if let Some(ref o) = self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(ref f) = self.format {
            cfg.format = f.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Regime label: short, medium, long, ultra_long.
    #[arg(long)]
    regime: String,
    /// Fraction of requests grouped under shared prefixes.
    #[arg(long, default_value_t = 0.0)]
    prefix_share: f64,
    /// Sibling count per shared-prefix group.
    #[arg(long, default_value_t = 10)]
    group_size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace output path.
    #[arg(long)]
    out: PathBuf,
}

fn emit_rows(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Result<()> {
    match cfg.out {
        Some(ref path) => {
            write_report(rows, path, cfg.format)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            emit_report(rows, &mut stdout, cfg.format)?;
        }
    }
    Ok(())
}

fn cmd_simulate(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let strategy = cfg.strategies[0];
    let p = *cfg.gpus.iter().min().expect("validated nonempty");
    let trace = cfg.trace.resolve(cfg.seed)?;
    let row = run_cell(&cfg, 0, strategy, p, &trace);
    emit_rows(&cfg, &[row])
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let rows = run_experiment(&cfg)?;
    emit_rows(&cfg, &rows)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let regime = Regime::preset(&args.regime)?;
    let trace = gen_synthetic(&regime, args.prefix_share, args.group_size.max(2), args.seed)?;
    write_trace(&trace, &args.out)?;
    println!(
        "wrote {} records ({} tokens) to {}",
        trace.records.len(),
        trace.total_tokens(),
        args.out.display()
    );
    Ok(())
}

fn cmd_calc(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let model = &cfg.model;
    let p = *cfg.gpus.iter().min().expect("validated nonempty");
    let cluster = cfg.cluster.with_gpus(p);

    println!("gpus = {p}");
    println!("model.flops_per_token = {}", model.flops_per_token());
    println!(
        "model.expert_flops_per_token_layer = {}",
        model.expert_flops_per_token_layer()
    );

    let w = weight_bytes(model);
    println!("weights.expert_per_expert_bytes = {}", w.expert_per_expert);
    println!("weights.expert_per_layer_bytes = {}", w.expert_per_layer);
    println!("weights.expert_total_bytes = {}", w.expert_total);
    println!("weights.attn_total_bytes = {}", w.attn_total);
    println!("weights.total_bytes = {}", w.total());
    println!("memory.kv_bytes_at_n_ref = {}", kv_bytes(1, cfg.n_ref, model));
    println!(
        "memory.activation_bytes_at_n_ref = {}",
        activation_bytes(1, cfg.n_ref, model)
    );

    println!("comm.basis = 1 request x {} tokens", cfg.n_ref);
    for s in &cfg.strategies {
        println!(
            "comm[{s}].bytes_per_device_layer = {}",
            per_layer_comm_bytes(*s, p, 1, cfg.n_ref, model)
        );
    }

    let gather = asyncep_gather_bytes(p, model);
    let h2d = offload_h2d_bytes(p, model);
    println!("async.gather_bytes_per_layer = {gather}");
    println!(
        "async.gather_time_s = {}",
        transfer_time(gather, cluster.link.nvlink_bw, cluster.link.latency_floor)
    );
    println!("async.h2d_bytes_per_layer = {h2d}");
    println!(
        "async.h2d_time_s = {}",
        transfer_time(h2d, cluster.link.pcie_bw, cluster.link.latency_floor)
    );

    println!(
        "threshold.fallback_flops = {}",
        fallback_threshold(&cluster, model, cfg.n_ref)
    );
    let d2d = calibrate_threshold(&cluster, model, cfg.n_ref, false)?;
    println!("threshold.calibrated_flops = {}", d2d.threshold_flops);
    println!("threshold.calibration_t_c_s = {}", d2d.t_c);
    println!("threshold.calibration_t_e_s = {}", d2d.t_e);
    let off = calibrate_threshold(&cluster, model, cfg.n_ref, true)?;
    println!("threshold.calibrated_offload_flops = {}", off.threshold_flops);
    Ok(())
}

fn cmd_validate(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let trace = cfg.trace.resolve(cfg.seed)?;
    println!(
        "config ok: {} strategies x {} degrees, seed {}",
        cfg.strategies.len(),
        cfg.gpus.len(),
        cfg.seed
    );
    println!("trace: {} records, {} tokens", trace.records.len(), trace.total_tokens());
    for s in &cfg.strategies {
        for &p in &cfg.gpus {
            let report = feasibility_check(*s, p, 0, 0, &cfg.model, &cfg.cluster.with_gpus(p), cfg.kv_free)?;
            if report.feasible {
                println!(
                    "feasibility[{s} x {p}] = ok (headroom {} bytes)",
                    report.headroom_bytes
                );
            } else {
                println!(
                    "feasibility[{s} x {p}] = infeasible ({})",
                    report.reason.as_deref().unwrap_or("no reason")
                );
            }
        }
    }
    println!("validate ok");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Calc(args) => cmd_calc(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
