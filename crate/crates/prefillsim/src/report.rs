//! Experiment driver: config parsing, strategy-by-degree sweeps, and
//! machine-readable reports.
//!
//! A sweep runs one cell per (strategy, parallel degree) pair. Each cell
//! owns a fresh router and drives scheduling rounds over the same trace:
//! the round's assignments become per-engine batches, the backend simulates
//! them, and the elapsed wall time and achieved FLOPs accumulate. Cells
//! that fail the placement precheck (or error mid-run) still emit a row,
//! marked infeasible, so sweep output always covers the full grid.
//!
//! Report rows leave throughput in offered tokens per second: the trace's
//! total token count divided by end-to-end elapsed time. Prefix caching
//! shows up as higher throughput, not as fewer counted tokens.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{
    calibrate_threshold, fallback_threshold, feasibility_check, simulate_batch, splitmix64,
    ClusterConfig, DeviceBatch, SkewModel,
};
use crate::comm::{LinkModel, Strategy};
use crate::cost::{EfficiencyCurve, ModelConfig};
use crate::error::{Result, SimError};
use crate::router::{DecayMode, EngineEvent, RouterState, ThresholdSource};
use crate::workload::{gen_mixture, gen_synthetic, read_trace, MixtureSource, Regime, Trace};

/// Cluster shape shared by every cell of a sweep; the device count comes
/// from the sweep's degree list instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub peak_flops: f64,
    pub hbm_bytes: u64,
    pub link: LinkModel,
    pub gamma: f64,
    pub curve: EfficiencyCurve,
    #[serde(default)]
    pub chunk_tokens: Option<u64>,
}

impl ClusterSpec {
    pub fn h100_fp8() -> Self {
        let c = ClusterConfig::h100_fp8(1);
        ClusterSpec {
            peak_flops: c.peak_flops,
            hbm_bytes: c.hbm_bytes,
            link: c.link,
            gamma: c.gamma,
            curve: c.curve,
            chunk_tokens: c.chunk_tokens,
        }
    }

    pub fn with_gpus(&self, gpus: u64) -> ClusterConfig {
        ClusterConfig {
            gpus,
            peak_flops: self.peak_flops,
            hbm_bytes: self.hbm_bytes,
            link: self.link,
            gamma: self.gamma,
            curve: self.curve,
            chunk_tokens: self.chunk_tokens,
        }
    }
}

/// Where a sweep's requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSpec {
    /// Generate one regime's worth of synthetic requests.
    Synthetic { regime: String, prefix_share: f64, group_size: u64 },
    /// Read a recorded trace file.
    File { path: PathBuf },
    /// Generate a multi-source length mixture.
    Mixture { sources: Vec<MixtureSource> },
}

impl TraceSpec {
    pub fn resolve(&self, seed: u64) -> Result<Trace> {
        match self {
            TraceSpec::Synthetic { regime, prefix_share, group_size } => {
                gen_synthetic(&Regime::preset(regime)?, *prefix_share, *group_size, seed)
            }
            TraceSpec::File { path } => read_trace(path),
            TraceSpec::Mixture { sources } => gen_mixture(sources, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ReportFormat {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            other => {
                Err(SimError::InvalidArgument(format!("unknown format {other:?} (csv, jsonl)")))
            }
        }
    }
}

fn default_n_ref() -> u64 {
    65_536
}

fn default_block_size() -> u64 {
    16
}

fn default_format() -> ReportFormat {
    ReportFormat::Csv
}

/// One experiment: a model on a cluster shape, a trace, and the grid of
/// strategies and device counts to sweep. Unknown keys are parse errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Reference round size (tokens) for threshold calibration.
    #[serde(default = "default_n_ref")]
    pub n_ref: u64,
    /// KV-cache-free serving: prefix caching off, KV bytes not held.
    #[serde(default)]
    pub kv_free: bool,
    #[serde(default)]
    pub decay: DecayMode,
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    pub strategies: Vec<Strategy>,
    /// Parallel degrees to sweep; reordered ascending.
    pub gpus: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: ReportFormat,
    pub model: ModelConfig,
    pub cluster: ClusterSpec,
    #[serde(default = "SkewModel::balanced")]
    pub skew: SkewModel,
    pub trace: TraceSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.skew.validate()?;
        self.cluster.with_gpus(1).validate()?;
        if self.strategies.is_empty() {
            return Err(SimError::InvalidConfig("strategies list is empty".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        if self.gpus.is_empty() {
            return Err(SimError::InvalidConfig("gpus list is empty".into()));
        }
        if self.gpus.contains(&0) {
            return Err(SimError::InvalidConfig("gpus entries must be positive".into()));
        }
        if self.block_size == 0 {
            return Err(SimError::InvalidConfig("block_size must be positive".into()));
        }
        if self.n_ref == 0 {
            return Err(SimError::InvalidConfig("n_ref must be positive".into()));
        }
        Ok(())
    }
}

/// Parses a config from TOML text; serde reports unknown or missing keys
/// with their field paths.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| SimError::InvalidConfig(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// One sweep cell's metrics. Infeasible rows keep their placement footprint
/// and reason but carry no timing fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub gpus: u64,
    pub feasible: bool,
    /// Offered tokens per second: trace total / elapsed.
    pub throughput_tokens_per_s: Option<f64>,
    /// Achieved FLOPs over elapsed * gpus * peak.
    pub mfu: Option<f64>,
    pub elapsed_s: Option<f64>,
    /// Total stall across devices and rounds, device-seconds.
    pub stall_s: Option<f64>,
    /// Peak per-device footprint: weights plus the worst round's KV and
    /// activations.
    pub peak_hbm_bytes: u64,
    pub note: Option<String>,
}

impl MetricsRow {
    fn infeasible(strategy: Strategy, gpus: u64, peak_hbm_bytes: u64, note: String) -> Self {
        MetricsRow {
            strategy: strategy.to_string(),
            gpus,
            feasible: false,
            throughput_tokens_per_s: None,
            mfu: None,
            elapsed_s: None,
            stall_s: None,
            peak_hbm_bytes,
            note: Some(note),
        }
    }
}

fn cell_skew(cfg: &ExperimentConfig, strategy_index: usize, p: u64) -> SkewModel {
    let salt = splitmix64((strategy_index as u64 + 1) << 32 | p);
    SkewModel { seed: splitmix64(cfg.seed ^ salt ^ cfg.skew.seed), ..cfg.skew }
}

/// Runs one (strategy, degree) cell over an already-resolved trace.
/// Errors become an infeasible row rather than propagating, so a sweep
/// always yields its full grid.
pub fn run_cell(
    cfg: &ExperimentConfig,
    strategy_index: usize,
    strategy: Strategy,
    p: u64,
    trace: &Trace,
) -> MetricsRow {
    match run_cell_inner(cfg, strategy_index, strategy, p, trace) {
        Ok(row) => row,
        Err(e) => MetricsRow::infeasible(strategy, p, 0, e.to_string()),
    }
}

fn run_cell_inner(
    cfg: &ExperimentConfig,
    strategy_index: usize,
    strategy: Strategy,
    p: u64,
    trace: &Trace,
) -> Result<MetricsRow> {
    let cluster = cfg.cluster.with_gpus(p);
    cluster.validate()?;

    // Weights-only placement check; KV and activations are batch-dependent
    // and get their own check against the worst observed round below.
    let pre = feasibility_check(strategy, p, 0, 0, &cfg.model, &cluster, cfg.kv_free)?;
    if !pre.feasible {
        let note = pre.reason.unwrap_or_else(|| "does not fit".into());
        return Ok(MetricsRow::infeasible(strategy, p, pre.weights_bytes, note));
    }

    // DP-attention strategies run one engine per device; the rest pool the
    // cluster into a single engine whose KV budget spans all devices.
    let engines = if strategy.is_dp_attention() { p as usize } else { 1 };
    let headroom = cluster.hbm_bytes.saturating_sub(pre.weights_bytes);
    let budget =
        if cfg.kv_free { 0 } else { headroom.saturating_mul(if engines == 1 { p } else { 1 }) };
    let fallback = fallback_threshold(&cluster, &cfg.model, cfg.n_ref);
    let mut router = RouterState::new(
        engines,
        cfg.block_size,
        budget,
        &cfg.model,
        fallback,
        !cfg.kv_free,
        cfg.decay,
    )?;
    if let Strategy::DpAsyncEp { offload, .. } = strategy {
        let cal = calibrate_threshold(&cluster, &cfg.model, cfg.n_ref, offload)?;
        router.install_threshold(ThresholdSource::Calibrated(cal))?;
    }

    let mut requests = trace.materialize(cfg.block_size)?;
    requests.sort_by(|a, b| {
        a.arrival_s
            .partial_cmp(&b.arrival_s)
            .expect("arrival times are finite")
            .then(a.id.cmp(&b.id))
    });
    let mut queue: VecDeque<_> = requests.into();

    let skew = cell_skew(cfg, strategy_index, p);
    let mut elapsed = 0.0f64;
    let mut achieved = 0.0f64;
    let mut stall = 0.0f64;
    let mut peak_engine_tokens = 0u64;

    while !queue.is_empty() {
        let assignments = router.schedule_round(&mut queue, &cfg.model)?;
        if assignments.is_empty() {
            return Err(SimError::InvalidConfig(
                "scheduler made no progress; is the threshold too small for one request?".into(),
            ));
        }
        let mut batches = vec![DeviceBatch::default(); engines];
        for a in &assignments {
            let b = &mut batches[a.engine];
            b.tokens += a.new_tokens;
            b.flops += a.delta_flops;
            b.quad_flops += a.quad_flops;
        }
        peak_engine_tokens =
            peak_engine_tokens.max(batches.iter().map(|b| b.tokens).max().unwrap_or(0));

        let timelines = simulate_batch(strategy, &batches, &cluster, &cfg.model, &skew)?;
        elapsed += timelines.iter().map(|t| t.elapsed_s).fold(0.0, f64::max);
        for t in &timelines {
            achieved += t.achieved_flops;
            stall += t.stall_s;
        }

        // Completion feedback, in request-id order for reproducibility:
        // the engine materialized each assignment's blocks and prefilled
        // its admitted tokens.
        let mut finished: Vec<_> = assignments.iter().collect();
        finished.sort_by_key(|a| a.request.id);
        for a in finished {
            router.on_engine_event(EngineEvent::BlocksStored {
                engine: a.engine,
                hashes: a.request.prefix_blocks.clone(),
            })?;
            if a.new_tokens > 0 {
                router.on_engine_event(EngineEvent::Progress {
                    request: a.request.id,
                    tokens: a.new_tokens,
                })?;
            }
        }
    }

    // KV and activation pressure at the worst round actually scheduled.
    let fit = feasibility_check(strategy, p, 1, peak_engine_tokens, &cfg.model, &cluster, cfg.kv_free)?;
    let peak = fit.weights_bytes.saturating_add(fit.kv_bytes).saturating_add(fit.act_bytes);
    if !fit.feasible {
        let note = fit.reason.unwrap_or_else(|| "peak round does not fit".into());
        return Ok(MetricsRow::infeasible(strategy, p, peak, note));
    }
    if elapsed <= 0.0 {
        let mut row = MetricsRow::infeasible(strategy, p, peak, "empty trace".into());
        row.feasible = true;
        return Ok(row);
    }

    Ok(MetricsRow {
        strategy: strategy.to_string(),
        gpus: p,
        feasible: true,
        throughput_tokens_per_s: Some(trace.total_tokens() as f64 / elapsed),
        mfu: Some(achieved / (elapsed * p as f64 * cluster.peak_flops)),
        elapsed_s: Some(elapsed),
        stall_s: Some(stall),
        peak_hbm_bytes: peak,
        note: None,
    })
}

/// Runs the full grid: config strategy order by ascending device count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let trace = cfg.trace.resolve(cfg.seed)?;
    let mut degrees = cfg.gpus.clone();
    degrees.sort_unstable();
    degrees.dedup();
    let mut rows = Vec::with_capacity(cfg.strategies.len() * degrees.len());
    for (si, &strategy) in cfg.strategies.iter().enumerate() {
        for &p in &degrees {
            rows.push(run_cell(cfg, si, strategy, p, &trace));
        }
    }
    Ok(rows)
}

pub const REPORT_HEADER: &str =
    "strategy,gpus,feasible,throughput_tokens_per_s,mfu,elapsed_s,stall_s,peak_hbm_bytes,note";

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows as CSV (fixed header, empty cells for absent values, commas
/// in notes replaced) or as one JSON object per line. Floats use the
/// shortest representation that round-trips, so equal runs emit identical
/// bytes.
pub fn emit_report<W: IoWrite>(rows: &[MetricsRow], out: &mut W, format: ReportFormat) -> Result<()> {
    if rows.is_empty() {
        return Err(SimError::InvalidArgument("report has no rows".into()));
    }
    match format {
        ReportFormat::Csv => {
            writeln!(out, "{REPORT_HEADER}")?;
            for r in rows {
                let note = r
                    .note
                    .as_deref()
                    .unwrap_or("")
                    .replace(',', ";")
                    .replace('\n', " ");
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.strategy,
                    r.gpus,
                    r.feasible,
                    csv_opt(r.throughput_tokens_per_s),
                    csv_opt(r.mfu),
                    csv_opt(r.elapsed_s),
                    csv_opt(r.stall_s),
                    r.peak_hbm_bytes,
                    note
                )?;
            }
        }
        ReportFormat::Jsonl => {
            for r in rows {
                writeln!(out, "{}", serde_json::to_string(r).expect("row serializes"))?;
            }
        }
    }
    Ok(())
}

pub fn write_report(rows: &[MetricsRow], path: &Path, format: ReportFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    emit_report(rows, &mut out, format)?;
    out.flush()?;
    Ok(())
}
