//! Task reformulation, synthetic trace generation, and trace file I/O.
//!
//! Tasks are prefill-only: a single forward pass over a context answers the
//! task from the logits at one position. Multi-selection tasks decompose
//! into sibling requests that share the context as a common prefix and each
//! append a short candidate suffix, which is what makes prefix caching pay.
//!
//! Traces store only the request shape. Token ids are abstract integers
//! regenerated deterministically from `(group_id, position)`, so two
//! requests collide on exactly the blocks their groups share and trace
//! files stay small.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::splitmix64;
use crate::blocks::block_hash_chain;
use crate::error::{Result, SimError};
use crate::router::Request;

/// Candidate suffix length for reformulated selection tasks, one cache
/// block. The generators keep request totals whole by carving the suffix
/// out of the nominal sequence length.
pub const CANDIDATE_SUFFIX_TOKENS: u64 = 16;

const MAX_CANDIDATES: u32 = 64;

/// What a prefill-only evaluation task looks like before reformulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Answer read from one position's logits over the whole vocabulary.
    SingleToken,
    /// One of `candidate_count` labels, still a single pass.
    SingleChoice,
    /// Score each of `candidate_count` continuations independently; this is
    /// the kind that fans out into sibling requests.
    MultiSelection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub context_len: u64,
    pub candidate_count: u32,
    pub group_id: u64,
}

/// Turns one task into its prefill requests, numbering them from
/// `*next_id`. Single-pass kinds yield one request over the context.
/// Multi-selection yields `candidate_count` siblings that share the context
/// prefix (and so the block chain) and differ only in a one-block suffix.
pub fn reformulate(task: &Task, next_id: &mut u64) -> Result<Vec<TraceRecord>> {
    if task.candidate_count > MAX_CANDIDATES {
        return Err(SimError::InvalidArgument(format!(
            "candidate_count {} exceeds the {MAX_CANDIDATES} cap",
            task.candidate_count
        )));
    }
    let mut take_id = || {
        let id = *next_id;
        *next_id += 1;
        id
    };
    match task.kind {
        TaskKind::SingleToken | TaskKind::SingleChoice => {
            if task.kind == TaskKind::SingleChoice && task.candidate_count < 2 {
                return Err(SimError::InvalidArgument(
                    "single_choice needs at least 2 candidates".into(),
                ));
            }
            Ok(vec![TraceRecord {
                id: take_id(),
                arrival_s: 0.0,
                group_id: task.group_id,
                prefix_len: task.context_len,
                suffix_len: 0,
                candidate_count: task.candidate_count.max(1),
            }])
        }
        TaskKind::MultiSelection => {
            if task.candidate_count < 2 {
                return Err(SimError::InvalidArgument(
                    "multi_selection needs at least 2 candidates".into(),
                ));
            }
            Ok((0..task.candidate_count)
                .map(|_| TraceRecord {
                    id: take_id(),
                    arrival_s: 0.0,
                    group_id: task.group_id,
                    prefix_len: task.context_len,
                    suffix_len: CANDIDATE_SUFFIX_TOKENS,
                    candidate_count: task.candidate_count,
                })
                .collect())
        }
    }
}

/// A synthetic context regime: `requests` requests of `seq_len` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regime {
    pub label: String,
    pub seq_len: u64,
    pub requests: u64,
}

impl Regime {
    pub fn new(label: &str, seq_len: u64, requests: u64) -> Regime {
        Regime { label: label.into(), seq_len, requests }
    }

    /// The four sweep regimes. Each holds the same 10,485,760-token budget
    /// so throughput comparisons across regimes divide by a common
    /// numerator.
    pub fn presets() -> Vec<Regime> {
        vec![
            Regime::new("short", 256, 40_960),
            Regime::new("medium", 4_096, 2_560),
            Regime::new("long", 32_768, 320),
            Regime::new("ultra_long", 131_072, 80),
        ]
    }

    pub fn preset(label: &str) -> Result<Regime> {
        Regime::presets().into_iter().find(|r| r.label == label).ok_or_else(|| {
            SimError::InvalidArgument(format!(
                "unknown regime '{label}' (short, medium, long, ultra_long)"
            ))
        })
    }

    pub fn total_tokens(&self) -> u64 {
        self.seq_len * self.requests
    }
}

/// One stored request. Block chains are not serialized; they regenerate
/// from `group_id` on materialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: u64,
    pub arrival_s: f64,
    pub group_id: u64,
    pub prefix_len: u64,
    pub suffix_len: u64,
    pub candidate_count: u32,
}

impl TraceRecord {
    pub fn total_tokens(&self) -> u64 {
        self.prefix_len + self.suffix_len
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

/// Deterministic abstract token id for position `pos` of a group's shared
/// token stream. Group ids never repeat across a trace, so chains collide
/// exactly within a group and (up to hash collisions) never across groups.
fn token_id(group_id: u64, pos: u64) -> u64 {
    splitmix64(splitmix64(group_id).wrapping_add(pos))
}

impl Trace {
    pub fn total_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.total_tokens()).sum()
    }

    /// Expands records into schedulable requests, regenerating each prefix
    /// chain at `block_size` granularity.
    pub fn materialize(&self, block_size: u64) -> Result<Vec<Request>> {
        if block_size == 0 {
            return Err(SimError::InvalidArgument("block_size must be positive".into()));
        }
        Ok(self
            .records
            .iter()
            .map(|r| {
                let tokens: Vec<u64> = (0..r.prefix_len).map(|j| token_id(r.group_id, j)).collect();
                Request {
                    id: r.id,
                    arrival_s: r.arrival_s,
                    group_id: r.group_id,
                    prefix_len: r.prefix_len,
                    suffix_len: r.suffix_len,
                    candidate_count: r.candidate_count,
                    prefix_blocks: block_hash_chain(&tokens, block_size),
                }
            })
            .collect())
    }
}

/// Generates `regime.requests` requests of `regime.seq_len` tokens.
/// A `prefix_share` fraction of them (rounded down to whole groups of
/// `group_size`) form sibling groups that share a common prefix and carry
/// one-block suffixes; the rest are fully distinct single-pass requests.
/// Record order is a seeded shuffle, ids are sequential in that order, and
/// arrivals are all zero (offline batch).
pub fn gen_synthetic(regime: &Regime, prefix_share: f64, group_size: u64, seed: u64) -> Result<Trace> {
    if !(0.0..=1.0).contains(&prefix_share) {
        return Err(SimError::InvalidArgument(format!(
            "prefix_share must lie in [0, 1], got {prefix_share}"
        )));
    }
    if prefix_share > 0.0 && group_size < 2 {
        return Err(SimError::InvalidArgument(
            "group_size must be at least 2 when prefix_share > 0".into(),
        ));
    }
    if regime.seq_len <= CANDIDATE_SUFFIX_TOKENS {
        return Err(SimError::InvalidArgument(format!(
            "seq_len {} leaves no room for a {CANDIDATE_SUFFIX_TOKENS}-token suffix",
            regime.seq_len
        )));
    }

    let n = regime.requests;
    let groups = if prefix_share > 0.0 {
        ((n as f64 * prefix_share) as u64) / group_size
    } else {
        0
    };
    let shared = groups * group_size;

    // Group ids come from a seed-derived base; every group and every
    // distinct request takes the next slot, so no two chains in the trace
    // can be built from the same group.
    let gid_base = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    let mut next_gid = 0u64;
    let mut take_gid = || {
        let g = gid_base.wrapping_add(next_gid);
        next_gid += 1;
        g
    };

    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..groups {
        let gid = take_gid();
        for _ in 0..group_size {
            records.push(TraceRecord {
                id: 0,
                arrival_s: 0.0,
                group_id: gid,
                prefix_len: regime.seq_len - CANDIDATE_SUFFIX_TOKENS,
                suffix_len: CANDIDATE_SUFFIX_TOKENS,
                candidate_count: group_size.min(u32::MAX as u64) as u32,
            });
        }
    }
    for _ in shared..n {
        records.push(TraceRecord {
            id: 0,
            arrival_s: 0.0,
            group_id: take_gid(),
            prefix_len: regime.seq_len,
            suffix_len: 0,
            candidate_count: 1,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x2545_F491_4F6C_DD1D));
    records.shuffle(&mut rng);
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i as u64;
    }
    Ok(Trace { records })
}

/// One component of a length mixture. `token_budget` is the source's
/// weight: it emits `round(token_budget / seq_len)` requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSource {
    pub seq_len: u64,
    pub token_budget: u64,
    pub prefix_share: f64,
    pub group_size: u64,
}

fn source_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

/// Concatenates one synthetic trace per source (ids renumbered to stay
/// unique) and interleaves them through arrival times: each record gets a
/// distinct arrival slot drawn from one seeded shuffle of all slots, so
/// consuming the trace in arrival order mixes the sources proportionally.
/// Record order itself stays grouped by source, which keeps a single-source
/// mixture equal to its `gen_synthetic` output up to arrivals.
pub fn gen_mixture(sources: &[MixtureSource], seed: u64) -> Result<Trace> {
    if sources.is_empty() {
        return Err(SimError::InvalidArgument("mixture needs at least one source".into()));
    }
    let mut records = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        if src.seq_len == 0 {
            return Err(SimError::InvalidArgument("mixture source seq_len must be positive".into()));
        }
        let n = ((src.token_budget as f64 / src.seq_len as f64).round()) as u64;
        let regime = Regime::new("mixture", src.seq_len, n);
        let part =
            gen_synthetic(&regime, src.prefix_share, src.group_size, source_seed(seed, i))?;
        let base = records.len() as u64;
        records.extend(part.records.into_iter().map(|mut r| {
            r.id += base;
            r
        }));
    }

    let mut slots: Vec<u64> = (0..records.len() as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x9E37_79B9_7F4A_7C15));
    slots.shuffle(&mut rng);
    for (r, slot) in records.iter_mut().zip(slots) {
        r.arrival_s = slot as f64 * 1e-6;
    }
    Ok(Trace { records })
}

/// Respaces arrivals to a fixed `rate` requests per second, preserving the
/// current arrival order.
pub fn assign_arrivals(trace: &mut Trace, rate: f64) -> Result<()> {
    if rate.is_nan() || rate <= 0.0 {
        return Err(SimError::InvalidArgument(format!("arrival rate must be positive, got {rate}")));
    }
    let mut order: Vec<usize> = (0..trace.records.len()).collect();
    order.sort_by(|&a, &b| {
        trace.records[a]
            .arrival_s
            .partial_cmp(&trace.records[b].arrival_s)
            .expect("arrival times are finite")
            .then(a.cmp(&b))
    });
    for (pos, idx) in order.into_iter().enumerate() {
        trace.records[idx].arrival_s = pos as f64 / rate;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    version: u32,
}

const TRACE_FORMAT: &str = "prefillsim-trace";
const TRACE_VERSION: u32 = 1;

/// Writes a versioned header line followed by one record per line.
pub fn write_trace(trace: &Trace, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = TraceHeader { format: TRACE_FORMAT.into(), version: TRACE_VERSION };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in &trace.records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace file. A zero-line file is an empty trace; otherwise the
/// first line must be a matching header. Malformed lines report their line
/// number.
pub fn read_trace(path: &Path) -> Result<Trace> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if lineno == 1 {
            let header: TraceHeader = serde_json::from_str(&line)
                .map_err(|e| SimError::Parse { line: 1, msg: format!("bad trace header: {e}") })?;
            if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
                return Err(SimError::Parse {
                    line: 1,
                    msg: format!(
                        "unsupported trace format {}/{} (want {TRACE_FORMAT}/{TRACE_VERSION})",
                        header.format, header.version
                    ),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| SimError::Parse { line: lineno, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(Trace { records })
}
