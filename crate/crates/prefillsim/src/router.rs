//! Prefix-, compute-, and overlap-aware request routing.
//!
//! The router owns one load counter and one [`BlockTable`] per engine. Each
//! scheduling round walks the queue in arrival order, sends every request to
//! the unsaturated engine with the longest block-hash prefix match (ties by
//! lower load, then lower index), charges that engine the request's
//! incremental cost, and stops once every engine's load crosses the
//! saturation threshold. Engines report back through an ordered event
//! stream: stored and evicted blocks keep the tables honest, progress events
//! discharge load, and calibration events install the threshold.
//!
//! Load is charged in cost-model FLOPs (the delta includes quadratic
//! attention terms) but the engine reports progress in tokens. To keep the
//! counters drift-free the default decay prorates each request's recorded
//! delta by its executed token fraction, discharging the exact remainder on
//! the final progress event; the literal per-token decay from the serving
//! system this mirrors is available as [`DecayMode::LinearFtok`].

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::backend::ThresholdCalibration;
use crate::blocks::BlockTable;
use crate::cost::{delta_cost, kv_bytes, prefix_quad_cost, ModelConfig};
use crate::error::{Result, SimError};

/// One prefill request as the router sees it. `prefix_blocks` is the hash
/// chain of the full blocks inside `prefix_len`; `group_id` labels requests
/// that share a prefix (siblings reformulated from one task).
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub arrival_s: f64,
    pub group_id: u64,
    pub prefix_len: u64,
    pub suffix_len: u64,
    pub candidate_count: u32,
    pub prefix_blocks: Vec<u64>,
}

impl Request {
    pub fn total_tokens(&self) -> u64 {
        self.prefix_len + self.suffix_len
    }

    fn validate(&self, block_size: u64) -> Result<()> {
        let expect = self.prefix_len / block_size;
        if self.prefix_blocks.len() as u64 != expect {
            return Err(SimError::InvalidArgument(format!(
                "request {} carries {} block hashes, prefix of {} tokens needs {}",
                self.id,
                self.prefix_blocks.len(),
                self.prefix_len,
                expect
            )));
        }
        Ok(())
    }
}

/// How progress events discharge load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Subtract the request's recorded delta in proportion to its executed
    /// tokens, with the final event discharging the exact remainder. Keeps
    /// enqueue and decay in the same units, so loads never drift.
    #[default]
    ProratedDelta,
    /// Subtract `tokens * f_tok` literally, floored at zero. Matches the
    /// per-token bookkeeping of the serving system this models, but quadratic
    /// enqueue terms then decay at the linear rate.
    LinearFtok,
}

/// Where a threshold value came from; manual pins beat calibrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSource {
    Fallback(f64),
    Calibrated(ThresholdCalibration),
    Manual(f64),
}

/// Feedback from an engine, applied strictly in stream order.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent {
    /// The engine materialized these blocks; they become committed.
    BlocksStored { engine: usize, hashes: Vec<u64> },
    /// The engine dropped these blocks from its cache.
    BlocksEvicted { engine: usize, hashes: Vec<u64> },
    /// `tokens` of the request's admitted work finished prefilling.
    Progress { request: u64, tokens: u64 },
    /// A fresh threshold calibration.
    Threshold(ThresholdCalibration),
    /// The request was withdrawn; its unexecuted load is refunded.
    RequestAborted { request: u64 },
}

/// A routing decision for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub request: Request,
    pub engine: usize,
    /// Prefix tokens served from cache (block-granular, capped at the
    /// prefix length).
    pub matched_tokens: u64,
    /// Incremental cost charged to the engine.
    pub delta_flops: f64,
    /// The quadratic-attention share of `delta_flops`.
    pub quad_flops: f64,
    /// Tokens the engine must actually prefill: uncached prefix plus suffix.
    pub new_tokens: u64,
}

struct InFlight {
    engine: usize,
    delta: f64,
    total_tokens: u64,
    executed_tokens: u64,
    discharged: f64,
}

struct Engine {
    load: f64,
    table: BlockTable,
}

/// Router state for one cluster: per-engine loads and block tables, the
/// saturation threshold, and the in-flight ledger backing decay and refunds.
pub struct RouterState {
    engines: Vec<Engine>,
    threshold: f64,
    pinned: bool,
    block_size: u64,
    f_tok: f64,
    cache_enabled: bool,
    decay: DecayMode,
    inflight: HashMap<u64, InFlight>,
}

impl RouterState {
    /// `cache_budget_bytes` caps each engine's committed blocks, costed as
    /// the KV bytes of one `block_size`-token block. `cache_enabled = false`
    /// models KV-cache-free serving: nothing matches and nothing is
    /// remembered, so routing degrades to pure load balancing.
    pub fn new(
        engines: usize,
        block_size: u64,
        cache_budget_bytes: u64,
        cfg: &ModelConfig,
        fallback_threshold: f64,
        cache_enabled: bool,
        decay: DecayMode,
    ) -> Result<Self> {
        if engines == 0 {
            return Err(SimError::InvalidConfig("router needs at least one engine".into()));
        }
        if block_size == 0 {
            return Err(SimError::InvalidConfig("block_size must be positive".into()));
        }
        if fallback_threshold.is_nan() || fallback_threshold <= 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "threshold must be positive, got {fallback_threshold}"
            )));
        }
        let block_bytes = kv_bytes(1, block_size, cfg);
        Ok(RouterState {
            engines: (0..engines)
                .map(|_| Engine { load: 0.0, table: BlockTable::new(cache_budget_bytes, block_bytes) })
                .collect(),
            threshold: fallback_threshold,
            pinned: false,
            block_size,
            f_tok: cfg.flops_per_token(),
            cache_enabled,
            decay,
            inflight: HashMap::new(),
        })
    }

    pub fn num_engines(&self) -> usize {
        self.engines.len()
    }

    pub fn load(&self, engine: usize) -> f64 {
        self.engines[engine].load
    }

    pub fn loads(&self) -> Vec<f64> {
        self.engines.iter().map(|e| e.load).collect()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn table(&self, engine: usize) -> &BlockTable {
        &self.engines[engine].table
    }

    /// Installs a threshold. Manual values pin: later calibrations and
    /// fallbacks are ignored. Nonpositive values are rejected from any
    /// source.
    pub fn install_threshold(&mut self, source: ThresholdSource) -> Result<()> {
        let (value, pin) = match source {
            ThresholdSource::Manual(t) => (t, true),
            ThresholdSource::Calibrated(c) => (c.threshold_flops, false),
            ThresholdSource::Fallback(t) => (t, false),
        };
        if value.is_nan() || value <= 0.0 {
            return Err(SimError::InvalidArgument(format!(
                "threshold must be positive, got {value}"
            )));
        }
        if pin {
            self.threshold = value;
            self.pinned = true;
        } else if !self.pinned {
            self.threshold = value;
        }
        Ok(())
    }

    /// Routes queued requests until every engine saturates or the queue
    /// drains, returning the assignments in arrival order. Unrouted
    /// requests stay queued for the next round. Loads carry over; an engine
    /// already at or past the threshold takes no requests this round.
    pub fn schedule_round(
        &mut self,
        queue: &mut VecDeque<Request>,
        cfg: &ModelConfig,
    ) -> Result<Vec<Assignment>> {
        let mut active: Vec<usize> =
            (0..self.engines.len()).filter(|&i| self.engines[i].load < self.threshold).collect();
        let mut out = Vec::new();
        while !active.is_empty() {
            let Some(front) = queue.front() else { break };
            front.validate(self.block_size)?;
            let req = queue.pop_front().expect("front checked above");

            // Longest match over unsaturated engines; ties prefer the
            // lighter engine, then the lower index. Scanning in index order
            // with strict improvement realizes both tie-breaks.
            let mut best = active[0];
            let mut best_m = 0u64;
            let mut best_load = f64::INFINITY;
            for &e in &active {
                let m = if self.cache_enabled {
                    self.engines[e].table.longest_match(&req.prefix_blocks)
                } else {
                    0
                };
                if m > best_m || (m == best_m && self.engines[e].load < best_load) {
                    best = e;
                    best_m = m;
                    best_load = self.engines[e].load;
                }
            }

            let matched_tokens = (best_m * self.block_size).min(req.prefix_len);
            let d = delta_cost(req.prefix_len, matched_tokens, req.suffix_len, cfg)?;
            let delta = d.total();
            let quad =
                prefix_quad_cost(req.prefix_len - matched_tokens, cfg) + d.self_attn + d.cross_attn;
            let new_tokens = (req.prefix_len - matched_tokens) + req.suffix_len;

            self.engines[best].load += delta;
            if self.cache_enabled {
                for h in &req.prefix_blocks {
                    if !self.engines[best].table.contains(*h) {
                        self.engines[best].table.pend(*h, req.id);
                    }
                }
            }
            if new_tokens > 0 {
                if self.inflight.contains_key(&req.id) {
                    return Err(SimError::InvalidArgument(format!(
                        "request id {} routed twice",
                        req.id
                    )));
                }
                self.inflight.insert(
                    req.id,
                    InFlight {
                        engine: best,
                        delta,
                        total_tokens: new_tokens,
                        executed_tokens: 0,
                        discharged: 0.0,
                    },
                );
            }
            if self.engines[best].load >= self.threshold {
                active.retain(|&e| e != best);
            }
            out.push(Assignment {
                request: req,
                engine: best,
                matched_tokens,
                delta_flops: delta,
                quad_flops: quad,
                new_tokens,
            });
        }
        Ok(out)
    }

    /// Applies one engine event. Events must arrive in the engine's emission
    /// order; the stream is the only channel that mutates tables and decays
    /// load.
    pub fn on_engine_event(&mut self, event: EngineEvent) -> Result<()> {
        match event {
            EngineEvent::BlocksStored { engine, hashes } => {
                self.check_engine(engine)?;
                if self.cache_enabled {
                    for h in hashes {
                        // Unknown hashes insert as well: the engine is
                        // authoritative about what it materialized.
                        self.engines[engine].table.store(h);
                    }
                }
                Ok(())
            }
            EngineEvent::BlocksEvicted { engine, hashes } => {
                self.check_engine(engine)?;
                for h in hashes {
                    self.engines[engine].table.evict(h);
                }
                Ok(())
            }
            EngineEvent::Progress { request, tokens } => self.progress(request, tokens),
            EngineEvent::Threshold(cal) => {
                self.install_threshold(ThresholdSource::Calibrated(cal))
            }
            EngineEvent::RequestAborted { request } => {
                let Some(fl) = self.inflight.remove(&request) else {
                    // Aborting something already finished (or never routed)
                    // is a no-op, matching an engine that races a cancel.
                    return Ok(());
                };
                let refund = (fl.delta - fl.discharged).max(0.0);
                let load = &mut self.engines[fl.engine].load;
                *load = (*load - refund).max(0.0);
                self.engines[fl.engine].table.abort(request);
                Ok(())
            }
        }
    }

    fn check_engine(&self, engine: usize) -> Result<()> {
        if engine >= self.engines.len() {
            return Err(SimError::InvalidArgument(format!(
                "engine {engine} out of range ({} engines)",
                self.engines.len()
            )));
        }
        Ok(())
    }

    fn progress(&mut self, request: u64, tokens: u64) -> Result<()> {
        let fl = self.inflight.get_mut(&request).ok_or_else(|| {
            SimError::InvalidArgument(format!("progress for unknown request {request}"))
        })?;
        let remaining = fl.total_tokens - fl.executed_tokens;
        let step = tokens.min(remaining);
        let done = fl.executed_tokens + step >= fl.total_tokens;
        let discharge = match self.decay {
            DecayMode::ProratedDelta => {
                if done {
                    fl.delta - fl.discharged
                } else {
                    fl.delta * step as f64 / fl.total_tokens as f64
                }
            }
            DecayMode::LinearFtok => tokens as f64 * self.f_tok,
        };
        fl.executed_tokens += step;
        fl.discharged += discharge.min(fl.delta - fl.discharged);
        let engine = fl.engine;
        if done {
            self.inflight.remove(&request);
        }
        let load = &mut self.engines[engine].load;
        *load = (*load - discharge).max(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::block_hash_chain;
    use crate::cost::{prefix_cost, suffix_cost};
    use std::collections::VecDeque;

    const BS: u64 = 16;

    fn cfg() -> ModelConfig {
        ModelConfig::qwen3_235b_fp8()
    }

    fn group_tokens(group: u64, len: u64) -> Vec<u64> {
        (0..len).map(|j| group.wrapping_mul(0x9E37_79B9).wrapping_add(j * j + 1)).collect()
    }

    /// A request whose prefix tokens derive from its group, so same-group
    /// requests share the whole chain.
    fn req(id: u64, group: u64, prefix_len: u64, suffix_len: u64) -> Request {
        let chain = block_hash_chain(&group_tokens(group, prefix_len), BS);
        Request {
            id,
            arrival_s: 0.0,
            group_id: group,
            prefix_len,
            suffix_len,
            candidate_count: 1,
            prefix_blocks: chain,
        }
    }

    fn router(engines: usize, threshold: f64) -> RouterState {
        RouterState::new(engines, BS, u64::MAX, &cfg(), threshold, true, DecayMode::default())
            .unwrap()
    }

    #[test]
    fn distinct_requests_spread_by_load_then_index() {
        let mut r = router(4, 1e30);
        let mut q: VecDeque<Request> =
            (0..4).map(|i| req(i, 100 + i, 1024, 0)).collect();
        let out = r.schedule_round(&mut q, &cfg()).unwrap();
        let engines: Vec<usize> = out.iter().map(|a| a.engine).collect();
        assert_eq!(engines, vec![0, 1, 2, 3]);
        assert!(q.is_empty());
    }

    #[test]
    fn sibling_burst_lands_on_one_engine() {
        let c = cfg();
        let mut r = router(4, 1e30);
        let mut q: VecDeque<Request> = (0..10).map(|i| req(i, 7, 4096, 16)).collect();
        let out = r.schedule_round(&mut q, &c).unwrap();
        assert!(out.iter().all(|a| a.engine == 0), "pending seeding must co-locate");
        assert_eq!(out[0].matched_tokens, 0);
        for a in &out[1..] {
            assert_eq!(a.matched_tokens, 4096, "later siblings match the full prefix");
            assert_eq!(a.new_tokens, 16);
        }
        // One prefix charge plus ten suffix charges, nothing else.
        let expect = prefix_cost(4096, &c) + 10.0 * suffix_cost(16, 4096, &c).total();
        let total: f64 = r.loads().iter().sum();
        assert!((total - expect).abs() < 1e-6 * expect, "got {total}, want {expect}");
    }

    #[test]
    fn saturated_engine_spills_to_next_best() {
        let c = cfg();
        let one = delta_cost(4096, 0, 16, &c).unwrap().total();
        // Threshold admits one fresh sibling per engine before saturating.
        let mut r = router(3, one * 0.9);
        let mut q: VecDeque<Request> = (0..30).map(|i| req(i, 7, 4096, 16)).collect();
        let out = r.schedule_round(&mut q, &c).unwrap();
        // Engine 0 takes the first request and saturates; the burst then
        // spills to engine 1, pays the prefix once there, and so on.
        assert_eq!(out[0].engine, 0);
        assert_eq!(out.len(), 3, "each engine saturates after one fresh prefix");
        assert_eq!(out[1].engine, 1);
        assert_eq!(out[2].engine, 2);
        assert!(!q.is_empty(), "the rest wait for the next round");
        assert_eq!(q.front().unwrap().id, 3, "arrival order preserved");
    }

    #[test]
    fn round_ends_with_loads_in_the_band() {
        let c = cfg();
        let t = 5e15;
        let mut r = router(4, t);
        let mut q: VecDeque<Request> = (0..500).map(|i| req(i, i, 2048, 0)).collect();
        let out = r.schedule_round(&mut q, &c).unwrap();
        assert!(!q.is_empty(), "queue must remain nonempty for the band check");
        let max_delta = out.iter().map(|a| a.delta_flops).fold(0.0, f64::max);
        for e in 0..4 {
            let l = r.load(e);
            assert!(l >= t && l <= t + max_delta, "engine {e} load {l} outside band");
        }
    }

    #[test]
    fn no_active_engines_means_no_assignments() {
        let c = cfg();
        let mut r = router(2, 1.0);
        let mut q: VecDeque<Request> = (0..2).map(|i| req(i, i, 256, 0)).collect();
        let first = r.schedule_round(&mut q, &c).unwrap();
        assert_eq!(first.len(), 2, "1 FLOP threshold saturates on the first request");
        let mut q2: VecDeque<Request> = (10..15).map(|i| req(i, i, 256, 0)).collect();
        let second = r.schedule_round(&mut q2, &c).unwrap();
        assert!(second.is_empty());
        assert_eq!(q2.len(), 5, "requests stay queued while everything is saturated");
    }

    #[test]
    fn invalid_chain_is_rejected() {
        let c = cfg();
        let mut r = router(1, 1e30);
        let mut bad = req(1, 1, 256, 0);
        bad.prefix_blocks.pop();
        let mut q = VecDeque::from([bad]);
        assert!(r.schedule_round(&mut q, &c).is_err());
    }

    #[test]
    fn cache_free_mode_balances_without_affinity() {
        let c = cfg();
        let mut r =
            RouterState::new(4, BS, u64::MAX, &c, 1e30, false, DecayMode::default()).unwrap();
        let mut q: VecDeque<Request> = (0..8).map(|i| req(i, 7, 1024, 16)).collect();
        let out = r.schedule_round(&mut q, &c).unwrap();
        for a in &out {
            assert_eq!(a.matched_tokens, 0, "no matches without a cache");
        }
        let engines: Vec<usize> = out.iter().map(|a| a.engine).collect();
        assert_eq!(engines, vec![0, 1, 2, 3, 0, 1, 2, 3], "pure load balancing");
        assert_eq!(r.table(0).pending_len(), 0, "nothing is promised either");
    }

    #[test]
    fn stored_blocks_promote_and_keep_matching() {
        let c = cfg();
        let mut r = router(2, 1e30);
        let mut q = VecDeque::from([req(1, 9, 256, 16)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        let hashes = out[0].request.prefix_blocks.clone();
        assert!(r.table(0).pending_len() > 0);
        r.on_engine_event(EngineEvent::BlocksStored { engine: 0, hashes }).unwrap();
        assert_eq!(r.table(0).pending_len(), 0);
        assert_eq!(r.table(0).committed_len(), 16);

        let mut q = VecDeque::from([req(2, 9, 256, 16)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        assert_eq!(out[0].engine, 0);
        assert_eq!(out[0].matched_tokens, 256);
    }

    #[test]
    fn prorated_decay_discharges_exactly() {
        let c = cfg();
        let mut r = router(1, 1e30);
        let mut q = VecDeque::from([req(1, 3, 1024, 0)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        let delta = out[0].delta_flops;
        assert_eq!(r.load(0), delta);
        r.on_engine_event(EngineEvent::Progress { request: 1, tokens: 512 }).unwrap();
        assert_eq!(r.load(0), delta * 0.5, "half the tokens discharge half the delta");
        r.on_engine_event(EngineEvent::Progress { request: 1, tokens: 512 }).unwrap();
        assert_eq!(r.load(0), 0.0, "the final event discharges the exact remainder");
        assert!(
            r.on_engine_event(EngineEvent::Progress { request: 1, tokens: 1 }).is_err(),
            "the ledger entry is gone once the request completes"
        );
    }

    #[test]
    fn linear_decay_floors_at_zero() {
        let c = cfg();
        let mut r =
            RouterState::new(1, BS, u64::MAX, &c, 1e30, true, DecayMode::LinearFtok).unwrap();
        let mut q = VecDeque::from([req(1, 3, 4096, 0)]);
        r.schedule_round(&mut q, &c).unwrap();
        // 4096 tokens at f_tok undershoots the quadratic-inclusive delta.
        r.on_engine_event(EngineEvent::Progress { request: 1, tokens: 4096 }).unwrap();
        let left = r.load(0);
        assert!(left > 0.0, "linear decay leaves the quadratic share behind");
        let mut q = VecDeque::from([req(2, 4, 4096, 0)]);
        r.schedule_round(&mut q, &c).unwrap();
        r.on_engine_event(EngineEvent::Progress { request: 2, tokens: u64::MAX / 2 }).unwrap();
        assert!(r.load(0) >= 0.0, "oversized progress floors at zero");
    }

    #[test]
    fn threshold_sources_respect_pinning() {
        let mut r = router(1, 1e30);
        let cal = ThresholdCalibration { threshold_flops: 5e12, t_c: 1.0, t_e: 1.0, c_dummy: 1.0 };
        r.on_engine_event(EngineEvent::Threshold(cal)).unwrap();
        assert_eq!(r.threshold(), 5e12);

        r.install_threshold(ThresholdSource::Manual(7e12)).unwrap();
        assert_eq!(r.threshold(), 7e12);
        r.on_engine_event(EngineEvent::Threshold(cal)).unwrap();
        assert_eq!(r.threshold(), 7e12, "calibration must not override a pin");
        r.install_threshold(ThresholdSource::Fallback(1e12)).unwrap();
        assert_eq!(r.threshold(), 7e12);

        let bad = ThresholdCalibration { threshold_flops: 0.0, t_c: 1.0, t_e: 1.0, c_dummy: 0.0 };
        assert!(r.on_engine_event(EngineEvent::Threshold(bad)).is_err());
        assert!(r.install_threshold(ThresholdSource::Manual(-1.0)).is_err());
    }

    #[test]
    fn abort_refunds_load_and_withdraws_pending() {
        let c = cfg();
        let mut r = router(2, 1e30);
        let mut q = VecDeque::from([req(1, 5, 512, 0)]);
        r.schedule_round(&mut q, &c).unwrap();
        assert!(r.load(0) > 0.0);
        r.on_engine_event(EngineEvent::RequestAborted { request: 1 }).unwrap();
        assert_eq!(r.load(0), 0.0);
        // The aborted request's pending blocks are gone, so a sibling no
        // longer has any affinity for engine 0.
        let mut q = VecDeque::from([req(2, 5, 512, 0)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        assert_eq!(out[0].matched_tokens, 0);

        // Partial progress then abort refunds only the remainder.
        let mut q = VecDeque::from([req(3, 6, 1024, 0)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        let delta = out[0].delta_flops;
        r.on_engine_event(EngineEvent::Progress { request: 3, tokens: 256 }).unwrap();
        let mid = r.load(out[0].engine);
        assert!((mid - delta * 0.75).abs() < 1e-6 * delta);
        r.on_engine_event(EngineEvent::RequestAborted { request: 3 }).unwrap();
        assert_eq!(r.load(out[0].engine), 0.0);
        // Aborting twice is a harmless no-op.
        r.on_engine_event(EngineEvent::RequestAborted { request: 3 }).unwrap();
    }

    #[test]
    fn fully_cached_zero_work_requests_need_no_progress() {
        let c = cfg();
        let mut r = router(1, 1e30);
        let mut q = VecDeque::from([req(1, 8, 256, 0)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        r.on_engine_event(EngineEvent::BlocksStored {
            engine: 0,
            hashes: out[0].request.prefix_blocks.clone(),
        })
        .unwrap();
        r.on_engine_event(EngineEvent::Progress { request: 1, tokens: 256 }).unwrap();

        let mut q = VecDeque::from([req(2, 8, 256, 0)]);
        let out = r.schedule_round(&mut q, &c).unwrap();
        assert_eq!(out[0].new_tokens, 0);
        assert_eq!(out[0].delta_flops, 0.0);
        assert!(
            r.on_engine_event(EngineEvent::Progress { request: 2, tokens: 1 }).is_err(),
            "zero-work requests never enter the ledger"
        );
    }

    #[test]
    fn duplicate_request_ids_are_rejected() {
        let c = cfg();
        let mut r = router(2, 1e30);
        let mut q = VecDeque::from([req(1, 1, 256, 0), req(1, 2, 256, 0)]);
        assert!(r.schedule_round(&mut q, &c).is_err());
    }
}
