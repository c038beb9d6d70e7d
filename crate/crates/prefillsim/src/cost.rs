//! Memory and FLOP cost model for prefill batches.
//!
//! Everything here is closed-form arithmetic over a [`ModelConfig`]: KV-cache
//! and activation footprints, weight footprints split into attention and
//! expert components, and the FLOP cost of prefilling a request whose prefix
//! may be partially cached. Byte quantities are exact `u64` values; FLOP
//! quantities are `f64`.
//!
//! The incremental cost of admitting a request is
//!
//! ```text
//! delta = prefix_cost(P - M) + suffix_cost(S, P).total
//! ```
//!
//! where `P` is the prefix length, `M <= P` the cached token count, and `S`
//! the suffix length. The scheduler charges this quantity per admission and
//! the backend simulator converts it to time.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Static shape of the served model.
///
/// `bytes_per_element` is the weight/KV precision in bytes (1 for FP8, 2 for
/// BF16). `attn_params_per_layer` is a catch-all for every non-expert
/// parameter in one layer (attention projections, norms, router); embeddings
/// are folded in as well since they are small at this scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Total transformer layers.
    pub layers: u64,
    /// Layers carrying a routed expert FFN (the trailing `moe_layers` of
    /// `layers`; dense layers, if any, come first).
    pub moe_layers: u64,
    /// Model hidden size.
    pub hidden_size: u64,
    /// Number of KV heads.
    pub kv_heads: u64,
    /// Per-head dimension.
    pub head_dim: u64,
    /// Expert FFN intermediate size.
    pub expert_intermediate: u64,
    /// Experts per MoE layer.
    pub experts: u64,
    /// Experts activated per token.
    pub top_k: u64,
    /// Bytes per weight/KV element.
    pub bytes_per_element: u64,
    /// Parameters active per token.
    pub active_params: u64,
    /// Total parameter count.
    pub total_params: u64,
    /// Non-expert parameters per layer.
    pub attn_params_per_layer: u64,
}

impl ModelConfig {
    /// 235B-total / 22B-active MoE in FP8: 94 layers, 128 experts with top-8
    /// routing, 4096 hidden, 1536 expert intermediate, 4 KV heads of dim 128.
    /// Weight arithmetic lands at ~233.9 GB, matching the published total
    /// parameter count within rounding of the non-expert tally.
    pub fn qwen3_235b_fp8() -> Self {
        ModelConfig {
            layers: 94,
            moe_layers: 94,
            hidden_size: 4096,
            kv_heads: 4,
            head_dim: 128,
            expert_intermediate: 1536,
            experts: 128,
            top_k: 8,
            bytes_per_element: 1,
            active_params: 22_000_000_000,
            total_params: 235_000_000_000,
            attn_params_per_layer: 72_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, u64); 9] = [
            ("layers", self.layers),
            ("hidden_size", self.hidden_size),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("expert_intermediate", self.expert_intermediate),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("bytes_per_element", self.bytes_per_element),
            ("active_params", self.active_params),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SimError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.moe_layers > self.layers {
            return Err(SimError::InvalidConfig(format!(
                "moe_layers {} exceeds layers {}",
                self.moe_layers, self.layers
            )));
        }
        if self.top_k > self.experts {
            return Err(SimError::InvalidConfig(format!(
                "top_k {} exceeds experts {}",
                self.top_k, self.experts
            )));
        }
        if self.active_params > self.total_params {
            return Err(SimError::InvalidConfig(format!(
                "active_params {} exceeds total_params {}",
                self.active_params, self.total_params
            )));
        }
        Ok(())
    }

    /// FLOPs per token through the active parameter set: `2 * active_params`
    /// (one multiply-accumulate per active parameter).
    pub fn flops_per_token(&self) -> f64 {
        2.0 * self.active_params as f64
    }

    /// FLOPs one token spends in the routed experts of a single MoE layer:
    /// `2 * top_k * 3 * hidden * intermediate` (gate, up, and down
    /// projections for each selected expert).
    pub fn expert_flops_per_token_layer(&self) -> f64 {
        2.0 * (self.top_k * 3 * self.hidden_size * self.expert_intermediate) as f64
    }
}

/// KV-cache bytes for `requests` sequences of `tokens_each` tokens:
/// `2 * layers * requests * tokens_each * kv_heads * head_dim * bytes`
/// (key and value planes across every layer).
pub fn kv_bytes(requests: u64, tokens_each: u64, cfg: &ModelConfig) -> u64 {
    let v = 2u128
        * cfg.layers as u128
        * requests as u128
        * tokens_each as u128
        * cfg.kv_heads as u128
        * cfg.head_dim as u128
        * cfg.bytes_per_element as u128;
    v as u64
}

/// Peak live activation bytes for a batch:
/// `2 * requests * tokens_each * top_k * expert_intermediate * bytes`,
/// the gate/up pair of the widest expert intermediate. Attention scores are
/// assumed streamed and never materialized.
pub fn activation_bytes(requests: u64, tokens_each: u64, cfg: &ModelConfig) -> u64 {
    let v = 2u128
        * requests as u128
        * tokens_each as u128
        * cfg.top_k as u128
        * cfg.expert_intermediate as u128
        * cfg.bytes_per_element as u128;
    v as u64
}

/// Weight footprint of the model, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightBytes {
    /// One expert's three projection matrices: `3 * hidden * intermediate * bytes`.
    pub expert_per_expert: u64,
    /// All experts of one MoE layer.
    pub expert_per_layer: u64,
    /// Experts across every MoE layer.
    pub expert_total: u64,
    /// Non-expert weights across every layer.
    pub attn_total: u64,
}

impl WeightBytes {
    pub fn total(&self) -> u64 {
        self.expert_total + self.attn_total
    }
}

/// Computes the weight footprint of `cfg`.
pub fn weight_bytes(cfg: &ModelConfig) -> WeightBytes {
    let expert_per_expert =
        3 * cfg.hidden_size * cfg.expert_intermediate * cfg.bytes_per_element;
    let expert_per_layer = cfg.experts * expert_per_expert;
    let expert_total = cfg.moe_layers * expert_per_layer;
    let attn_total = cfg.layers * cfg.attn_params_per_layer * cfg.bytes_per_element;
    WeightBytes { expert_per_expert, expert_per_layer, expert_total, attn_total }
}

/// FLOP cost of one prefill pass, split by term. `prefix` covers the
/// uncached prefix tokens; the three suffix terms cover the suffix FFN work,
/// suffix self-attention, and suffix-over-prefix cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostBreakdown {
    pub prefix: f64,
    pub ffn: f64,
    pub self_attn: f64,
    pub cross_attn: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.prefix + self.ffn + self.self_attn + self.cross_attn
    }
}

/// Cost of prefilling `n` fresh prefix tokens:
/// `n * flops_per_token + 2 * n^2 * hidden * layers`
/// (dense per-token work plus causal self-attention score and value
/// products, halved for causality). Zero when `n == 0`.
pub fn prefix_cost(n: u64, cfg: &ModelConfig) -> f64 {
    let n = n as f64;
    n * cfg.flops_per_token() + 2.0 * n * n * (cfg.hidden_size * cfg.layers) as f64
}

/// Quadratic-attention part of [`prefix_cost`]: `2 * n^2 * hidden * layers`.
pub fn prefix_quad_cost(n: u64, cfg: &ModelConfig) -> f64 {
    let n = n as f64;
    2.0 * n * n * (cfg.hidden_size * cfg.layers) as f64
}

/// Cost of prefilling a suffix of `suffix_len` tokens on top of a fully
/// resident prefix of `prefix_len` tokens:
///
/// ```text
/// ffn        = suffix_len * flops_per_token
/// self_attn  = 2 * suffix_len^2 * hidden * layers
/// cross_attn = 4 * suffix_len * prefix_len * hidden * layers
/// ```
///
/// With `prefix_len == 0` the total collapses to `prefix_cost(suffix_len)`.
pub fn suffix_cost(suffix_len: u64, prefix_len: u64, cfg: &ModelConfig) -> CostBreakdown {
    let s = suffix_len as f64;
    let p = prefix_len as f64;
    let hl = (cfg.hidden_size * cfg.layers) as f64;
    CostBreakdown {
        prefix: 0.0,
        ffn: s * cfg.flops_per_token(),
        self_attn: 2.0 * s * s * hl,
        cross_attn: 4.0 * s * p * hl,
    }
}

/// Incremental cost of a request with `prefix_len` prefix tokens of which
/// `cached_len` are already resident, plus a `suffix_len` suffix:
/// `prefix_cost(prefix_len - cached_len) + suffix_cost(suffix_len, prefix_len).total`.
///
/// Rejects `cached_len > prefix_len`.
pub fn delta_cost(
    prefix_len: u64,
    cached_len: u64,
    suffix_len: u64,
    cfg: &ModelConfig,
) -> Result<CostBreakdown> {
    if cached_len > prefix_len {
        return Err(SimError::InvalidArgument(format!(
            "cached_len {cached_len} exceeds prefix_len {prefix_len}"
        )));
    }
    let mut c = suffix_cost(suffix_len, prefix_len, cfg);
    c.prefix = prefix_cost(prefix_len - cached_len, cfg);
    Ok(c)
}

/// Piecewise-linear GEMM efficiency curve. Efficiency ramps linearly with
/// the token batch up to `tau_sat` tokens, saturating at `eta_max`, and is
/// floored at `eta_min` for degenerate batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyCurve {
    pub eta_max: f64,
    pub eta_min: f64,
    pub tau_sat: u64,
}

impl EfficiencyCurve {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max <= 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "efficiency bounds must satisfy 0 < eta_min <= eta_max <= 1, got {} / {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.tau_sat == 0 {
            return Err(SimError::InvalidConfig("tau_sat must be positive".into()));
        }
        Ok(())
    }
}

/// Achieved fraction of peak FLOPs for a per-device batch of `tokens`:
/// `max(eta_min, eta_max * min(1, tokens / tau_sat))`.
pub fn gemm_efficiency(tokens: u64, curve: &EfficiencyCurve) -> f64 {
    let ramp = (tokens as f64 / curve.tau_sat as f64).min(1.0);
    (curve.eta_max * ramp).max(curve.eta_min)
}
