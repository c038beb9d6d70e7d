//! Communication volumes and link timing.
//!
//! Each parallel strategy pays a fixed on-path collective volume per device
//! per layer, assuming ring-style implementations and ignoring routing
//! imbalance (imbalance affects compute time, which the backend models
//! separately). The async expert-streaming strategy pays nothing on-path;
//! its background device-to-device gather and host-to-device prefetch
//! volumes are exposed by [`asyncep_gather_bytes`] and
//! [`offload_h2d_bytes`].
//!
//! All byte results are exact integers. Ratios of the form `(P-1)/P` are
//! computed by multiplying the full product by `P-1` first and then floor
//! dividing by `P`, in 128-bit intermediates, so nothing overflows or
//! truncates early.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{weight_bytes, ModelConfig};
use crate::error::{Result, SimError};

/// How attention and expert FFN layers are each sharded across `P` devices.
///
/// The first half of the name is the attention scheme, the second half the
/// expert scheme. External (config/CLI) names are the lowercase forms,
/// `"dp_dp"` through `"dp_asyncep"`, with `"dp_asyncep+offload"` selecting
/// host-offloaded expert storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Full replication: every device holds the whole model and serves its
    /// own requests. No communication, maximal memory.
    DpDp,
    /// Data-parallel attention over tensor-parallel experts.
    DpTp,
    /// Data-parallel attention over expert-parallel FFNs (all-to-all
    /// dispatch and combine of the top-k routed tokens).
    DpEp,
    /// Tensor parallelism everywhere.
    TpTp,
    /// Tensor-parallel attention over expert-parallel FFNs.
    TpEp,
    /// Pipeline parallelism with equal layer partitions.
    PpPp,
    /// Sequence-parallel attention over tensor-parallel experts.
    SpTp,
    /// Sequence-parallel attention over expert-parallel FFNs.
    SpEp,
    /// Data-parallel attention with experts streamed in the background
    /// (device-to-device all-gather, plus host-to-device prefetch when
    /// `offload` is set). `window` is the number of upcoming layers whose
    /// expert shards are kept resident in offload mode.
    DpAsyncEp {
        offload: bool,
        window: u32,
    },
}

impl Strategy {
    /// The async streaming variant with experts resident in device memory.
    pub const ASYNC_D2D: Strategy = Strategy::DpAsyncEp { offload: false, window: 2 };

    /// The async streaming variant with experts offloaded to host memory.
    pub const ASYNC_OFFLOAD: Strategy = Strategy::DpAsyncEp { offload: true, window: 2 };

    /// True when attention is data-parallel, which means every device runs
    /// an independent engine with its own requests and KV cache.
    pub fn is_dp_attention(&self) -> bool {
        matches!(
            self,
            Strategy::DpDp | Strategy::DpTp | Strategy::DpEp | Strategy::DpAsyncEp { .. }
        )
    }

    /// True for synchronous expert parallelism, where a skewed expert load
    /// turns into a per-layer straggler.
    pub fn is_sync_ep(&self) -> bool {
        matches!(self, Strategy::DpEp | Strategy::TpEp | Strategy::SpEp)
    }

    pub fn is_async(&self) -> bool {
        matches!(self, Strategy::DpAsyncEp { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::DpAsyncEp { offload: true, window } = self {
            if *window < 1 {
                return Err(SimError::InvalidConfig(
                    "dp_asyncep offload window must be at least 1 layer".into(),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Strategy::DpDp => "dp_dp",
            Strategy::DpTp => "dp_tp",
            Strategy::DpEp => "dp_ep",
            Strategy::TpTp => "tp_tp",
            Strategy::TpEp => "tp_ep",
            Strategy::PpPp => "pp_pp",
            Strategy::SpTp => "sp_tp",
            Strategy::SpEp => "sp_ep",
            Strategy::DpAsyncEp { offload: false, .. } => "dp_asyncep",
            Strategy::DpAsyncEp { offload: true, .. } => "dp_asyncep+offload",
        };
        f.write_str(name)
    }
}

impl FromStr for Strategy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dp_dp" => Strategy::DpDp,
            "dp_tp" => Strategy::DpTp,
            "dp_ep" => Strategy::DpEp,
            "tp_tp" => Strategy::TpTp,
            "tp_ep" => Strategy::TpEp,
            "pp_pp" => Strategy::PpPp,
            "sp_tp" => Strategy::SpTp,
            "sp_ep" => Strategy::SpEp,
            "dp_asyncep" => Strategy::ASYNC_D2D,
            "dp_asyncep+offload" => Strategy::ASYNC_OFFLOAD,
            other => {
                return Err(SimError::InvalidConfig(format!(
                    "unknown strategy {other:?}; expected one of dp_dp, dp_tp, dp_ep, \
                     tp_tp, tp_ep, pp_pp, sp_tp, sp_ep, dp_asyncep, dp_asyncep+offload"
                )))
            }
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Two-class link model: an NVLink-class device-to-device fabric and a
/// PCIe-class host-to-device path, each a flat effective bandwidth plus a
/// per-transfer latency floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Effective unidirectional device-to-device bandwidth, bytes/second.
    pub nvlink_bw: f64,
    /// Effective host-to-device bandwidth, bytes/second.
    pub pcie_bw: f64,
    /// Seconds added to every transfer regardless of size.
    pub latency_floor: f64,
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        if self.nvlink_bw.is_nan()
            || self.pcie_bw.is_nan()
            || self.nvlink_bw <= 0.0
            || self.pcie_bw <= 0.0
        {
            return Err(SimError::InvalidConfig(format!(
                "link bandwidths must be positive, got nvlink {} pcie {}",
                self.nvlink_bw, self.pcie_bw
            )));
        }
        if self.latency_floor.is_nan() || self.latency_floor < 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "latency_floor must be nonnegative, got {}",
                self.latency_floor
            )));
        }
        Ok(())
    }
}

/// On-path collective bytes one device moves per layer for a batch of
/// `batch * tokens_each` tokens under `strategy` at parallel degree `p`.
///
/// The per-strategy volumes, writing `R = (P-1)/P`, `H` for hidden size,
/// `k` for top-k, and `b` for element bytes:
///
/// | strategy   | bytes per device per layer              |
/// |------------|------------------------------------------|
/// | dp_dp      | 0                                        |
/// | dp_tp      | 4 R B S H b   (two all-reduce halves)    |
/// | dp_ep      | 4 k R B S H b (all-to-all, top-k routed) |
/// | tp_tp      | 4 R B S H b                              |
/// | tp_ep      | (2 + 4k) R B S H b                       |
/// | pp_pp      | 2 B S H b     (stage boundary send/recv) |
/// | sp_tp      | (2 Nkv dh + 4 H) R B S b                 |
/// | sp_ep      | (2 Nkv dh + 4 k H) R B S b               |
/// | dp_asyncep | 0 (weight traffic is off the critical path) |
///
/// The sequence-parallel rows combine a KV gather term with the expert
/// activation term, charged unconditionally (the interaction with
/// KV-cache-free execution is not modeled here).
pub fn per_layer_comm_bytes(
    strategy: Strategy,
    p: u64,
    batch: u64,
    tokens_each: u64,
    cfg: &ModelConfig,
) -> u64 {
    assert!(p >= 1, "parallel degree must be at least 1");
    let bs = batch as u128 * tokens_each as u128;
    let h = cfg.hidden_size as u128;
    let b = cfg.bytes_per_element as u128;
    let k = cfg.top_k as u128;
    let kv = 2 * cfg.kv_heads as u128 * cfg.head_dim as u128;
    let pm1 = (p - 1) as u128;
    let p = p as u128;
    let v = match strategy {
        Strategy::DpDp | Strategy::DpAsyncEp { .. } => 0,
        Strategy::DpTp | Strategy::TpTp => 4 * bs * h * b * pm1 / p,
        Strategy::DpEp => 4 * k * bs * h * b * pm1 / p,
        Strategy::TpEp => (2 + 4 * k) * bs * h * b * pm1 / p,
        Strategy::PpPp => 2 * bs * h * b,
        Strategy::SpTp => (kv + 4 * h) * bs * b * pm1 / p,
        Strategy::SpEp => (kv + 4 * k * h) * bs * b * pm1 / p,
    };
    v as u64
}

/// Background device-to-device bytes one device receives per layer under
/// async expert streaming: `expert_per_layer * (P-1) / P`, since each device
/// already holds a 1/P shard of the next layer's experts.
pub fn asyncep_gather_bytes(p: u64, cfg: &ModelConfig) -> u64 {
    assert!(p >= 1, "parallel degree must be at least 1");
    let epl = weight_bytes(cfg).expert_per_layer as u128;
    (epl * (p - 1) as u128 / p as u128) as u64
}

/// Host-to-device prefetch bytes one device pulls per layer in offload mode:
/// `expert_per_layer / P` (each device restores only its own shard; peers
/// supply the rest over the device fabric).
pub fn offload_h2d_bytes(p: u64, cfg: &ModelConfig) -> u64 {
    assert!(p >= 1, "parallel degree must be at least 1");
    weight_bytes(cfg).expert_per_layer / p
}

/// Seconds to move `bytes` over a link: `latency_floor + bytes / link_bw`.
pub fn transfer_time(bytes: u64, link_bw: f64, latency_floor: f64) -> f64 {
    latency_floor + bytes as f64 / link_bw
}
