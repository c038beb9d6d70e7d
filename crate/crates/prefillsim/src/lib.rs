//! Deterministic simulator and scheduler for prefill-only serving of
//! Mixture-of-Experts models.
//!
//! The crate splits into an analytical layer and an executable layer. The
//! analytical layer prices prefill work in closed form: [`cost`] covers
//! FLOP and memory footprints, [`comm`] the per-strategy collective
//! traffic. The executable layer runs those prices through time: [`backend`]
//! simulates per-device timelines for each parallelization strategy,
//! including the async weight-streaming one whose transfers hide behind
//! compute, [`blocks`] and [`router`] implement prefix-cache-aware,
//! compute-balanced request routing over simulated engines, [`workload`]
//! generates the synthetic traces, and [`report`] drives full
//! strategy-by-degree sweeps into CSV or JSONL reports.
//!
//! Everything is deterministic given the configured seeds; there is no
//! wall-clock, GPU, or network dependency anywhere.

pub mod backend;
pub mod blocks;
pub mod comm;
pub mod cost;
pub mod error;
pub mod report;
pub mod router;
pub mod workload;

pub use comm::Strategy;
pub use error::{Result, SimError};
