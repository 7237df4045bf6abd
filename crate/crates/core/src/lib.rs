//! Deterministic discrete-event simulation of blockchain consensus protocols.
//!
//! The crate implements BECP (Blockchain Epidemic Consensus Protocol) — an
//! epidemic consensus built from three cooperating sub-protocols (system size
//! estimation, a peer-sampling node cache, and a per-block phase-transition
//! state machine) — together with four baselines instrumented the same way:
//! single-leader Paxos, Raft, PBFT, and a chain-structured Avalanche variant.
//!
//! Everything runs on a single-threaded virtual-time event loop
//! ([`engine`]), so a `(config, seed)` pair always reproduces the same run,
//! message for message. The [`harness`] module wraps the protocols in an
//! experiment runner that collects throughput, communication-overhead, and
//! consensus-latency metrics and emits CSV/JSON reports.

pub mod baselines;
pub mod becp;
pub mod block;
pub mod engine;
pub mod harness;
pub mod membership;

pub use block::{Block, BlockRef, Height, GENESIS, GENESIS_ORIGIN};
pub use engine::{Engine, LatencyModel, NodeId, Protocol, SimTime};
pub use harness::{
    avg_latency, overhead, run_experiment, run_sweep, throughput, ExperimentReport, ProtocolKind,
    SimConfig,
};
