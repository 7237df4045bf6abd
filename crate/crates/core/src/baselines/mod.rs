//! Comparison protocols instrumented identically to BECP: single-leader
//! Paxos, Raft, PBFT, and a chain-structured Avalanche variant.

pub mod avalanche;
pub mod paxos;
pub mod pbft;
pub mod raft;

pub use avalanche::{AvalancheParams, AvalancheSim};
pub use paxos::{PaxosParams, PaxosSim};
pub use pbft::{PbftParams, PbftSim};
pub use raft::{RaftParams, RaftSim};

/// Majority quorum: `floor(n / 2) + 1`.
pub(crate) fn majority(n: u32) -> u32 {
    n / 2 + 1
}
