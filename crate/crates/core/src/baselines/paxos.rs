//! Single-decree Paxos per height with a fixed leader (node 0).
//!
//! Each instance runs five one-way legs: prepare out, promise in, accept
//! out, accepted in, learn out — `5 * (n - 1)` messages. The promise phase
//! runs at every round. A majority is required to advance a phase; under
//! the benign reliable-network assumption the leader collects every reply
//! before advancing, and the block is created once the promise gather
//! completes (the accept phase proposes it). A node confirms the block when
//! it learns it; the leader confirms when the accepted gather completes and
//! waits `T_block` from there before the next instance.

use crate::baselines::majority;
use crate::block::{Block, BlockRef, Height};
use crate::engine::{Engine, NodeId, Protocol};

#[derive(Debug, Clone, Copy)]
pub struct PaxosParams {
    pub t_block_s: f64,
}

impl Default for PaxosParams {
    fn default() -> Self {
        PaxosParams { t_block_s: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub enum PaxosMsg {
    Prepare { h: Height },
    Promise { h: Height },
    Accept { block: Block },
    Accepted { h: Height },
    Learn { block: Block },
}

#[derive(Debug, Clone)]
pub enum PaxosEvent {
    StartInstance,
    Deliver(PaxosMsg),
}

pub struct PaxosSim {
    n: u32,
    params: PaxosParams,
    leader: NodeId,
    height: Height,
    chain_tip: BlockRef,
    promises: u32,
    accepteds: u32,
    in_flight: Option<Block>,
    pub instances_confirmed: u64,
}

impl PaxosSim {
    pub fn new(n: u32, params: PaxosParams) -> Self {
        PaxosSim {
            n,
            params,
            leader: 0,
            height: 0,
            chain_tip: crate::block::GENESIS,
            promises: 0,
            accepteds: 0,
            in_flight: None,
            instances_confirmed: 0,
        }
    }

    fn broadcast(&self, engine: &mut Engine<PaxosEvent>, msg: &PaxosMsg) {
        for to in 0..self.n {
            if to != self.leader {
                engine.send(self.leader, to, PaxosEvent::Deliver(msg.clone()));
            }
        }
    }

    /// Promise gather complete: create the block for this height and start
    /// the accept phase.
    fn propose(&mut self, engine: &mut Engine<PaxosEvent>) {
        debug_assert!(self.promises + 1 >= majority(self.n));
        let block = Block {
            id: self.height,
            o: self.leader,
            t: engine.now(),
            parent: Some(self.chain_tip),
        };
        self.in_flight = Some(block);
        self.accepteds = 0;
        self.broadcast(engine, &PaxosMsg::Accept { block });
        if self.accepteds >= self.n - 1 {
            self.finish(engine);
        }
    }

    /// Accepted gather complete: the leader confirms and announces.
    fn finish(&mut self, engine: &mut Engine<PaxosEvent>) {
        debug_assert!(self.accepteds + 1 >= majority(self.n));
        let block = self.in_flight.take().expect("accept phase in progress");
        engine.record_confirmation(self.leader, block.r(), block.parent, block.t);
        self.instances_confirmed += 1;
        self.chain_tip = block.r();
        self.broadcast(engine, &PaxosMsg::Learn { block });
        engine.schedule(
            engine.now() + self.params.t_block_s,
            self.leader,
            PaxosEvent::StartInstance,
        );
    }
}

impl Protocol for PaxosSim {
    type Event = PaxosEvent;

    fn start(&mut self, engine: &mut Engine<PaxosEvent>) {
        // Genesis counts as confirmed at t = 0, so the first instance
        // starts one block interval in.
        engine.schedule(self.params.t_block_s, self.leader, PaxosEvent::StartInstance);
    }

    fn handle(&mut self, node: NodeId, ev: PaxosEvent, engine: &mut Engine<PaxosEvent>) {
        match ev {
            PaxosEvent::StartInstance => {
                self.height = self.chain_tip.id + 1;
                self.promises = 0;
                self.broadcast(engine, &PaxosMsg::Prepare { h: self.height });
                if self.promises >= self.n - 1 {
                    self.propose(engine);
                }
            }
            PaxosEvent::Deliver(msg) => match msg {
                PaxosMsg::Prepare { h } => {
                    engine.send(node, self.leader, PaxosEvent::Deliver(PaxosMsg::Promise { h }));
                }
                PaxosMsg::Promise { h } => {
                    if h == self.height && self.in_flight.is_none() {
                        self.promises += 1;
                        if self.promises >= self.n - 1 {
                            self.propose(engine);
                        }
                    }
                }
                PaxosMsg::Accept { block } => {
                    engine.send(
                        node,
                        self.leader,
                        PaxosEvent::Deliver(PaxosMsg::Accepted { h: block.id }),
                    );
                }
                PaxosMsg::Accepted { h } => {
                    if self.in_flight.as_ref().map(|b| b.id) == Some(h) {
                        self.accepteds += 1;
                        if self.accepteds >= self.n - 1 {
                            self.finish(engine);
                        }
                    }
                }
                PaxosMsg::Learn { block } => {
                    engine.record_confirmation(node, block.r(), block.parent, block.t);
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::LatencyModel;

    #[test]
    fn five_legs_of_two_messages_at_n3() {
        // One full instance at n = 3 costs 5 * 2 = 10 messages.
        let mut sim = PaxosSim::new(3, PaxosParams::default());
        // End right after the first instance completes but before the next
        // prepare goes out.
        let engine = Engine::new(3, 1, 12.0, LatencyModel::default());
        let stats = engine.run(&mut sim);
        assert_eq!(stats.messages_sent, 10);
        assert_eq!(sim.instances_confirmed, 1);
        // Leader plus both acceptors confirm height 1.
        assert_eq!(stats.confirmations.len(), 3);
    }

    #[test]
    fn chain_grows_sequentially() {
        let mut sim = PaxosSim::new(5, PaxosParams::default());
        let engine = Engine::new(5, 2, 60.0, LatencyModel::default());
        let stats = engine.run(&mut sim);
        let mut leader_heights: Vec<Height> = stats
            .confirmations
            .iter()
            .filter(|c| c.node == 0)
            .map(|c| c.block.id)
            .collect();
        leader_heights.sort_unstable();
        let expected: Vec<Height> = (1..=leader_heights.len() as Height).collect();
        assert_eq!(leader_heights, expected);
    }

    #[test]
    fn single_node_confirms_unaided() {
        let mut sim = PaxosSim::new(1, PaxosParams::default());
        let engine = Engine::new(1, 3, 35.0, LatencyModel::default());
        let stats = engine.run(&mut sim);
        assert_eq!(stats.messages_sent, 0);
        assert_eq!(sim.instances_confirmed, 3);
    }
}
