//! PBFT normal-case operation with a fixed primary (node 0).
//!
//! Per instance: the primary broadcasts a pre-prepare, every node (primary
//! included) broadcasts a prepare, and on `2f + 1` matching prepares a node
//! broadcasts its commit; a node accepts the block once it holds `2f + 1`
//! commits. That is `(n - 1) + n(n - 1) + n(n - 1)` messages per confirmed
//! block with `f = floor((n - 1) / 3)`. The primary starts the next
//! instance `T_block` after its own acceptance. View changes are out of
//! scope: the network is benign and reliable.

use std::collections::BTreeMap;

use crate::block::{Block, BlockRef, Height};
use crate::engine::{Engine, NodeId, Protocol};

#[derive(Debug, Clone, Copy)]
pub struct PbftParams {
    pub t_block_s: f64,
}

impl Default for PbftParams {
    fn default() -> Self {
        PbftParams { t_block_s: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub enum PbftMsg {
    PrePrepare { block: Block },
    Prepare { h: Height },
    Commit { h: Height },
}

#[derive(Debug, Clone)]
pub enum PbftEvent {
    StartInstance,
    Deliver(PbftMsg),
}

/// Per-height tally kept by each node until it accepts that height.
#[derive(Debug, Default)]
struct InstanceTally {
    block: Option<Block>,
    prepares: u32,
    commits: u32,
    sent_commit: bool,
}

struct PbftNode {
    accepted_up_to: Height,
    tallies: BTreeMap<Height, InstanceTally>,
}

pub struct PbftSim {
    n: u32,
    params: PbftParams,
    primary: NodeId,
    quorum: u32,
    chain_tip: BlockRef,
    nodes: Vec<PbftNode>,
    pub blocks_accepted: u64,
}

impl PbftSim {
    pub fn new(n: u32, params: PbftParams) -> Self {
        let f = (n.saturating_sub(1)) / 3;
        let nodes = (0..n)
            .map(|_| PbftNode {
                accepted_up_to: 0,
                tallies: BTreeMap::new(),
            })
            .collect();
        PbftSim {
            n,
            params,
            primary: 0,
            quorum: 2 * f + 1,
            chain_tip: crate::block::GENESIS,
            nodes,
            blocks_accepted: 0,
        }
    }

    pub fn quorum(&self) -> u32 {
        self.quorum
    }

    fn broadcast(&self, engine: &mut Engine<PbftEvent>, from: NodeId, msg: &PbftMsg) {
        for to in 0..self.n {
            if to != from {
                engine.send(from, to, PbftEvent::Deliver(msg.clone()));
            }
        }
    }

    /// Broadcast this node's prepare and count it toward its own quorum.
    fn send_prepare(&mut self, engine: &mut Engine<PbftEvent>, x: NodeId, h: Height) {
        self.broadcast(engine, x, &PbftMsg::Prepare { h });
        self.nodes[x as usize].tallies.entry(h).or_default().prepares += 1;
        self.try_progress(engine, x, h);
    }

    fn try_progress(&mut self, engine: &mut Engine<PbftEvent>, x: NodeId, h: Height) {
        let quorum = self.quorum;
        {
            let node = &mut self.nodes[x as usize];
            if h <= node.accepted_up_to {
                return;
            }
            let tally = node.tallies.entry(h).or_default();
            if tally.block.is_none() {
                return;
            }
            if !tally.sent_commit && tally.prepares >= quorum {
                tally.sent_commit = true;
                tally.commits += 1;
            } else if tally.sent_commit && tally.commits >= quorum {
                // Accept the block.
                let block = tally.block.expect("checked above");
                node.accepted_up_to = h;
                node.tallies = node.tallies.split_off(&(h + 1));
                engine.record_confirmation(x, block.r(), block.parent, block.t);
                if x == self.primary {
                    self.blocks_accepted += 1;
                    self.chain_tip = block.r();
                    engine.schedule(
                        engine.now() + self.params.t_block_s,
                        self.primary,
                        PbftEvent::StartInstance,
                    );
                }
                return;
            } else {
                return;
            }
        }
        // Commit was just sent; broadcast it and re-check (the quorum may
        // already be met at tiny n).
        self.broadcast(engine, x, &PbftMsg::Commit { h });
        self.try_progress(engine, x, h);
    }
}

impl Protocol for PbftSim {
    type Event = PbftEvent;

    fn start(&mut self, engine: &mut Engine<PbftEvent>) {
        engine.schedule(self.params.t_block_s, self.primary, PbftEvent::StartInstance);
    }

    fn handle(&mut self, node: NodeId, ev: PbftEvent, engine: &mut Engine<PbftEvent>) {
        match ev {
            PbftEvent::StartInstance => {
                let h = self.chain_tip.id + 1;
                let block = Block {
                    id: h,
                    o: self.primary,
                    t: engine.now(),
                    parent: Some(self.chain_tip),
                };
                self.nodes[node as usize].tallies.entry(h).or_default().block = Some(block);
                self.broadcast(engine, node, &PbftMsg::PrePrepare { block });
                self.send_prepare(engine, node, h);
            }
            PbftEvent::Deliver(msg) => match msg {
                PbftMsg::PrePrepare { block } => {
                    let h = block.id;
                    if h <= self.nodes[node as usize].accepted_up_to {
                        return;
                    }
                    self.nodes[node as usize].tallies.entry(h).or_default().block = Some(block);
                    self.send_prepare(engine, node, h);
                }
                PbftMsg::Prepare { h } => {
                    if h <= self.nodes[node as usize].accepted_up_to {
                        return;
                    }
                    self.nodes[node as usize].tallies.entry(h).or_default().prepares += 1;
                    self.try_progress(engine, node, h);
                }
                PbftMsg::Commit { h } => {
                    if h <= self.nodes[node as usize].accepted_up_to {
                        return;
                    }
                    self.nodes[node as usize].tallies.entry(h).or_default().commits += 1;
                    self.try_progress(engine, node, h);
                }
            },
        }
    }
}
