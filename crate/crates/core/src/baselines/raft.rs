//! Raft with randomized election timeouts and periodic heartbeats.
//!
//! Election: every node arms a timeout drawn uniformly from the configured
//! range; a node whose timer fires before it has heard any vote request
//! becomes a candidate, and the first node to time out wins the votes of a
//! majority. Because the timeout spread here is far smaller than the
//! message latency, several nodes time out before the first request
//! reaches them; voters therefore collect requests for one settling window
//! (two latency bounds, enough to hear every candidate of the round) and
//! grant the candidate with the earliest timeout, breaking ties by id.
//! Late candidates yield the same way, so exactly one leader emerges. A
//! split vote would simply re-run the election with fresh random timeouts.
//!
//! Once elected, the leader broadcasts a heartbeat every cycle; followers
//! reset their timers on any leader traffic, and since a cycle plus the
//! worst-case delivery delay stays below the minimum timeout, no
//! re-election ever triggers. The leader appends one block per `T_block`
//! after the previous commit (the append rides the heartbeat slot),
//! commits it when a majority has acked, and then broadcasts the commit so
//! followers confirm; plain heartbeats are not acked.

use std::collections::BTreeSet;

use rand::Rng;

use crate::baselines::majority;
use crate::block::{Block, BlockRef, Height};
use crate::engine::{Engine, NodeId, Protocol, SimTime};

#[derive(Debug, Clone, Copy)]
pub struct RaftParams {
    pub cycle_s: f64,
    pub t_block_s: f64,
    pub timeout_min_s: f64,
    pub timeout_max_s: f64,
    /// Upper bound of the network latency model; sizes the vote-settling
    /// window.
    pub latency_max_s: f64,
}

impl Default for RaftParams {
    fn default() -> Self {
        RaftParams {
            cycle_s: 0.7,
            t_block_s: 10.0,
            timeout_min_s: 1.0,
            timeout_max_s: 1.2,
            latency_max_s: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub enum RaftMsg {
    RequestVote {
        term: u64,
        fired_at: SimTime,
        candidate: NodeId,
    },
    Vote {
        term: u64,
        voter: NodeId,
    },
    Append {
        block: Block,
    },
    Ack {
        h: Height,
    },
    CommitNote {
        block: Block,
    },
    Heartbeat,
}

#[derive(Debug, Clone)]
pub enum RaftEvent {
    ElectionTimeout { epoch: u64 },
    VoteWindow { round: u64 },
    LeaderCycle,
    Deliver(RaftMsg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug)]
struct RaftNode {
    role: Role,
    term: u64,
    timer_epoch: u64,
    fired_at: Option<SimTime>,
    /// Best vote request seen in the open settling window.
    best_request: Option<(SimTime, NodeId, u64)>,
    window_open: bool,
    window_round: u64,
    voters: BTreeSet<NodeId>,
}

pub struct RaftSim {
    n: u32,
    params: RaftParams,
    nodes: Vec<RaftNode>,
    pub leader: Option<NodeId>,
    pub elections_started: u64,
    chain_tip: BlockRef,
    in_flight: Option<Block>,
    acks: u32,
    next_block_due: SimTime,
    pub blocks_committed: u64,
}

impl RaftSim {
    pub fn new(n: u32, params: RaftParams) -> Self {
        let nodes = (0..n)
            .map(|_| RaftNode {
                role: Role::Follower,
                term: 0,
                timer_epoch: 0,
                fired_at: None,
                best_request: None,
                window_open: false,
                window_round: 0,
                voters: BTreeSet::new(),
            })
            .collect();
        RaftSim {
            n,
            params,
            nodes,
            leader: None,
            elections_started: 0,
            chain_tip: crate::block::GENESIS,
            in_flight: None,
            acks: 0,
            next_block_due: 0.0,
            blocks_committed: 0,
        }
    }

    fn draw_timeout(&self, engine: &mut Engine<RaftEvent>, node: NodeId) -> f64 {
        engine
            .rng(node)
            .gen_range(self.params.timeout_min_s..self.params.timeout_max_s)
    }

    fn arm_election_timer(&mut self, engine: &mut Engine<RaftEvent>, node: NodeId) {
        if self.nodes[node as usize].role == Role::Leader {
            return;
        }
        let delay = self.draw_timeout(engine, node);
        self.nodes[node as usize].timer_epoch += 1;
        let epoch = self.nodes[node as usize].timer_epoch;
        engine.schedule(
            engine.now() + delay,
            node,
            RaftEvent::ElectionTimeout { epoch },
        );
    }

    fn broadcast_from(&self, engine: &mut Engine<RaftEvent>, from: NodeId, msg: &RaftMsg) {
        for to in 0..self.n {
            if to != from {
                engine.send(from, to, RaftEvent::Deliver(msg.clone()));
            }
        }
    }

    fn become_candidate(&mut self, engine: &mut Engine<RaftEvent>, x: NodeId) {
        self.elections_started += 1;
        let now = engine.now();
        let node = &mut self.nodes[x as usize];
        node.role = Role::Candidate;
        node.term += 1;
        node.fired_at = Some(now);
        node.voters = BTreeSet::from([x]);
        let msg = RaftMsg::RequestVote {
            term: node.term,
            fired_at: now,
            candidate: x,
        };
        self.broadcast_from(engine, x, &msg);
        self.check_votes(engine, x);
        // Retry round in case of a split vote.
        self.arm_election_timer(engine, x);
    }

    fn check_votes(&mut self, engine: &mut Engine<RaftEvent>, x: NodeId) {
        if self.nodes[x as usize].role != Role::Candidate {
            return;
        }
        if self.nodes[x as usize].voters.len() as u32 >= majority(self.n) {
            self.nodes[x as usize].role = Role::Leader;
            self.leader = Some(x);
            self.next_block_due = engine.now() + self.params.t_block_s;
            engine.schedule(engine.now(), x, RaftEvent::LeaderCycle);
        }
    }

    fn on_leader_cycle(&mut self, engine: &mut Engine<RaftEvent>, l: NodeId) {
        if self.nodes[l as usize].role != Role::Leader {
            return;
        }
        let now = engine.now();
        if self.in_flight.is_none() && now >= self.next_block_due {
            let block = Block {
                id: self.chain_tip.id + 1,
                o: l,
                t: now,
                parent: Some(self.chain_tip),
            };
            self.in_flight = Some(block);
            self.acks = 1; // own log entry
            self.broadcast_from(engine, l, &RaftMsg::Append { block });
            self.maybe_commit(engine, l);
        } else {
            self.broadcast_from(engine, l, &RaftMsg::Heartbeat);
        }
        engine.schedule(now + self.params.cycle_s, l, RaftEvent::LeaderCycle);
    }

    fn maybe_commit(&mut self, engine: &mut Engine<RaftEvent>, l: NodeId) {
        if self.acks < majority(self.n) {
            return;
        }
        let Some(block) = self.in_flight.take() else {
            return;
        };
        engine.record_confirmation(l, block.r(), block.parent, block.t);
        self.blocks_committed += 1;
        self.chain_tip = block.r();
        self.next_block_due = engine.now() + self.params.t_block_s;
        self.broadcast_from(engine, l, &RaftMsg::CommitNote { block });
    }

    fn on_deliver(&mut self, engine: &mut Engine<RaftEvent>, x: NodeId, msg: RaftMsg) {
        match msg {
            RaftMsg::RequestVote {
                term,
                fired_at,
                candidate,
            } => {
                let node = &mut self.nodes[x as usize];
                if node.role == Role::Leader {
                    return;
                }
                if term > node.term {
                    node.term = term;
                }
                let key = (fired_at, candidate);
                let better = match node.best_request {
                    None => true,
                    Some((bf, bc, _)) => key < (bf, bc),
                };
                if better {
                    node.best_request = Some((fired_at, candidate, term));
                }
                if !node.window_open {
                    node.window_open = true;
                    node.window_round += 1;
                    let round = node.window_round;
                    engine.schedule(
                        engine.now() + 2.0 * self.params.latency_max_s,
                        x,
                        RaftEvent::VoteWindow { round },
                    );
                }
            }
            RaftMsg::Vote { term, voter } => {
                let node = &mut self.nodes[x as usize];
                if node.role == Role::Candidate && term == node.term {
                    node.voters.insert(voter);
                    self.check_votes(engine, x);
                }
            }
            RaftMsg::Append { block } => {
                self.arm_election_timer(engine, x);
                engine.send(
                    x,
                    block.o,
                    RaftEvent::Deliver(RaftMsg::Ack { h: block.id }),
                );
            }
            RaftMsg::Ack { h } => {
                if self.in_flight.as_ref().map(|b| b.id) == Some(h) {
                    self.acks += 1;
                    self.maybe_commit(engine, x);
                }
            }
            RaftMsg::CommitNote { block } => {
                self.arm_election_timer(engine, x);
                engine.record_confirmation(x, block.r(), block.parent, block.t);
            }
            RaftMsg::Heartbeat => {
                self.arm_election_timer(engine, x);
            }
        }
    }
}

impl Protocol for RaftSim {
    type Event = RaftEvent;

    fn start(&mut self, engine: &mut Engine<RaftEvent>) {
        for x in 0..self.n {
            self.arm_election_timer(engine, x);
        }
    }

    fn handle(&mut self, node: NodeId, ev: RaftEvent, engine: &mut Engine<RaftEvent>) {
        match ev {
            RaftEvent::ElectionTimeout { epoch } => {
                let state = &self.nodes[node as usize];
                if epoch != state.timer_epoch || state.role == Role::Leader {
                    return;
                }
                if state.best_request.is_some() || state.window_open {
                    // Someone with an earlier timeout is already running;
                    // defer and re-arm.
                    self.arm_election_timer(engine, node);
                    return;
                }
                self.become_candidate(engine, node);
            }
            RaftEvent::VoteWindow { round } => {
                let (fired_at, candidate, term, own_key, role) = {
                    let state = &mut self.nodes[node as usize];
                    if round != state.window_round || !state.window_open {
                        return;
                    }
                    state.window_open = false;
                    let Some((fired_at, candidate, term)) = state.best_request.take() else {
                        return;
                    };
                    if state.role == Role::Leader {
                        return;
                    }
                    let own_key = state.fired_at.map(|f| (f, node));
                    (fired_at, candidate, term, own_key, state.role)
                };
                if role == Role::Candidate && own_key < Some((fired_at, candidate)) {
                    // This candidate outranks everything it heard; keep
                    // waiting for votes. Push the retry timer past the
                    // vote-arrival horizon.
                    self.arm_election_timer(engine, node);
                    return;
                }
                // Yield to the earliest candidate of the round.
                self.nodes[node as usize].role = Role::Follower;
                engine.send(
                    node,
                    candidate,
                    RaftEvent::Deliver(RaftMsg::Vote { term, voter: node }),
                );
                self.arm_election_timer(engine, node);
            }
            RaftEvent::LeaderCycle => self.on_leader_cycle(engine, node),
            RaftEvent::Deliver(msg) => self.on_deliver(engine, node, msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::LatencyModel;

    fn run(n: u32, seed: u64, end: f64) -> (RaftSim, crate::engine::RunStats) {
        let mut sim = RaftSim::new(n, RaftParams::default());
        let engine = Engine::new(n, seed, end, LatencyModel::default());
        let stats = engine.run(&mut sim);
        (sim, stats)
    }

    #[test]
    fn elects_exactly_one_leader() {
        for seed in 1..=5 {
            let (sim, _) = run(25, seed, 30.0);
            let leaders = sim
                .nodes
                .iter()
                .filter(|s| s.role == Role::Leader)
                .count();
            assert_eq!(leaders, 1, "seed {seed}");
            assert!(sim.leader.is_some());
        }
    }

    #[test]
    fn no_reelection_after_leader_established() {
        // Heartbeats every 0.7 s against a minimum timeout of 1.0 s: the
        // election runs once and terms never climb past the first round.
        let (sim, _) = run(25, 7, 120.0);
        let leader = sim.leader.unwrap();
        let leader_term = sim.nodes[leader as usize].term;
        for s in &sim.nodes {
            assert!(s.term <= leader_term);
        }
        assert!(
            sim.elections_started <= sim.n as u64,
            "elections kept firing: {}",
            sim.elections_started
        );
    }

    #[test]
    fn commits_one_block_per_interval() {
        let (sim, stats) = run(5, 3, 65.0);
        // Leader at ~2 s, first append ~12 s, then every 10.5 s: 6 blocks
        // fit in 65 s.
        assert!(
            (5..=6).contains(&sim.blocks_committed),
            "committed {}",
            sim.blocks_committed
        );
        // Every follower confirmation matches a committed block.
        let mut heights: Vec<Height> = stats
            .confirmations
            .iter()
            .filter(|c| c.node == sim.leader.unwrap())
            .map(|c| c.block.id)
            .collect();
        heights.sort_unstable();
        let expected: Vec<Height> = (1..=sim.blocks_committed).collect();
        assert_eq!(heights, expected);
    }

    #[test]
    fn single_node_cluster_self_elects_and_commits() {
        let (sim, stats) = run(1, 9, 25.0);
        assert_eq!(sim.leader, Some(0));
        assert_eq!(stats.messages_sent, 0);
        assert!(sim.blocks_committed >= 1);
    }
}
