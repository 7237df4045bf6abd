//! Chain-structured Avalanche: repeated Snowball sampling per height.
//!
//! Every cycle an active node samples `K` peers with one composite query
//! covering its undecided heights (`2K` messages per node per cycle); each
//! response carries, per queried height, the responder's preferred
//! candidate and whether it has observed a conflict there. When at least
//! `alpha * K` responses of a round name the same candidate, that
//! candidate's confidence grows; a run of `beta2` consecutive successful
//! rounds for the same preference decides it, or `beta1` when no conflict
//! was ever observed at that height (safe early commitment). New blocks
//! are generated per `(T_block, P_block)` and parent the highest-ID known
//! block, so confirmed blocks form a chain.
//!
//! Candidates and conflict knowledge spread epidemically through the
//! queries and responses themselves. While a height has seen no successful
//! round yet, preference re-anchors to the lowest `(t, o)` candidate,
//! which is what lets several simultaneously proposed blocks collapse onto
//! one network-wide choice; after that only an `alpha`-majority round can
//! switch it.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::becp::{d1_offset, BecpParams};
use crate::block::{Block, BlockRef, Height, GENESIS};
use crate::engine::{Engine, NodeId, Protocol};

#[derive(Debug, Clone, Copy)]
pub struct AvalancheParams {
    pub cycle_s: f64,
    pub d1_s: f64,
    pub t_block_s: f64,
    pub p_block: f64,
    pub k: usize,
    pub alpha: f64,
    pub beta1: u32,
    pub beta2: u32,
}

impl Default for AvalancheParams {
    fn default() -> Self {
        AvalancheParams {
            cycle_s: 0.7,
            d1_s: 0.1,
            t_block_s: 10.0,
            p_block: 0.05,
            k: 10,
            alpha: 0.8,
            beta1: 50,
            beta2: 150,
        }
    }
}

/// A candidate plus the sender's conflict observation at its height.
#[derive(Debug, Clone, Copy)]
pub struct CandidateInfo {
    pub block: Block,
    pub conflict: bool,
}

#[derive(Debug, Clone)]
pub enum AvaMsg {
    Query {
        from: NodeId,
        round: u64,
        /// The querier's preferred candidate per undecided height.
        items: Vec<CandidateInfo>,
    },
    Response {
        round: u64,
        /// The responder's preferred candidate per queried height.
        votes: Vec<CandidateInfo>,
    },
}

#[derive(Debug, Clone)]
pub enum AvaEvent {
    Cycle,
    Generate,
    Deliver(AvaMsg),
}

/// Snowball state for one height at one node.
#[derive(Debug)]
struct HeightState {
    candidates: BTreeMap<BlockRef, Block>,
    confidence: BTreeMap<BlockRef, u32>,
    preferred: BlockRef,
    consecutive: u32,
    decided: Option<BlockRef>,
    conflict_seen: bool,
    had_success: bool,
}

impl HeightState {
    fn info(&self, r: BlockRef) -> CandidateInfo {
        CandidateInfo {
            block: self.candidates[&r],
            conflict: self.conflict_seen,
        }
    }
}

struct AvaNode {
    heights: BTreeMap<Height, HeightState>,
    round: u64,
    awaiting: usize,
    round_heights: Vec<Height>,
    tally: BTreeMap<Height, BTreeMap<BlockRef, u32>>,
    gen_attempts: u64,
}

pub struct AvalancheSim {
    n: u32,
    params: AvalancheParams,
    nodes: Vec<AvaNode>,
    pub decisions: u64,
}

impl AvalancheSim {
    pub fn new(n: u32, params: AvalancheParams) -> Self {
        let nodes = (0..n)
            .map(|_| AvaNode {
                heights: BTreeMap::new(),
                round: 0,
                awaiting: 0,
                round_heights: Vec::new(),
                tally: BTreeMap::new(),
                gen_attempts: 0,
            })
            .collect();
        AvalancheSim {
            n,
            params,
            nodes,
            decisions: 0,
        }
    }

    pub fn gen_attempts(&self, x: NodeId) -> u64 {
        self.nodes[x as usize].gen_attempts
    }

    fn stagger(&self) -> BecpParams {
        BecpParams {
            cycle_s: self.params.cycle_s,
            d1_s: self.params.d1_s,
            ..Default::default()
        }
    }

    /// Record a candidate at its height. Until a height has a successful
    /// round, the preference re-anchors to the lowest `(t, o)` candidate.
    pub fn learn(&mut self, x: NodeId, block: Block) {
        if block.id == 0 {
            return;
        }
        let node = &mut self.nodes[x as usize];
        let r = block.r();
        let hs = node.heights.entry(block.id).or_insert_with(|| HeightState {
            candidates: BTreeMap::new(),
            confidence: BTreeMap::new(),
            preferred: r,
            consecutive: 0,
            decided: None,
            conflict_seen: false,
            had_success: false,
        });
        if hs.candidates.insert(r, block).is_none() {
            if hs.candidates.len() >= 2 {
                hs.conflict_seen = true;
            }
            if hs.decided.is_none() && !hs.had_success {
                let cur = hs.candidates[&hs.preferred];
                if (block.t, block.o) < (cur.t, cur.o) {
                    hs.preferred = r;
                }
            }
        }
    }

    fn absorb(&mut self, x: NodeId, info: &CandidateInfo) {
        self.learn(x, info.block);
        if info.conflict {
            if let Some(hs) = self.nodes[x as usize].heights.get_mut(&info.block.id) {
                hs.conflict_seen = true;
            }
        }
    }

    fn sample_peers(&self, x: NodeId, engine: &mut Engine<AvaEvent>) -> Vec<NodeId> {
        let k = self.params.k;
        let others = self.n - 1;
        let rng = engine.rng(x);
        let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut p = rng.gen_range(0..others);
            if p >= x {
                p += 1;
            }
            p
        };
        if (others as usize) < k {
            // Fewer known peers than the sample size: sample with
            // replacement from those known.
            (0..k).map(|_| pick(&mut *rng)).collect()
        } else {
            let mut picked = BTreeSet::new();
            while picked.len() < k {
                picked.insert(pick(&mut *rng));
            }
            picked.into_iter().collect()
        }
    }

    fn on_cycle(&mut self, x: NodeId, engine: &mut Engine<AvaEvent>) {
        engine.schedule(engine.now() + self.params.cycle_s, x, AvaEvent::Cycle);
        if self.n < 2 {
            return;
        }
        let (round, items) = {
            let node = &mut self.nodes[x as usize];
            let undecided: Vec<Height> = node
                .heights
                .iter()
                .filter(|(_, hs)| hs.decided.is_none())
                .map(|(h, _)| *h)
                .collect();
            if undecided.is_empty() {
                return;
            }
            node.round += 1;
            node.awaiting = self.params.k;
            node.round_heights = undecided.clone();
            node.tally.clear();
            let items: Vec<CandidateInfo> = undecided
                .iter()
                .map(|h| {
                    let hs = &node.heights[h];
                    hs.info(hs.preferred)
                })
                .collect();
            (node.round, items)
        };
        for peer in self.sample_peers(x, engine) {
            engine.send(
                x,
                peer,
                AvaEvent::Deliver(AvaMsg::Query {
                    from: x,
                    round,
                    items: items.clone(),
                }),
            );
        }
    }

    fn on_query(
        &mut self,
        x: NodeId,
        from: NodeId,
        round: u64,
        items: Vec<CandidateInfo>,
        engine: &mut Engine<AvaEvent>,
    ) {
        for info in &items {
            self.absorb(x, info);
        }
        let votes: Vec<CandidateInfo> = items
            .iter()
            .map(|info| {
                let hs = &self.nodes[x as usize].heights[&info.block.id];
                hs.info(hs.decided.unwrap_or(hs.preferred))
            })
            .collect();
        engine.send(x, from, AvaEvent::Deliver(AvaMsg::Response { round, votes }));
    }

    fn on_response(
        &mut self,
        x: NodeId,
        round: u64,
        votes: Vec<CandidateInfo>,
        engine: &mut Engine<AvaEvent>,
    ) {
        for info in &votes {
            self.absorb(x, info);
        }
        let node = &mut self.nodes[x as usize];
        if round != node.round || node.awaiting == 0 {
            return;
        }
        for info in &votes {
            *node
                .tally
                .entry(info.block.id)
                .or_default()
                .entry(info.block.r())
                .or_default() += 1;
        }
        node.awaiting -= 1;
        if node.awaiting == 0 {
            self.finish_round(x, engine);
        }
    }

    fn finish_round(&mut self, x: NodeId, engine: &mut Engine<AvaEvent>) {
        let alpha_quorum = (self.params.alpha * self.params.k as f64).ceil() as u32;
        let round_heights = std::mem::take(&mut self.nodes[x as usize].round_heights);
        for h in round_heights {
            let node = &mut self.nodes[x as usize];
            let winner = node
                .tally
                .get(&h)
                .and_then(|t| t.iter().max_by_key(|(r, c)| (**c, std::cmp::Reverse(**r))));
            let Some((&top, &count)) = winner else {
                if let Some(hs) = node.heights.get_mut(&h) {
                    hs.consecutive = 0;
                }
                continue;
            };
            let Some(hs) = node.heights.get_mut(&h) else {
                continue;
            };
            if hs.decided.is_some() {
                continue;
            }
            if count < alpha_quorum {
                hs.consecutive = 0;
                continue;
            }
            *hs.confidence.entry(top).or_default() += 1;
            hs.had_success = true;
            if top == hs.preferred {
                hs.consecutive += 1;
            } else {
                hs.preferred = top;
                hs.consecutive = 1;
            }
            let threshold_met = hs.consecutive >= self.params.beta2
                || (!hs.conflict_seen && hs.consecutive >= self.params.beta1);
            if threshold_met {
                hs.decided = Some(hs.preferred);
                let block = hs.candidates[&hs.preferred];
                engine.record_confirmation(x, block.r(), block.parent, block.t);
                self.decisions += 1;
            }
        }
    }

    fn on_generate(&mut self, x: NodeId, engine: &mut Engine<AvaEvent>) {
        engine.schedule(engine.now() + self.params.t_block_s, x, AvaEvent::Generate);
        self.nodes[x as usize].gen_attempts += 1;
        if !engine.rng(x).gen_bool(self.params.p_block) {
            return;
        }
        // Parent the highest-ID known block (its decided or preferred
        // candidate at that height).
        let parent = {
            let node = &self.nodes[x as usize];
            node.heights
                .iter()
                .next_back()
                .map(|(_, hs)| hs.decided.unwrap_or(hs.preferred))
                .unwrap_or(GENESIS)
        };
        let block = Block {
            id: parent.id + 1,
            o: x,
            t: engine.now(),
            parent: Some(parent),
        };
        self.learn(x, block);
    }
}

impl Protocol for AvalancheSim {
    type Event = AvaEvent;

    fn start(&mut self, engine: &mut Engine<AvaEvent>) {
        let stagger = self.stagger();
        for x in 0..self.n {
            let offset = d1_offset(&stagger, x);
            engine.schedule(offset, x, AvaEvent::Generate);
            engine.schedule(offset, x, AvaEvent::Cycle);
        }
    }

    fn handle(&mut self, node: NodeId, ev: AvaEvent, engine: &mut Engine<AvaEvent>) {
        match ev {
            AvaEvent::Cycle => self.on_cycle(node, engine),
            AvaEvent::Generate => self.on_generate(node, engine),
            AvaEvent::Deliver(AvaMsg::Query { from, round, items }) => {
                self.on_query(node, from, round, items, engine)
            }
            AvaEvent::Deliver(AvaMsg::Response { round, votes }) => {
                self.on_response(node, round, votes, engine)
            }
        }
    }
}
