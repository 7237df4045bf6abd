//! BECP: the epidemic consensus node.
//!
//! Three cooperating pieces run on every node:
//!
//! * **SSEP** — a push-sum pair `(value, weight)` whose ratio
//!   `weight / value` converges to the number of participating nodes; one
//!   designated initiator seeds `value = 1`, everyone holds `weight = 1`.
//! * **NCP** — the peer cache (see [`crate::membership`]); its view is
//!   piggybacked on every cycle message.
//! * **PTP** — a per-block state machine. Each cached block carries two
//!   chained push-sum aggregations: `(vp, wp)` counts informed nodes during
//!   PROPAGATION and `(va, wa)` counts agreeing nodes during AGREEMENT. A
//!   phase advances when the local estimate stays within `epsilon1` for
//!   `psi` consecutive cycles and covers at least half the estimated system
//!   size; the second convergence is COMMIT.
//!
//! Every cycle a node halves its SSEP pair and every unconfirmed tuple's
//! pairs, sends the halves (plus a peer-cache sample) to one random peer,
//! and the peer answers with a symmetric reply, so aggregate mass is
//! conserved while local ratios mix toward the global aggregate. Duplicate
//! block ids are resolved in favor of the candidate with the smallest
//! `(t, o)`; adopting a new preferred block discards the old one together
//! with all of its descendants (the backward procedure).

use std::collections::BTreeMap;

use rand::Rng;

use crate::block::{Block, BlockRef, Height};
use crate::engine::{Engine, NodeId, Protocol, SimTime};
use crate::membership::{bootstrap, PeerCache};

/// PTP phase of a cached block. Transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Propagation,
    Agreement,
    Commit,
}

/// Cache entry: a block plus its aggregation pairs and detector state.
#[derive(Debug, Clone)]
pub struct BlockTuple {
    pub block: Block,
    pub vp: f64,
    pub wp: f64,
    pub va: f64,
    pub wa: f64,
    pub phase: Phase,
    pub prev_estimate: Option<f64>,
    pub stable_cycles: u32,
    /// Whether this node already added its +1 to `va`.
    contributed_agreement: bool,
}

impl BlockTuple {
    /// Tuple seeded by the block's originator: it counts itself as informed
    /// and holds the full aggregation weight for both phases.
    pub fn originated(block: Block) -> Self {
        BlockTuple {
            block,
            vp: 1.0,
            wp: 1.0,
            va: 0.0,
            wa: 1.0,
            phase: Phase::Propagation,
            prev_estimate: None,
            stable_cycles: 0,
            contributed_agreement: false,
        }
    }

    fn confirmed_genesis() -> Self {
        BlockTuple {
            block: Block::genesis(),
            vp: 0.0,
            wp: 0.0,
            va: 0.0,
            wa: 0.0,
            phase: Phase::Commit,
            prev_estimate: None,
            stable_cycles: 0,
            contributed_agreement: false,
        }
    }

    pub fn is_confirmed(&self) -> bool {
        self.phase == Phase::Commit
    }
}

/// Wire form of a tuple: the halves of the sender's pairs plus the block
/// identity needed to resolve duplicates at the receiver.
#[derive(Debug, Clone, Copy)]
pub struct TupleSummary {
    pub id: Height,
    pub o: NodeId,
    pub t: SimTime,
    pub parent: Option<BlockRef>,
    pub vp: f64,
    pub wp: f64,
    pub va: f64,
    pub wa: f64,
    pub phase: Phase,
}

impl TupleSummary {
    pub fn r(&self) -> BlockRef {
        BlockRef {
            id: self.id,
            o: self.o,
        }
    }

    fn block(&self) -> Block {
        Block {
            id: self.id,
            o: self.o,
            t: self.t,
            parent: self.parent,
        }
    }
}

/// One push-pull exchange leg. The pairs carried are exactly half of the
/// sender's pre-send pairs.
#[derive(Debug, Clone)]
pub struct CycleMessage {
    pub sender: NodeId,
    pub ssep_value: f64,
    pub ssep_weight: f64,
    /// Unconfirmed tuples in ascending `(id, o)` order.
    pub tuples: Vec<TupleSummary>,
    /// NCP piggyback: the sender's current peer view.
    pub peers: Vec<NodeId>,
    pub is_reply: bool,
}

/// Local block cache keyed by `(id, o)`. During protocol operation the
/// unconfirmed entries always form a single chain, but the container
/// supports arbitrary trees so the backward procedure is fully general.
#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    tuples: BTreeMap<BlockRef, BlockTuple>,
}

impl BlockCache {
    pub fn new() -> Self {
        BlockCache {
            tuples: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, tuple: BlockTuple) {
        self.tuples.insert(tuple.block.r(), tuple);
    }

    pub fn contains(&self, r: BlockRef) -> bool {
        self.tuples.contains_key(&r)
    }

    pub fn get(&self, r: BlockRef) -> Option<&BlockTuple> {
        self.tuples.get(&r)
    }

    pub fn get_mut(&mut self, r: BlockRef) -> Option<&mut BlockTuple> {
        self.tuples.get_mut(&r)
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockRef, &BlockTuple)> {
        self.tuples.iter()
    }

    /// The cached block at `id`, if any (at most one during protocol
    /// operation).
    pub fn ref_at_height(&self, id: Height) -> Option<BlockRef> {
        self.tuples
            .range(BlockRef { id, o: 0 }..=BlockRef { id, o: NodeId::MAX })
            .map(|(r, _)| *r)
            .next()
    }

    pub fn unconfirmed_refs(&self) -> Vec<BlockRef> {
        self.tuples
            .iter()
            .filter(|(_, t)| !t.is_confirmed())
            .map(|(r, _)| *r)
            .collect()
    }

    pub fn children_of(&self, r: BlockRef) -> Vec<BlockRef> {
        self.tuples
            .iter()
            .filter(|(_, t)| t.block.parent == Some(r))
            .map(|(cr, _)| *cr)
            .collect()
    }

    /// Backward procedure: remove `r` and all of its transitive
    /// descendants, returning the removed tuples. Confirmed tuples are
    /// never evicted, so calling this on one is a bug.
    pub fn backward(&mut self, r: BlockRef) -> Vec<BlockTuple> {
        let mut removed = Vec::new();
        self.backward_rec(r, &mut removed);
        removed
    }

    fn backward_rec(&mut self, r: BlockRef, removed: &mut Vec<BlockTuple>) {
        for child in self.children_of(r) {
            self.backward_rec(child, removed);
        }
        if let Some(t) = self.tuples.remove(&r) {
            assert!(!t.is_confirmed(), "backward evicted a confirmed tuple");
            removed.push(t);
        }
    }
}

/// Per-node protocol state.
#[derive(Debug, Clone)]
pub struct BecpNode {
    pub id: NodeId,
    pub cache: BlockCache,
    pub b_pref: BlockRef,
    pub ssep_value: f64,
    pub ssep_weight: f64,
    pub peers: PeerCache,
    pub gen_attempts: u64,
    pub gen_created: u64,
}

impl BecpNode {
    pub fn new(id: NodeId, n_cache: usize) -> Self {
        let mut cache = BlockCache::new();
        cache.insert(BlockTuple::confirmed_genesis());
        BecpNode {
            id,
            cache,
            b_pref: crate::block::GENESIS,
            ssep_value: 0.0,
            ssep_weight: 1.0,
            peers: PeerCache::new(n_cache),
            gen_attempts: 0,
            gen_created: 0,
        }
    }

    /// `getSystemSize()`: the SSEP estimate, or `None` while this node has
    /// not yet received any value mass (callers treat that as "not yet
    /// converged").
    pub fn system_size(&self) -> Option<f64> {
        if self.ssep_value > 0.0 {
            Some(self.ssep_weight / self.ssep_value)
        } else {
            None
        }
    }
}

/// Aggregation-mass bookkeeping: at every instant, for each block and each
/// pair, `local + in_flight == contributed - destroyed`, and the SSEP pair
/// sums to exactly one unit of value and one unit of weight per node.
/// Drops and backward removals are deliberate mass sinks, so the monitor
/// accounts them explicitly instead of pretending they do not exist.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairMass {
    pub vp: f64,
    pub wp: f64,
    pub va: f64,
    pub wa: f64,
}

#[derive(Debug, Default)]
pub struct ConservationMonitor {
    pub enabled: bool,
    contributed: BTreeMap<BlockRef, PairMass>,
    destroyed: BTreeMap<BlockRef, PairMass>,
    in_flight: BTreeMap<BlockRef, PairMass>,
    ssep_in_flight_value: f64,
    ssep_in_flight_weight: f64,
    pub violations: Vec<String>,
    pub checks_run: u64,
}

const MASS_TOLERANCE: f64 = 1e-9;

impl ConservationMonitor {
    pub fn new(enabled: bool) -> Self {
        ConservationMonitor {
            enabled,
            ..Default::default()
        }
    }

    fn on_create(&mut self, r: BlockRef) {
        if !self.enabled {
            return;
        }
        let m = self.contributed.entry(r).or_default();
        m.vp += 1.0;
        m.wp += 1.0;
        m.wa += 1.0;
    }

    fn on_admit(&mut self, r: BlockRef, with_agreement: bool) {
        if !self.enabled {
            return;
        }
        let m = self.contributed.entry(r).or_default();
        m.vp += 1.0;
        if with_agreement {
            m.va += 1.0;
        }
    }

    fn on_agree(&mut self, r: BlockRef) {
        if !self.enabled {
            return;
        }
        self.contributed.entry(r).or_default().va += 1.0;
    }

    fn on_send(&mut self, msg: &CycleMessage) {
        if !self.enabled {
            return;
        }
        self.ssep_in_flight_value += msg.ssep_value;
        self.ssep_in_flight_weight += msg.ssep_weight;
        for s in &msg.tuples {
            let m = self.in_flight.entry(s.r()).or_default();
            m.vp += s.vp;
            m.wp += s.wp;
            m.va += s.va;
            m.wa += s.wa;
        }
    }

    fn on_deliver(&mut self, msg: &CycleMessage) {
        if !self.enabled {
            return;
        }
        self.ssep_in_flight_value -= msg.ssep_value;
        self.ssep_in_flight_weight -= msg.ssep_weight;
        for s in &msg.tuples {
            let m = self.in_flight.entry(s.r()).or_default();
            m.vp -= s.vp;
            m.wp -= s.wp;
            m.va -= s.va;
            m.wa -= s.wa;
        }
    }

    fn on_destroy_summary(&mut self, s: &TupleSummary) {
        if !self.enabled {
            return;
        }
        let m = self.destroyed.entry(s.r()).or_default();
        m.vp += s.vp;
        m.wp += s.wp;
        m.va += s.va;
        m.wa += s.wa;
    }

    fn on_destroy_tuple(&mut self, t: &BlockTuple) {
        if !self.enabled {
            return;
        }
        let m = self.destroyed.entry(t.block.r()).or_default();
        m.vp += t.vp;
        m.wp += t.wp;
        m.va += t.va;
        m.wa += t.wa;
    }

    /// Full-scan conservation check against the current node states.
    pub fn check(&mut self, nodes: &[BecpNode], now: SimTime) {
        if !self.enabled {
            return;
        }
        self.checks_run += 1;
        let mut local: BTreeMap<BlockRef, PairMass> = BTreeMap::new();
        let mut ssep_value = 0.0;
        let mut ssep_weight = 0.0;
        for node in nodes {
            ssep_value += node.ssep_value;
            ssep_weight += node.ssep_weight;
            for (r, t) in node.cache.iter() {
                if r.id == 0 {
                    continue;
                }
                let m = local.entry(*r).or_default();
                m.vp += t.vp;
                m.wp += t.wp;
                m.va += t.va;
                m.wa += t.wa;
            }
        }
        let n = nodes.len() as f64;
        let v_total = ssep_value + self.ssep_in_flight_value;
        if (v_total - 1.0).abs() > MASS_TOLERANCE {
            self.violations
                .push(format!("t={now}: ssep value mass {v_total} != 1"));
        }
        let w_total = ssep_weight + self.ssep_in_flight_weight;
        if (w_total - n).abs() > MASS_TOLERANCE * n {
            self.violations
                .push(format!("t={now}: ssep weight mass {w_total} != {n}"));
        }
        for (r, contributed) in &self.contributed {
            let destroyed = self.destroyed.get(r).copied().unwrap_or_default();
            let in_flight = self.in_flight.get(r).copied().unwrap_or_default();
            let have = local.get(r).copied().unwrap_or_default();
            let checks = [
                ("vp", have.vp + in_flight.vp, contributed.vp - destroyed.vp),
                ("wp", have.wp + in_flight.wp, contributed.wp - destroyed.wp),
                ("va", have.va + in_flight.va, contributed.va - destroyed.va),
                ("wa", have.wa + in_flight.wa, contributed.wa - destroyed.wa),
            ];
            for (name, actual, expected) in checks {
                if (actual - expected).abs() > MASS_TOLERANCE * expected.abs().max(1.0) {
                    self.violations.push(format!(
                        "t={now}: block ({},{}) {name} mass {actual} != {expected}",
                        r.id, r.o
                    ));
                }
            }
        }
    }
}

/// Protocol parameters (cycle time, generation regime, PTP thresholds).
#[derive(Debug, Clone, Copy)]
pub struct BecpParams {
    pub cycle_s: f64,
    pub d1_s: f64,
    pub t_block_s: f64,
    pub p_block: f64,
    pub epsilon1: f64,
    pub psi: u32,
    pub n_cache: usize,
}

impl Default for BecpParams {
    fn default() -> Self {
        BecpParams {
            cycle_s: 0.7,
            d1_s: 0.1,
            t_block_s: 10.0,
            p_block: 0.05,
            epsilon1: 0.01,
            psi: 3,
            n_cache: 50,
        }
    }
}

/// Node `i`'s first activation: the initial interval `D1` staggers nodes
/// across the cycle so initial proposals are desynchronized.
pub fn d1_offset(params: &BecpParams, node: NodeId) -> f64 {
    if params.d1_s <= 0.0 {
        return 0.0;
    }
    let slots = (params.cycle_s / params.d1_s).ceil().max(1.0) as u64;
    params.d1_s * ((node as u64 % slots) as f64)
}

#[derive(Debug, Clone)]
pub enum BecpEvent {
    Cycle,
    Generate,
    Deliver(CycleMessage),
    MonitorTick,
}

/// The whole BECP network: node states plus the conservation monitor.
pub struct BecpSim {
    pub params: BecpParams,
    pub nodes: Vec<BecpNode>,
    pub monitor: ConservationMonitor,
}

const BOOTSTRAP_STREAM: u64 = u64::MAX;

impl BecpSim {
    pub fn new(n: u32, params: BecpParams, verify_mass: bool) -> Self {
        let nodes = (0..n).map(|i| BecpNode::new(i, params.n_cache)).collect();
        BecpSim {
            params,
            nodes,
            monitor: ConservationMonitor::new(verify_mass),
        }
    }

    /// Halve the node's SSEP pair and every unconfirmed tuple's pairs and
    /// package the halves (plus the peer view) into a cycle message.
    pub fn make_message(&mut self, i: NodeId, is_reply: bool) -> CycleMessage {
        let node = &mut self.nodes[i as usize];
        node.ssep_value /= 2.0;
        node.ssep_weight /= 2.0;
        let mut tuples = Vec::new();
        for (r, t) in node.cache.tuples.iter_mut() {
            if t.is_confirmed() {
                continue;
            }
            t.vp /= 2.0;
            t.wp /= 2.0;
            t.va /= 2.0;
            t.wa /= 2.0;
            tuples.push(TupleSummary {
                id: r.id,
                o: r.o,
                t: t.block.t,
                parent: t.block.parent,
                vp: t.vp,
                wp: t.wp,
                va: t.va,
                wa: t.wa,
                phase: t.phase,
            });
        }
        CycleMessage {
            sender: i,
            ssep_value: node.ssep_value,
            ssep_weight: node.ssep_weight,
            tuples,
            peers: node.peers.to_vec(),
            is_reply,
        }
    }

    /// Block generation attempt at a `T_block` boundary whose Bernoulli
    /// draw succeeded. No-op when the cache already holds a block at
    /// `B_pref.id + 1` created by this node.
    pub fn generate_block(&mut self, i: NodeId, now: SimTime) -> Option<BlockRef> {
        let node = &mut self.nodes[i as usize];
        let pref = node.b_pref;
        let own = BlockRef {
            id: pref.id + 1,
            o: i,
        };
        if node.cache.contains(own) {
            return None;
        }
        let block = Block {
            id: own.id,
            o: i,
            t: now,
            parent: Some(pref),
        };
        node.cache.insert(BlockTuple::originated(block));
        node.b_pref = own;
        node.gen_created += 1;
        self.monitor.on_create(own);
        Some(own)
    }

    /// Revised resolve-duplicate procedure, applied to each incoming tuple
    /// in ascending id order:
    ///
    /// (a) same `(t, o)` as an unconfirmed cached block → sum the pairs;
    /// (b) better `(t, o)` than the unconfirmed cached block at that id →
    ///     backward the cached block, admit the incoming one (its `vp`
    ///     incremented by this node's +1) and prefer it;
    /// (c) worse `(t, o)` → drop;
    /// (d) cached block at that id already confirmed → drop;
    /// (e) no id match → admit and prefer only if it extends `B_pref`.
    pub fn resolve_duplicate(&mut self, r: NodeId, incoming: &[TupleSummary]) {
        for s in incoming {
            debug_assert!(s.phase != Phase::Commit, "confirmed tuples are never sent");
            let node = &mut self.nodes[r as usize];
            match node.cache.ref_at_height(s.id) {
                Some(existing) => {
                    let tup = node.cache.get_mut(existing).expect("ref from cache");
                    if tup.is_confirmed() {
                        self.monitor.on_destroy_summary(s);
                        continue;
                    }
                    if s.t == tup.block.t && s.o == tup.block.o {
                        tup.vp += s.vp;
                        tup.wp += s.wp;
                        tup.va += s.va;
                        tup.wa += s.wa;
                    } else if (s.t == tup.block.t && s.o < tup.block.o) || s.t < tup.block.t {
                        let removed = node.cache.backward(existing);
                        for dead in &removed {
                            self.monitor.on_destroy_tuple(dead);
                        }
                        self.admit(r, s);
                    } else {
                        self.monitor.on_destroy_summary(s);
                    }
                }
                None => {
                    // The admission check compares the full parent
                    // reference (creator and height) against B_pref, which
                    // is what keeps the unconfirmed cache a single chain.
                    if s.parent == Some(node.b_pref) {
                        self.admit(r, s);
                    } else {
                        self.monitor.on_destroy_summary(s);
                    }
                }
            }
        }
    }

    /// Insert a received tuple with this node's +1 added to `vp` (and to
    /// `va` when it arrives already in AGREEMENT) and prefer it.
    fn admit(&mut self, r: NodeId, s: &TupleSummary) {
        let mut tuple = BlockTuple {
            block: s.block(),
            vp: s.vp + 1.0,
            wp: s.wp,
            va: s.va,
            wa: s.wa,
            phase: s.phase,
            prev_estimate: None,
            stable_cycles: 0,
            contributed_agreement: false,
        };
        let entering_agreement = s.phase == Phase::Agreement;
        if entering_agreement {
            tuple.va += 1.0;
            tuple.contributed_agreement = true;
        }
        let node = &mut self.nodes[r as usize];
        node.cache.insert(tuple);
        node.b_pref = s.r();
        self.monitor.on_admit(s.r(), entering_agreement);
    }

    /// Phase-transition pass, run once per cycle after the merges: compute
    /// the active estimate of each unconfirmed tuple, track stability, and
    /// advance the phase when the estimate has been stable for `psi`
    /// cycles and covers at least half the estimated system size.
    pub fn update_states(&mut self, i: NodeId, engine: &mut Engine<BecpEvent>) {
        let sys = self.nodes[i as usize].system_size();
        let refs = self.nodes[i as usize].cache.unconfirmed_refs();
        for r in refs {
            let params = self.params;
            let node = &mut self.nodes[i as usize];
            let Some(t) = node.cache.get_mut(r) else {
                continue;
            };
            if t.is_confirmed() {
                // An earlier commit in this pass confirmed an ancestor.
                continue;
            }
            let (num, den) = match t.phase {
                Phase::Propagation => (t.vp, t.wp),
                Phase::Agreement => (t.va, t.wa),
                Phase::Commit => unreachable!(),
            };
            if den <= 0.0 {
                t.prev_estimate = None;
                t.stable_cycles = 0;
                continue;
            }
            let e = num / den;
            let stable = matches!(t.prev_estimate, Some(p)
                if (e - p).abs() / e.max(1e-12) < params.epsilon1);
            t.stable_cycles = if stable { t.stable_cycles + 1 } else { 0 };
            t.prev_estimate = Some(e);
            if t.stable_cycles < params.psi {
                continue;
            }
            let Some(sys) = sys else { continue };
            if e < 0.5 * sys {
                continue;
            }
            match t.phase {
                Phase::Propagation => {
                    t.phase = Phase::Agreement;
                    t.stable_cycles = 0;
                    t.prev_estimate = None;
                    if !t.contributed_agreement {
                        t.va += 1.0;
                        t.contributed_agreement = true;
                        self.monitor.on_agree(r);
                    }
                }
                Phase::Agreement => {
                    self.commit(i, r, engine);
                }
                Phase::Commit => {}
            }
        }
    }

    /// COMMIT the tuple and every unconfirmed ancestor, recording one
    /// confirmation per `(node, block)` for the latency metric.
    fn commit(&mut self, i: NodeId, r: BlockRef, engine: &mut Engine<BecpEvent>) {
        let node = &mut self.nodes[i as usize];
        let mut cursor = Some(r);
        while let Some(cr) = cursor {
            let Some(t) = node.cache.get_mut(cr) else { break };
            if t.is_confirmed() {
                break;
            }
            t.phase = Phase::Commit;
            engine.record_confirmation(i, cr, t.block.parent, t.block.t);
            cursor = t.block.parent;
        }
    }

    fn on_cycle(&mut self, i: NodeId, engine: &mut Engine<BecpEvent>) {
        self.update_states(i, engine);
        let peer = {
            let node = &mut self.nodes[i as usize];
            node.peers.get_random(i, engine.rng(i)).ok()
        };
        if let Some(peer) = peer {
            let msg = self.make_message(i, false);
            self.monitor.on_send(&msg);
            engine.send(i, peer, BecpEvent::Deliver(msg));
        }
        engine.schedule(engine.now() + self.params.cycle_s, i, BecpEvent::Cycle);
    }

    fn on_deliver(&mut self, r: NodeId, msg: CycleMessage, engine: &mut Engine<BecpEvent>) {
        self.monitor.on_deliver(&msg);
        {
            let node = &mut self.nodes[r as usize];
            node.ssep_value += msg.ssep_value;
            node.ssep_weight += msg.ssep_weight;
        }
        self.resolve_duplicate(r, &msg.tuples);
        {
            let node = &mut self.nodes[r as usize];
            node.peers.exchange(r, &msg.peers, msg.sender, engine.rng(r));
        }
        if !msg.is_reply {
            let reply = self.make_message(r, true);
            self.monitor.on_send(&reply);
            engine.send(r, msg.sender, BecpEvent::Deliver(reply));
        }
    }
}

impl Protocol for BecpSim {
    type Event = BecpEvent;

    fn start(&mut self, engine: &mut Engine<BecpEvent>) {
        let mut boot_rng = engine.aux_stream(BOOTSTRAP_STREAM);
        let caches = bootstrap(self.nodes.len() as u32, self.params.n_cache, &mut boot_rng);
        for (node, cache) in self.nodes.iter_mut().zip(caches) {
            node.peers = cache;
        }
        if let Some(initiator) = self.nodes.first_mut() {
            initiator.ssep_value = 1.0;
        }
        for i in 0..self.nodes.len() as NodeId {
            let offset = d1_offset(&self.params, i);
            engine.schedule(offset, i, BecpEvent::Generate);
            engine.schedule(offset, i, BecpEvent::Cycle);
        }
        if self.monitor.enabled {
            engine.schedule(self.params.cycle_s, 0, BecpEvent::MonitorTick);
        }
    }

    fn handle(&mut self, node: NodeId, ev: BecpEvent, engine: &mut Engine<BecpEvent>) {
        match ev {
            BecpEvent::Cycle => self.on_cycle(node, engine),
            BecpEvent::Generate => {
                self.nodes[node as usize].gen_attempts += 1;
                if engine.rng(node).gen_bool(self.params.p_block) {
                    self.generate_block(node, engine.now());
                }
                engine.schedule(
                    engine.now() + self.params.t_block_s,
                    node,
                    BecpEvent::Generate,
                );
            }
            BecpEvent::Deliver(msg) => self.on_deliver(node, msg, engine),
            BecpEvent::MonitorTick => {
                let now = engine.now();
                self.monitor.check(&self.nodes, now);
                engine.schedule(now + self.params.cycle_s, 0, BecpEvent::MonitorTick);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::GENESIS;
    use crate::engine::LatencyModel;

    fn summary(id: Height, o: NodeId, t: f64, parent: BlockRef) -> TupleSummary {
        TupleSummary {
            id,
            o,
            t,
            parent: Some(parent),
            vp: 0.5,
            wp: 0.25,
            va: 0.0,
            wa: 0.125,
            phase: Phase::Propagation,
        }
    }

    fn one_node_sim() -> BecpSim {
        BecpSim::new(1, BecpParams::default(), true)
    }

    #[test]
    fn halving_keeps_message_and_local_in_sync() {
        let mut sim = one_node_sim();
        let block = Block {
            id: 1,
            o: 0,
            t: 0.0,
            parent: Some(GENESIS),
        };
        let mut tuple = BlockTuple::originated(block);
        tuple.vp = 4.0;
        tuple.wp = 1.0;
        sim.nodes[0].cache.insert(tuple);
        let msg = sim.make_message(0, false);
        let local = sim.nodes[0].cache.get(BlockRef { id: 1, o: 0 }).unwrap();
        assert_eq!((local.vp, local.wp), (2.0, 0.5));
        assert_eq!((msg.tuples[0].vp, msg.tuples[0].wp), (2.0, 0.5));
    }

    #[test]
    fn originator_seeds_pairs_and_prefers_new_block() {
        let mut sim = one_node_sim();
        assert_eq!(sim.nodes[0].b_pref.id, 0);
        let r = sim.generate_block(0, 5.0).unwrap();
        assert_eq!(r, BlockRef { id: 1, o: 0 });
        let t = sim.nodes[0].cache.get(r).unwrap();
        assert_eq!((t.vp, t.wp, t.va, t.wa), (1.0, 1.0, 0.0, 1.0));
        assert_eq!(t.phase, Phase::Propagation);
        assert_eq!(sim.nodes[0].b_pref, r);
    }

    #[test]
    fn generation_guard_blocks_duplicate_own_id() {
        let mut sim = one_node_sim();
        // Own block at id 5 while B_pref is back at id 4.
        let own = Block {
            id: 5,
            o: 0,
            t: 1.0,
            parent: Some(BlockRef { id: 4, o: 3 }),
        };
        sim.nodes[0].cache.insert(BlockTuple::originated(own));
        sim.nodes[0].b_pref = BlockRef { id: 4, o: 3 };
        assert_eq!(sim.generate_block(0, 2.0), None);
    }

    #[test]
    fn merge_sums_pairs_of_identical_block() {
        let mut sim = one_node_sim();
        let block = Block {
            id: 1,
            o: 7,
            t: 5.0,
            parent: Some(GENESIS),
        };
        let mut tuple = BlockTuple::originated(block);
        tuple.vp = 1.0;
        tuple.wp = 1.0;
        tuple.va = 0.0;
        tuple.wa = 0.0;
        sim.nodes[0].cache.insert(tuple);
        let incoming = TupleSummary {
            id: 1,
            o: 7,
            t: 5.0,
            parent: Some(GENESIS),
            vp: 2.0,
            wp: 0.5,
            va: 0.0,
            wa: 0.0,
            phase: Phase::Propagation,
        };
        sim.resolve_duplicate(0, &[incoming]);
        let t = sim.nodes[0].cache.get(BlockRef { id: 1, o: 7 }).unwrap();
        assert_eq!((t.vp, t.wp, t.va, t.wa), (3.0, 1.5, 0.0, 0.0));
    }

    #[test]
    fn earlier_tie_breaks_by_originator_and_runs_backward() {
        // Cached (id=2, t=5.0, o=7) unconfirmed; incoming (id=2, t=5.0, o=3)
        // must evict it and become preferred.
        let mut sim = BecpSim::new(8, BecpParams::default(), true);
        let parent = Block {
            id: 1,
            o: 1,
            t: 1.0,
            parent: Some(GENESIS),
        };
        sim.nodes[0].cache.insert(BlockTuple::originated(parent));
        let old = Block {
            id: 2,
            o: 7,
            t: 5.0,
            parent: Some(parent.r()),
        };
        sim.nodes[0].cache.insert(BlockTuple::originated(old));
        sim.nodes[0].b_pref = old.r();
        let incoming = summary(2, 3, 5.0, parent.r());
        sim.resolve_duplicate(0, &[incoming]);
        assert!(!sim.nodes[0].cache.contains(BlockRef { id: 2, o: 7 }));
        let admitted = sim.nodes[0].cache.get(BlockRef { id: 2, o: 3 }).unwrap();
        assert_eq!(admitted.vp, incoming.vp + 1.0);
        assert_eq!(sim.nodes[0].b_pref, BlockRef { id: 2, o: 3 });
    }

    #[test]
    fn confirmed_block_drops_duplicates() {
        let mut sim = one_node_sim();
        let mut tuple = BlockTuple::originated(Block {
            id: 1,
            o: 2,
            t: 1.0,
            parent: Some(GENESIS),
        });
        tuple.phase = Phase::Commit;
        sim.nodes[0].cache.insert(tuple);
        // Better (t, o) but the height is confirmed: dropped.
        let incoming = summary(1, 0, 0.5, GENESIS);
        sim.resolve_duplicate(0, &[incoming]);
        assert!(sim.nodes[0].cache.contains(BlockRef { id: 1, o: 2 }));
        assert!(!sim.nodes[0].cache.contains(BlockRef { id: 1, o: 0 }));
    }

    #[test]
    fn admission_requires_extending_preferred_block() {
        let mut sim = one_node_sim();
        // Parent reference names a different block than B_pref: dropped.
        let orphan = summary(1, 3, 2.0, BlockRef { id: 0, o: 9 });
        sim.resolve_duplicate(0, &[orphan]);
        assert!(sim.nodes[0].cache.len() == 1);
        // Extending B_pref: admitted with the +1.
        let extending = summary(1, 3, 2.0, GENESIS);
        sim.resolve_duplicate(0, &[extending]);
        let t = sim.nodes[0].cache.get(BlockRef { id: 1, o: 3 }).unwrap();
        assert_eq!(t.vp, extending.vp + 1.0);
        assert_eq!(sim.nodes[0].b_pref, BlockRef { id: 1, o: 3 });
    }

    #[test]
    fn backward_removes_leaf_only() {
        let mut cache = BlockCache::new();
        cache.insert(BlockTuple::confirmed_genesis());
        let a = Block {
            id: 1,
            o: 0,
            t: 1.0,
            parent: Some(GENESIS),
        };
        let b = Block {
            id: 2,
            o: 0,
            t: 2.0,
            parent: Some(a.r()),
        };
        cache.insert(BlockTuple::originated(a));
        cache.insert(BlockTuple::originated(b));
        let removed = cache.backward(b.r());
        assert_eq!(removed.len(), 1);
        assert!(cache.contains(a.r()));
    }

    #[test]
    fn backward_removes_preferred_block_and_descendants() {
        // Chain 1 <- 2 <- 3 <- 4; backward(2) removes 2, 3 and 4.
        let mut cache = BlockCache::new();
        cache.insert(BlockTuple::confirmed_genesis());
        let mut parent = GENESIS;
        let mut refs = Vec::new();
        for id in 1..=4u64 {
            let b = Block {
                id,
                o: 3,
                t: id as f64,
                parent: Some(parent),
            };
            cache.insert(BlockTuple::originated(b));
            parent = b.r();
            refs.push(b.r());
        }
        let removed = cache.backward(refs[1]);
        let mut removed_ids: Vec<Height> = removed.iter().map(|t| t.block.id).collect();
        removed_ids.sort_unstable();
        assert_eq!(removed_ids, vec![2, 3, 4]);
        assert!(cache.contains(refs[0]));
    }

    #[test]
    fn backward_matches_bfs_descendants_on_random_tree() {
        use std::collections::VecDeque;
        let mut rng = crate::engine::substream(17, 99);
        // Random 20-block tree over distinct heights per branch.
        let mut cache = BlockCache::new();
        cache.insert(BlockTuple::confirmed_genesis());
        let mut refs = vec![GENESIS];
        for k in 0..20u32 {
            let parent = refs[rng.gen_range(0..refs.len())];
            let b = Block {
                id: parent.id + 1,
                o: 100 + k,
                t: k as f64,
                parent: Some(parent),
            };
            cache.insert(BlockTuple::originated(b));
            refs.push(b.r());
        }
        let target = refs[1 + rng.gen_range(0..20usize)];
        // BFS oracle over parent links.
        let mut expected = std::collections::BTreeSet::new();
        let mut frontier = VecDeque::from([target]);
        expected.insert(target);
        while let Some(r) = frontier.pop_front() {
            for (cr, t) in cache.iter() {
                if t.block.parent == Some(r) && expected.insert(*cr) {
                    frontier.push_back(*cr);
                }
            }
        }
        let removed: std::collections::BTreeSet<BlockRef> = cache
            .backward(target)
            .iter()
            .map(|t| t.block.r())
            .collect();
        assert_eq!(removed, expected);
    }

    #[test]
    fn conflicting_blocks_resolve_order_independently() {
        // Three conflicting blocks at one height in all six delivery
        // orders: the survivor is always the minimum by (t, then o).
        let candidates = [
            summary(1, 5, 3.0, GENESIS),
            summary(1, 2, 3.0, GENESIS),
            summary(1, 9, 2.5, GENESIS),
        ];
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms {
            let mut sim = one_node_sim();
            for idx in perm {
                sim.resolve_duplicate(0, &[candidates[idx]]);
            }
            assert_eq!(
                sim.nodes[0].b_pref,
                BlockRef { id: 1, o: 9 },
                "order {perm:?}"
            );
            assert_eq!(sim.nodes[0].cache.unconfirmed_refs().len(), 1);
        }
    }

    #[test]
    fn system_size_unknown_before_any_value_mass() {
        let node = BecpNode::new(3, 50);
        assert_eq!(node.system_size(), None);
    }

    #[test]
    fn initiator_estimates_one_immediately() {
        let mut node = BecpNode::new(0, 50);
        node.ssep_value = 1.0;
        assert_eq!(node.system_size(), Some(1.0));
    }

    #[test]
    fn single_node_commits_own_blocks() {
        // N = 1: estimate is exactly 1, every generated block eventually
        // commits, and the commit floor of 2*psi evaluations holds.
        let params = BecpParams {
            p_block: 1.0,
            ..Default::default()
        };
        let mut sim = BecpSim::new(1, params, true);
        let engine = Engine::new(1, 4, 60.0, LatencyModel::default());
        let stats = engine.run(&mut sim);
        assert_eq!(stats.messages_sent, 0, "isolated node skips its cycles");
        assert!(!stats.confirmations.is_empty());
        for c in &stats.confirmations {
            let commit_lag = c.confirmed_at - c.created_at;
            assert!(
                commit_lag >= 6.0 * 0.7 - 1e-9,
                "committed after {commit_lag}s, below the 2*psi cycle floor"
            );
        }
        assert!(sim.monitor.violations.is_empty());
    }

    #[test]
    fn small_network_converges_on_single_injected_block() {
        // 16 nodes, generation disabled; one block injected at node 0 must
        // reach COMMIT on the same block at all 16 nodes.
        let params = BecpParams {
            p_block: 0.0,
            ..Default::default()
        };
        let mut sim = BecpSim::new(16, params, true);
        let engine = Engine::new(16, 7, 60.0, LatencyModel::default());
        struct Wrapper<'a>(&'a mut BecpSim, bool);
        impl Protocol for Wrapper<'_> {
            type Event = BecpEvent;
            fn start(&mut self, engine: &mut Engine<BecpEvent>) {
                self.0.start(engine);
            }
            fn handle(&mut self, node: NodeId, ev: BecpEvent, engine: &mut Engine<BecpEvent>) {
                if !self.1 && engine.now() >= 1.0 {
                    self.1 = true;
                    self.0.generate_block(0, engine.now());
                }
                self.0.handle(node, ev, engine);
            }
        }
        let mut wrapper = Wrapper(&mut sim, false);
        let stats = engine.run(&mut wrapper);
        let committed: Vec<_> = stats
            .confirmations
            .iter()
            .filter(|c| c.block.id == 1)
            .collect();
        assert_eq!(committed.len(), 16, "every node commits the block");
        assert!(committed.iter().all(|c| c.block == committed[0].block));
        assert!(sim.monitor.violations.is_empty());
    }

    #[test]
    fn ssep_converges_at_small_scale() {
        // 32 nodes, 30 cycles: every node's size estimate within 1%.
        let params = BecpParams {
            p_block: 0.0,
            n_cache: 31,
            ..Default::default()
        };
        let mut sim = BecpSim::new(32, params, true);
        let engine = Engine::new(32, 1, 30.0 * 0.7 + 0.65, LatencyModel::default());
        let _ = engine.run(&mut sim);
        for node in &sim.nodes {
            let est = node.system_size().expect("value mass spread to all");
            assert!(
                (est - 32.0).abs() / 32.0 < 0.01,
                "node {} estimate {est}",
                node.id
            );
        }
        assert!(sim.monitor.violations.is_empty());
    }

    #[test]
    fn generation_count_matches_binomial_statistics() {
        // One isolated node attempting for 3600 s: attempts ~360 and the
        // generated count within 3 sigma of Binomial(360, 0.05).
        let mut sim = BecpSim::new(1, BecpParams::default(), false);
        let engine = Engine::new(1, 11, 3600.0, LatencyModel::default());
        let _ = engine.run(&mut sim);
        let attempts = sim.nodes[0].gen_attempts;
        assert!((360..=361).contains(&attempts), "attempts = {attempts}");
        let created = sim.nodes[0].gen_created as f64;
        let mean = attempts as f64 * 0.05;
        let sigma = (attempts as f64 * 0.05 * 0.95).sqrt();
        assert!(
            (created - mean).abs() <= 3.0 * sigma,
            "created {created}, expected {mean} +/- {}",
            3.0 * sigma
        );
    }
}
