//! Discrete-event core: virtual clock, ordered event queue, seeded
//! randomness, and the WAN latency model.
//!
//! Events are executed in nondecreasing `(deliver_at, seq)` order, where
//! `seq` is a monotone insertion counter, so ties at equal virtual time are
//! broken by scheduling order. One run is a single sequential loop; distinct
//! runs share nothing and may execute concurrently.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Node identifier, unique within a run.
pub type NodeId = u32;

/// Virtual time in seconds.
pub type SimTime = f64;

/// Uniform WAN latency model: every sample `d` satisfies `min_s <= d < max_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub min_s: f64,
    pub max_s: f64,
}

impl LatencyModel {
    pub fn new(min_s: f64, max_s: f64) -> Self {
        assert!(
            min_s >= 0.0 && min_s < max_s,
            "invalid latency bounds [{min_s}, {max_s})"
        );
        LatencyModel { min_s, max_s }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(self.min_s..self.max_s)
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::new(0.01, 0.3)
    }
}

/// Virtual clock. `now` is nondecreasing; no event past `end` executes.
#[derive(Debug, Clone, Copy)]
pub struct SimClock {
    pub now: SimTime,
    pub end: SimTime,
}

struct Entry<E> {
    at: SimTime,
    seq: u64,
    node: NodeId,
    ev: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    // Reversed so the BinaryHeap pops the smallest (at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue of scheduled events ordered by `(deliver_at, seq)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }

    pub fn push(&mut self, at: SimTime, node: NodeId, ev: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, node, ev });
        seq
    }

    pub fn pop(&mut self) -> Option<(SimTime, u64, NodeId, E)> {
        self.heap.pop().map(|e| (e.at, e.seq, e.node, e.ev))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// A `(node, block)` confirmation observed during a run.
#[derive(Debug, Clone, Copy)]
pub struct Confirmation {
    pub node: NodeId,
    pub block: crate::block::BlockRef,
    pub parent: Option<crate::block::BlockRef>,
    pub created_at: SimTime,
    pub confirmed_at: SimTime,
}

/// Aggregate counters produced by [`Engine::run`].
#[derive(Debug, Clone)]
pub struct RunStats {
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub dropped_at_end: u64,
    pub confirmations: Vec<Confirmation>,
    pub end_time: SimTime,
}

/// A protocol drives the simulation by handling its own event type.
///
/// All node state lives inside the protocol; the engine only owns time,
/// the queue, per-node RNG substreams, and metric counters.
pub trait Protocol {
    type Event;

    /// Schedule the initial events of the run.
    fn start(&mut self, engine: &mut Engine<Self::Event>);

    /// Handle one event addressed to `node` at the current virtual time.
    fn handle(&mut self, node: NodeId, ev: Self::Event, engine: &mut Engine<Self::Event>);
}

/// The sequential event loop plus everything protocols need from it.
pub struct Engine<E> {
    pub clock: SimClock,
    queue: EventQueue<E>,
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
    latency: LatencyModel,
    messages_sent: u64,
    messages_delivered: u64,
    confirmations: Vec<Confirmation>,
    last_key: (SimTime, u64),
}

// SplitMix64; used to derive independent per-node RNG substreams from the
// run seed so node behavior does not depend on scheduling order.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive the RNG substream for `stream` (a node id or a reserved stream)
/// from the run seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream.wrapping_add(1))))
}

impl<E> Engine<E> {
    pub fn new(n: u32, seed: u64, end: SimTime, latency: LatencyModel) -> Self {
        let rngs = (0..n as u64).map(|i| substream(seed, i)).collect();
        Engine {
            clock: SimClock { now: 0.0, end },
            queue: EventQueue::new(),
            seed,
            rngs,
            latency,
            messages_sent: 0,
            messages_delivered: 0,
            confirmations: Vec::new(),
            last_key: (f64::NEG_INFINITY, 0),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock.now
    }

    pub fn rng(&mut self, node: NodeId) -> &mut ChaCha8Rng {
        &mut self.rngs[node as usize]
    }

    /// RNG substream for non-node purposes (bootstrap, initial offsets).
    /// Tags above `NodeId::MAX` never collide with node substreams.
    pub fn aux_stream(&self, tag: u64) -> ChaCha8Rng {
        substream(self.seed, tag)
    }

    /// Schedule a local event (timer). Scheduling into the past is a
    /// programming error and fails loudly.
    pub fn schedule(&mut self, at: SimTime, node: NodeId, ev: E) {
        assert!(
            at >= self.clock.now,
            "scheduling into the past: at={at} now={}",
            self.clock.now
        );
        self.queue.push(at, node, ev);
    }

    /// Send a network message from `from` to `to`: samples a latency from
    /// the sender's substream, counts the message, and schedules delivery.
    pub fn send(&mut self, from: NodeId, to: NodeId, ev: E) {
        let delay = self.latency.sample(&mut self.rngs[from as usize]);
        self.messages_sent += 1;
        let at = self.clock.now + delay;
        self.queue.push(at, to, ev);
    }

    /// Record that `node` confirmed `block` at the current virtual time.
    pub fn record_confirmation(
        &mut self,
        node: NodeId,
        block: crate::block::BlockRef,
        parent: Option<crate::block::BlockRef>,
        created_at: SimTime,
    ) {
        self.confirmations.push(Confirmation {
            node,
            block,
            parent,
            created_at,
            confirmed_at: self.clock.now,
        });
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    /// Run the event loop to completion: every event with
    /// `deliver_at <= end` is processed in `(deliver_at, seq)` order; later
    /// ones are dropped.
    pub fn run<P: Protocol<Event = E>>(mut self, protocol: &mut P) -> RunStats {
        protocol.start(&mut self);
        let mut dropped = 0u64;
        while let Some((at, seq, node, ev)) = self.queue.pop() {
            if at > self.clock.end {
                dropped += 1;
                continue;
            }
            debug_assert!(
                (at, seq) > self.last_key || self.last_key.0 == f64::NEG_INFINITY,
                "event executed out of (deliver_at, seq) order"
            );
            self.last_key = (at, seq);
            self.clock.now = at;
            self.messages_delivered += 1;
            protocol.handle(node, ev, &mut self);
        }
        RunStats {
            messages_sent: self.messages_sent,
            messages_delivered: self.messages_delivered,
            dropped_at_end: dropped,
            confirmations: std::mem::take(&mut self.confirmations),
            end_time: self.clock.now,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dequeues_in_time_order() {
        let mut q = EventQueue::new();
        q.push(5.0, 0, "b");
        q.push(3.0, 0, "a");
        assert_eq!(q.pop().unwrap().3, "a");
        assert_eq!(q.pop().unwrap().3, "b");
    }

    #[test]
    fn equal_times_break_ties_by_seq() {
        let mut q = EventQueue::new();
        let s7 = q.push(2.0, 0, "first");
        let s8 = q.push(2.0, 0, "second");
        assert!(s7 < s8);
        let (_, seq_a, _, a) = q.pop().unwrap();
        let (_, seq_b, _, b) = q.pop().unwrap();
        assert_eq!((a, b), ("first", "second"));
        assert!(seq_a < seq_b);
    }

    #[test]
    fn random_schedule_matches_sort_oracle() {
        // 1e5 random schedules must dequeue exactly as the oracle sort by
        // (deliver_at, seq).
        let mut rng = substream(42, 0);
        let mut q = EventQueue::new();
        let mut oracle = Vec::new();
        for i in 0..100_000u64 {
            let at: f64 = rng.gen_range(0.0..1000.0);
            // Duplicate some times on purpose to exercise the tie-break.
            let at = (at * 8.0).round() / 8.0;
            let seq = q.push(at, 0, i);
            oracle.push((at, seq, i));
        }
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(at, seq, i) in &oracle {
            let (qa, qs, _, qi) = q.pop().unwrap();
            assert_eq!((qa, qs, qi), (at, seq, i));
        }
        assert!(q.is_empty());
    }

    #[test]
    fn latency_samples_within_bounds() {
        let model = LatencyModel::default();
        let mut rng = substream(1, 1);
        for _ in 0..10_000 {
            let d = model.sample(&mut rng);
            assert!((0.01..0.3).contains(&d));
        }
    }

    #[test]
    fn latency_mean_matches_analytic_value() {
        // Analytic mean of U[0.01, 0.3) is 0.155.
        let model = LatencyModel::default();
        let mut rng = substream(7, 3);
        let mut sum = 0.0;
        const N: usize = 1_000_000;
        for _ in 0..N {
            sum += model.sample(&mut rng);
        }
        let mean = sum / N as f64;
        assert!((mean - 0.155).abs() < 0.002, "mean = {mean}");
    }

    #[test]
    #[should_panic(expected = "scheduling into the past")]
    fn scheduling_into_the_past_fails_loudly() {
        let mut engine: Engine<()> = Engine::new(1, 0, 10.0, LatencyModel::default());
        engine.clock.now = 5.0;
        engine.schedule(4.9, 0, ());
    }

    #[test]
    fn substreams_differ_per_node() {
        let mut a = substream(9, 0);
        let mut b = substream(9, 1);
        let xs: Vec<u64> = (0..4).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.gen()).collect();
        assert_ne!(xs, ys);
    }

    proptest! {
        #[test]
        fn queue_pops_nondecreasing(times in proptest::collection::vec(0.0f64..100.0, 1..200)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.push(*t, 0, i);
            }
            let mut last = (f64::NEG_INFINITY, 0u64);
            while let Some((at, seq, _, _)) = q.pop() {
                prop_assert!((at, seq) > last || last.0 == f64::NEG_INFINITY);
                last = (at, seq);
            }
        }
    }
}
