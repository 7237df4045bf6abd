//! Node Cache Protocol (NCP): decentralised peer sampling.
//!
//! Each node keeps a bounded random view of the membership and draws gossip
//! partners from it with `get_random`, so no node needs global knowledge.
//! Views are refreshed by merging the peer list piggybacked on every cycle
//! message and evicting uniformly at random down to capacity.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("node {0} has an empty peer cache")]
pub struct IsolatedNode(pub NodeId);

/// Bounded random membership view. Invariants: `len() <= capacity`, the
/// owner is never an entry, and every entry names an existing node.
#[derive(Debug, Clone)]
pub struct PeerCache {
    entries: BTreeSet<NodeId>,
    capacity: usize,
}

impl PeerCache {
    pub fn new(capacity: usize) -> Self {
        PeerCache {
            entries: BTreeSet::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().copied()
    }

    /// Snapshot of the view, in ascending id order.
    pub fn to_vec(&self) -> Vec<NodeId> {
        self.entries.iter().copied().collect()
    }

    /// Uniformly chosen cache entry, or an error for an isolated node (the
    /// caller skips the cycle).
    pub fn get_random(&self, owner: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId, IsolatedNode> {
        if self.entries.is_empty() {
            return Err(IsolatedNode(owner));
        }
        let idx = rng.gen_range(0..self.entries.len());
        Ok(*self.entries.iter().nth(idx).expect("index in range"))
    }

    /// Merge a received peer list (plus its sender) into the local view:
    /// the result is a subset of `local ∪ received ∪ {sender}` with the
    /// owner excluded; when the merge exceeds capacity, the survivors are a
    /// uniform random subset of the merged set.
    pub fn exchange(
        &mut self,
        owner: NodeId,
        received: &[NodeId],
        sender: NodeId,
        rng: &mut ChaCha8Rng,
    ) {
        let mut merged: BTreeSet<NodeId> = self.entries.clone();
        merged.extend(received.iter().copied());
        merged.insert(sender);
        merged.remove(&owner);
        if merged.len() <= self.capacity {
            self.entries = merged;
            return;
        }
        let mut pool: Vec<NodeId> = merged.into_iter().collect();
        // Partial Fisher-Yates: the first `capacity` slots end up a uniform
        // random subset.
        for i in 0..self.capacity {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(self.capacity);
        self.entries = pool.into_iter().collect();
    }

    #[cfg(test)]
    pub(crate) fn insert_unchecked(&mut self, id: NodeId) {
        self.entries.insert(id);
    }
}

/// Seed every node's view with `min(n_cache, n - 1)` distinct peers drawn
/// uniformly without self.
pub fn bootstrap(n: u32, n_cache: usize, rng: &mut ChaCha8Rng) -> Vec<PeerCache> {
    assert!(
        n < 2 || n_cache > 0,
        "n_cache = 0 with more than one node is a configuration error"
    );
    let mut caches = Vec::with_capacity(n as usize);
    for me in 0..n {
        let mut cache = PeerCache::new(n_cache);
        let want = n_cache.min(n as usize - 1);
        if want * 2 >= n as usize {
            // Dense case: shuffle all other ids and keep a prefix.
            let mut pool: Vec<NodeId> = (0..n).filter(|&x| x != me).collect();
            for i in 0..want {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            cache.entries = pool[..want].iter().copied().collect();
        } else {
            while cache.entries.len() < want {
                let candidate = rng.gen_range(0..n);
                if candidate != me {
                    cache.entries.insert(candidate);
                }
            }
        }
        caches.push(cache);
    }
    caches
}
