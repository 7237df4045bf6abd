//! Chain elements shared by all protocols.

use crate::engine::{NodeId, SimTime};

/// Block height; genesis sits at height 0.
pub type Height = u64;

/// Reserved originator id for the genesis block. Never a real node.
pub const GENESIS_ORIGIN: NodeId = NodeId::MAX;

/// Reference identifying a block by height and originator, standing in for
/// a hash. `(id, o)` pairs are unique within a run per the generation guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockRef {
    pub id: Height,
    pub o: NodeId,
}

/// Reference to the genesis block, identical at every node.
pub const GENESIS: BlockRef = BlockRef {
    id: 0,
    o: GENESIS_ORIGIN,
};

/// A chain element: height, originator, creation time, and parent link.
/// Non-genesis blocks satisfy `id == parent.id + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub id: Height,
    pub o: NodeId,
    pub t: SimTime,
    pub parent: Option<BlockRef>,
}

impl Block {
    pub fn genesis() -> Self {
        Block {
            id: 0,
            o: GENESIS_ORIGIN,
            t: 0.0,
            parent: None,
        }
    }

    pub fn r(&self) -> BlockRef {
        BlockRef {
            id: self.id,
            o: self.o,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.parent.is_none()
    }
}
