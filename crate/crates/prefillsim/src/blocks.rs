//! Content-addressed KV block tracking.
//!
//! Sequences are split into fixed-size token blocks and each block is named
//! by a chained 64-bit hash, so equal hashes at position i imply the entire
//! prefix up to and including block i is identical. A [`BlockTable`] tracks
//! which blocks a device holds (committed, with LRU eviction under a byte
//! budget) and which are promised by routed-but-unexecuted requests
//! (pending, tagged with the originating request ids).

use std::collections::{BTreeMap, HashMap, HashSet};

/// Fixed seed folded into the first block's hash so chains are reproducible
/// across processes. Changing it invalidates every stored chain.
pub const HASH_SEED: u64 = 0x7072_6566_696c_6c73;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn hash_block(prev: u64, tokens: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &prev.to_le_bytes());
    for t in tokens {
        h = fnv1a(h, &t.to_le_bytes());
    }
    h
}

/// Hashes `tokens` into its chain of block hashes: block i covers tokens
/// `[i*block_size, (i+1)*block_size)` and folds block i-1's hash (the seed
/// for block 0), so a match at any position implies all earlier blocks
/// match. A trailing partial block is not hashed.
pub fn block_hash_chain(tokens: &[u64], block_size: u64) -> Vec<u64> {
    assert!(block_size >= 1, "block_size must be at least 1");
    let bs = block_size as usize;
    let full = tokens.len() / bs;
    let mut chain = Vec::with_capacity(full);
    let mut prev = HASH_SEED;
    for i in 0..full {
        let h = hash_block(prev, &tokens[i * bs..(i + 1) * bs]);
        chain.push(h);
        prev = h;
    }
    chain
}

/// Per-device view of KV block residency.
///
/// Committed blocks model what the engine's cache holds; they are evicted
/// least-recently-stored-first once their KV bytes exceed the budget.
/// Pending blocks were claimed by an assigned request that has not executed
/// yet; they count as matchable immediately so same-prefix bursts inside one
/// round converge, and they survive until promoted by a stored event or
/// dropped by the last originating request's abort.
#[derive(Debug, Clone)]
pub struct BlockTable {
    committed: HashMap<u64, u64>,
    lru: BTreeMap<u64, u64>,
    pending: HashMap<u64, HashSet<u64>>,
    origin_blocks: HashMap<u64, Vec<u64>>,
    budget_bytes: u64,
    block_bytes: u64,
    tick: u64,
}

impl BlockTable {
    /// `budget_bytes` caps committed blocks at `block_bytes` each; a zero
    /// block cost disables eviction (nothing ever outgrows the budget).
    pub fn new(budget_bytes: u64, block_bytes: u64) -> Self {
        BlockTable {
            committed: HashMap::new(),
            lru: BTreeMap::new(),
            pending: HashMap::new(),
            origin_blocks: HashMap::new(),
            budget_bytes,
            block_bytes,
            tick: 0,
        }
    }

    pub fn contains(&self, hash: u64) -> bool {
        self.committed.contains_key(&hash) || self.pending.contains_key(&hash)
    }

    /// Largest m such that the chain's first m hashes are all resident
    /// (committed or pending). Chaining makes the scan stop at the first
    /// miss.
    pub fn longest_match(&self, chain: &[u64]) -> u64 {
        let mut m = 0;
        for h in chain {
            if !self.contains(*h) {
                break;
            }
            m += 1;
        }
        m
    }

    /// Marks `hash` as promised by `origin` until stored or aborted.
    pub fn pend(&mut self, hash: u64, origin: u64) {
        self.pending.entry(hash).or_default().insert(origin);
        self.origin_blocks.entry(origin).or_default().push(hash);
    }

    /// Commits `hash` (promoting it out of pending entirely, regardless of
    /// how many requests promised it) and refreshes its recency. Returns the
    /// blocks evicted to stay within budget.
    pub fn store(&mut self, hash: u64) -> Vec<u64> {
        self.pending.remove(&hash);
        if let Some(old) = self.committed.remove(&hash) {
            self.lru.remove(&old);
        }
        self.tick += 1;
        self.committed.insert(hash, self.tick);
        self.lru.insert(self.tick, hash);
        let mut evicted = Vec::new();
        if self.block_bytes > 0 {
            while self.committed.len() as u64 * self.block_bytes > self.budget_bytes {
                let (&tick, &victim) = match self.lru.iter().next() {
                    Some(kv) => kv,
                    None => break,
                };
                self.lru.remove(&tick);
                self.committed.remove(&victim);
                evicted.push(victim);
            }
        }
        evicted
    }

    /// Drops `hash` from committed, if present.
    pub fn evict(&mut self, hash: u64) {
        if let Some(tick) = self.committed.remove(&hash) {
            self.lru.remove(&tick);
        }
    }

    /// Withdraws every pending claim made by `origin`; blocks nobody else
    /// promised disappear from the table.
    pub fn abort(&mut self, origin: u64) {
        let Some(blocks) = self.origin_blocks.remove(&origin) else {
            return;
        };
        for h in blocks {
            if let Some(origins) = self.pending.get_mut(&h) {
                origins.remove(&origin);
                if origins.is_empty() {
                    self.pending.remove(&h);
                }
            }
        }
    }

    pub fn committed_len(&self) -> usize {
        self.committed.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn committed_bytes(&self) -> u64 {
        self.committed.len() as u64 * self.block_bytes
    }
}
