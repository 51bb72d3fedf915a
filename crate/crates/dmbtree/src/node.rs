//! Tree node layout and in-node primitives.
//!
//! A node is a fixed-size array of 64-bit words with this layout (word
//! offsets; all fields 8 bytes, little-endian when serialized to bytes):
//!
//! ```text
//! 0  version_lock   bit 0 = write-locked, bits 1..64 = version counter
//! 1  self_addr      unswizzled global address of this node
//! 2  level          0 = leaf
//! 3  count          number of keys
//! 4  low_fence      inclusive lower bound
//! 5  high_fence     exclusive upper bound; u64::MAX means +infinity
//! 6.. payload
//! ```
//!
//! Leaf payload: `keys[0..cap]` then `values[0..cap]` at fixed offsets.
//! Inner payload: `keys[0..kcap]` then `children[0..kcap+1]`, where child
//! `i` covers `[keys[i-1], keys[i])` with the fences at the extremes.
//!
//! The same accessors work on pool regions, cache frames and scratch
//! buffers because all of them store nodes as `[AtomicU64]`. Mutators
//! assume the caller holds the matching version lock; optimistic readers
//! must treat everything they read as potentially torn until validated,
//! which is why `count()` clamps to capacity and searches are panic-free.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::fabric::GlobalAddress;

pub const HEADER_WORDS: usize = 6;
const W_VERSION: usize = 0;
const W_SELF: usize = 1;
const W_LEVEL: usize = 2;
const W_COUNT: usize = 3;
const W_LOW: usize = 4;
const W_HIGH: usize = 5;

/// Distinguished +infinity high fence. Stored keys must be strictly below.
pub const KEY_INFINITY: u64 = u64::MAX;

pub fn node_words(node_size: usize) -> usize {
    assert!(node_size % 8 == 0 && node_size / 8 > HEADER_WORDS + 4, "node_size too small");
    node_size / 8
}

pub fn leaf_capacity(words: usize) -> usize {
    (words - HEADER_WORDS) / 2
}

pub fn inner_key_capacity(words: usize) -> usize {
    (words - HEADER_WORDS - 1) / 2
}

/// Version-lock word helpers, shared by node headers and cache frame locks.
pub mod vlock {
    use std::sync::atomic::{AtomicU64, Ordering};

    pub const LOCK_BIT: u64 = 1;

    pub fn is_locked(v: u64) -> bool {
        v & LOCK_BIT != 0
    }

    pub fn read(word: &AtomicU64) -> u64 {
        word.load(Ordering::Acquire)
    }

    /// Acquire exclusively, but only if the version still equals the one the
    /// caller validated optimistically.
    pub fn try_lock_from(word: &AtomicU64, seen: u64) -> bool {
        !is_locked(seen)
            && word
                .compare_exchange(seen, seen | LOCK_BIT, Ordering::AcqRel, Ordering::Relaxed)
                .is_ok()
    }

    /// Release after a modification: bumps the version so optimistic readers
    /// revalidate. A locked word is odd, so +1 yields the next even version.
    pub fn unlock_bump(word: &AtomicU64) {
        let v = word.load(Ordering::Relaxed);
        debug_assert!(is_locked(v));
        word.store(v + 1, Ordering::Release);
    }

    /// Release without a modification: restores the pre-lock version so
    /// concurrent optimistic readers stay valid.
    pub fn unlock_restore(word: &AtomicU64) {
        let v = word.load(Ordering::Relaxed);
        debug_assert!(is_locked(v));
        word.store(v & !LOCK_BIT, Ordering::Release);
    }
}

/// Borrowed view over one node's words. Copy-cheap; all methods are
/// bounds-safe under torn concurrent reads.
#[derive(Clone, Copy)]
pub struct NodeView<'a> {
    w: &'a [AtomicU64],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafInsert {
    Inserted,
    Updated,
    Full,
}

impl<'a> NodeView<'a> {
    pub fn new(words: &'a [AtomicU64]) -> Self {
        debug_assert!(words.len() > HEADER_WORDS + 4);
        NodeView { w: words }
    }

    pub fn words(&self) -> usize {
        self.w.len()
    }

    fn get(&self, i: usize) -> u64 {
        self.w[i].load(Ordering::Relaxed)
    }

    fn set(&self, i: usize, v: u64) {
        self.w[i].store(v, Ordering::Relaxed)
    }

    pub fn version_word(&self) -> &AtomicU64 {
        &self.w[W_VERSION]
    }

    pub fn version(&self) -> u64 {
        vlock::read(&self.w[W_VERSION])
    }

    pub fn set_version(&self, v: u64) {
        self.w[W_VERSION].store(v, Ordering::Release)
    }

    pub fn self_addr(&self) -> GlobalAddress {
        GlobalAddress::from_word(self.get(W_SELF))
    }

    pub fn set_self_addr(&self, a: GlobalAddress) {
        self.set(W_SELF, a.word())
    }

    pub fn level(&self) -> u64 {
        self.get(W_LEVEL)
    }

    pub fn is_leaf(&self) -> bool {
        self.level() == 0
    }

    pub fn low_fence(&self) -> u64 {
        self.get(W_LOW)
    }

    pub fn high_fence(&self) -> u64 {
        self.get(W_HIGH)
    }

    pub fn set_fences(&self, low: u64, high: u64) {
        self.set(W_LOW, low);
        self.set(W_HIGH, high);
    }

    pub fn contains(&self, key: u64) -> bool {
        key >= self.low_fence() && key < self.high_fence()
    }

    pub fn leaf_cap(&self) -> usize {
        leaf_capacity(self.w.len())
    }

    pub fn inner_cap(&self) -> usize {
        inner_key_capacity(self.w.len())
    }

    fn cap(&self) -> usize {
        if self.is_leaf() {
            self.leaf_cap()
        } else {
            self.inner_cap()
        }
    }

    /// Key count, clamped so a torn read can never drive an out-of-bounds
    /// access downstream.
    pub fn count(&self) -> usize {
        (self.get(W_COUNT) as usize).min(self.cap())
    }

    pub fn set_count(&self, n: usize) {
        self.set(W_COUNT, n as u64)
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.cap()
    }

    pub fn key_at(&self, i: usize) -> u64 {
        self.get(HEADER_WORDS + i)
    }

    fn set_key(&self, i: usize, k: u64) {
        self.set(HEADER_WORDS + i, k)
    }

    fn value_slot(&self, i: usize) -> usize {
        HEADER_WORDS + self.leaf_cap() + i
    }

    pub fn value_at(&self, i: usize) -> u64 {
        self.get(self.value_slot(i))
    }

    fn set_value(&self, i: usize, v: u64) {
        self.set(self.value_slot(i), v)
    }

    fn child_slot(&self, i: usize) -> usize {
        HEADER_WORDS + self.inner_cap() + i
    }

    /// Raw child reference word; swizzled in cache copies, a global address
    /// word otherwise.
    pub fn child_word(&self, i: usize) -> u64 {
        self.get(self.child_slot(i))
    }

    pub fn set_child_word(&self, i: usize, w: u64) {
        self.set(self.child_slot(i), w)
    }

    pub fn child_word_atom(&self, i: usize) -> &AtomicU64 {
        &self.w[self.child_slot(i)]
    }

    fn upper_bound(&self, key: u64) -> usize {
        let n = self.count();
        let mut lo = 0;
        let mut hi = n;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.key_at(mid) <= key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Inner search: returns the slot of the unique child covering `key`,
    /// plus that child's reference word and separator interval.
    pub fn search_child(&self, key: u64) -> ChildRef {
        debug_assert!(!self.is_leaf());
        let n = self.count();
        let slot = self.upper_bound(key);
        let low = if slot == 0 { self.low_fence() } else { self.key_at(slot - 1) };
        let high = if slot == n { self.high_fence() } else { self.key_at(slot) };
        ChildRef { slot, word: self.child_word(slot), low, high }
    }

    /// Leaf point lookup.
    pub fn leaf_search(&self, key: u64) -> Option<u64> {
        debug_assert!(self.is_leaf());
        let i = self.upper_bound(key);
        if i > 0 && self.key_at(i - 1) == key {
            Some(self.value_at(i - 1))
        } else {
            None
        }
    }

    /// Sorted insert-or-update. Returns `Full` without modifying anything if
    /// the key is absent and the leaf is at capacity.
    pub fn leaf_insert(&self, key: u64, value: u64) -> LeafInsert {
        debug_assert!(self.is_leaf());
        let n = self.count();
        let i = self.upper_bound(key);
        if i > 0 && self.key_at(i - 1) == key {
            self.set_value(i - 1, value);
            return LeafInsert::Updated;
        }
        if n == self.leaf_cap() {
            return LeafInsert::Full;
        }
        for j in (i..n).rev() {
            self.set_key(j + 1, self.key_at(j));
            self.set_value(j + 1, self.value_at(j));
        }
        self.set_key(i, key);
        self.set_value(i, value);
        self.set_count(n + 1);
        LeafInsert::Inserted
    }

    pub fn leaf_remove(&self, key: u64) -> Option<u64> {
        debug_assert!(self.is_leaf());
        let n = self.count();
        let i = self.upper_bound(key);
        if i == 0 || self.key_at(i - 1) != key {
            return None;
        }
        let old = self.value_at(i - 1);
        for j in i..n {
            self.set_key(j - 1, self.key_at(j));
            self.set_value(j - 1, self.value_at(j));
        }
        self.set_count(n - 1);
        Some(old)
    }

    /// Inserts a separator and the right-sibling reference that covers
    /// `[sep, old-interval-high)`. Returns false (unmodified) when full.
    pub fn inner_insert(&self, sep: u64, right_word: u64) -> bool {
        debug_assert!(!self.is_leaf());
        let n = self.count();
        if n == self.inner_cap() {
            return false;
        }
        let i = self.upper_bound(sep);
        for j in (i..n).rev() {
            self.set_key(j + 1, self.key_at(j));
        }
        for j in (i + 1..=n + 1).rev() {
            self.set_child_word(j, self.child_word(j - 1));
        }
        self.set_key(i, sep);
        self.set_child_word(i + 1, right_word);
        self.set_count(n + 1);
        true
    }

    /// Removes separator `keys[sep_idx]` and the child to its right (used
    /// after merging children `sep_idx` and `sep_idx + 1`).
    pub fn inner_remove(&self, sep_idx: usize) {
        debug_assert!(!self.is_leaf());
        let n = self.count();
        debug_assert!(sep_idx < n);
        for j in sep_idx + 1..n {
            self.set_key(j - 1, self.key_at(j));
        }
        for j in sep_idx + 2..=n {
            self.set_child_word(j - 1, self.child_word(j));
        }
        self.set_count(n - 1);
    }

    pub fn set_key_at(&self, i: usize, k: u64) {
        self.set_key(i, k)
    }

    /// Moves the upper half of this node into `right` (already headered with
    /// level and self_addr by the caller) and returns the separator. For
    /// leaves the separator stays as the right half's first key; for inner
    /// nodes it is pushed up and removed from both halves.
    pub fn split_into(&self, right: NodeView) -> u64 {
        let n = self.count();
        debug_assert!(n >= 2);
        right.set(W_LEVEL, self.level());
        if self.is_leaf() {
            let left_n = n.div_ceil(2);
            let sep = self.key_at(left_n);
            for (j, i) in (left_n..n).enumerate() {
                right.set_key(j, self.key_at(i));
                right.set_value(j, self.value_at(i));
            }
            right.set_count(n - left_n);
            right.set_fences(sep, self.high_fence());
            self.set_count(left_n);
            self.set(W_HIGH, sep);
            sep
        } else {
            let mid = n / 2;
            let sep = self.key_at(mid);
            for (j, i) in (mid + 1..n).enumerate() {
                right.set_key(j, self.key_at(i));
            }
            for (j, i) in (mid + 1..=n).enumerate() {
                right.set_child_word(j, self.child_word(i));
            }
            right.set_count(n - mid - 1);
            right.set_fences(sep, self.high_fence());
            self.set_count(mid);
            self.set(W_HIGH, sep);
            sep
        }
    }

    /// Point-in-time copy of the whole node.
    pub fn snapshot(&self) -> Vec<u64> {
        self.w.iter().map(|x| x.load(Ordering::Acquire)).collect()
    }

    pub fn load_from(&self, src: &[u64]) {
        debug_assert_eq!(src.len(), self.w.len());
        for (d, s) in self.w.iter().zip(src) {
            d.store(*s, Ordering::Relaxed);
        }
    }

    pub fn init_leaf(&self, addr: GlobalAddress, low: u64, high: u64) {
        self.init(addr, 0, low, high)
    }

    pub fn init(&self, addr: GlobalAddress, level: u64, low: u64, high: u64) {
        for w in self.w {
            w.store(0, Ordering::Relaxed);
        }
        self.set(W_SELF, addr.word());
        self.set(W_LEVEL, level);
        self.set_fences(low, high);
    }
}

/// Result of an inner-node child search.
#[derive(Clone, Copy, Debug)]
pub struct ChildRef {
    pub slot: usize,
    pub word: u64,
    pub low: u64,
    pub high: u64,
}

/// Owned scratch storage for one node image.
pub fn new_node_buf(words: usize) -> Box<[AtomicU64]> {
    (0..words).map(|_| AtomicU64::new(0)).collect()
}

/// How nodes are placed across memory servers.
#[derive(Clone, Copy, Debug)]
pub struct PlacementConfig {
    /// Subtree-grouping level: a subtree rooted at this level lives entirely
    /// on one memory server, so nodes at or below it split on their own
    /// server. Nodes above it are spread round-robin.
    pub subtree_level: u64,
    pub node_size: usize,
    /// Bulk-load fill factor.
    pub fill: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig { subtree_level: 3, node_size: 1024, fill: 0.8 }
    }
}

impl PlacementConfig {
    pub fn node_words(&self) -> usize {
        node_words(self.node_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf() -> Box<[AtomicU64]> {
        new_node_buf(node_words(1024))
    }

    #[test]
    fn capacities_for_1k_nodes() {
        let w = node_words(1024);
        assert_eq!(w, 128);
        assert_eq!(leaf_capacity(w), 61);
        assert_eq!(inner_key_capacity(w), 60);
    }

    #[test]
    fn leaf_search_and_insert() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init_leaf(GlobalAddress::new(0, 8), 0, KEY_INFINITY);
        assert_eq!(n.leaf_insert(7, 70), LeafInsert::Inserted);
        assert_eq!(n.leaf_insert(5, 50), LeafInsert::Inserted);
        assert_eq!(n.count(), 2);
        assert_eq!(n.leaf_search(7), Some(70));
        assert_eq!(n.leaf_search(6), None);
        assert_eq!(n.leaf_insert(7, 71), LeafInsert::Updated);
        assert_eq!(n.leaf_search(7), Some(71));
        assert_eq!(n.key_at(0), 5);
    }

    #[test]
    fn leaf_full_is_unmodified() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init_leaf(GlobalAddress::new(0, 8), 0, KEY_INFINITY);
        for k in 0..n.leaf_cap() as u64 {
            assert_eq!(n.leaf_insert(k * 2, k), LeafInsert::Inserted);
        }
        let before = n.snapshot();
        assert_eq!(n.leaf_insert(1, 99), LeafInsert::Full);
        assert_eq!(n.snapshot(), before);
        // updates still work at capacity
        assert_eq!(n.leaf_insert(0, 123), LeafInsert::Updated);
    }

    #[test]
    fn inner_separator_semantics() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init(GlobalAddress::new(0, 8), 1, 0, KEY_INFINITY);
        n.set_child_word(0, 0xa);
        n.set_count(0);
        assert!(n.inner_insert(10, 0xb));
        let c = n.search_child(3);
        assert_eq!((c.slot, c.word), (0, 0xa));
        assert_eq!((c.low, c.high), (0, 10));
        let c = n.search_child(10);
        assert_eq!((c.slot, c.word), (1, 0xb));
        assert_eq!((c.low, c.high), (10, KEY_INFINITY));
    }

    #[test]
    fn leaf_split_median() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init_leaf(GlobalAddress::new(0, 8), 0, KEY_INFINITY);
        let cap = n.leaf_cap() as u64;
        for k in 1..=cap {
            n.leaf_insert(k, k * 10);
        }
        let rb = buf();
        let r = NodeView::new(&rb);
        r.init_leaf(GlobalAddress::new(0, 2048), 0, 0);
        let sep = n.split_into(r);
        assert_eq!(n.count() as u64, cap.div_ceil(2));
        assert_eq!(r.count() as u64, cap - cap.div_ceil(2));
        assert_eq!(sep, r.key_at(0));
        assert_eq!(n.high_fence(), sep);
        assert_eq!(r.low_fence(), sep);
        assert_eq!(r.high_fence(), KEY_INFINITY);
        assert_eq!(r.leaf_search(cap), Some(cap * 10));
    }

    #[test]
    fn inner_split_pushes_separator_up() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init(GlobalAddress::new(0, 8), 2, 0, 1000);
        n.set_child_word(0, 1000);
        for i in 0..20u64 {
            assert!(n.inner_insert((i + 1) * 10, 1001 + i));
        }
        let rb = buf();
        let r = NodeView::new(&rb);
        r.init(GlobalAddress::new(0, 2048), 2, 0, 0);
        let sep = n.split_into(r);
        assert_eq!(sep, 110);
        assert_eq!(n.count(), 10);
        assert_eq!(r.count(), 9);
        // separator key lives in neither half
        assert_eq!(n.high_fence(), sep);
        assert_eq!(r.low_fence(), sep);
        // child coverage stays continuous
        assert_eq!(n.search_child(105).word, 1010);
        assert_eq!(r.search_child(115).word, 1011);
        assert_eq!(r.search_child(999).word, 1020);
    }

    #[test]
    fn inner_insert_and_remove_round() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init(GlobalAddress::new(0, 8), 1, 0, KEY_INFINITY);
        n.set_child_word(0, 0xa);
        n.inner_insert(10, 0xb);
        n.inner_insert(20, 0xc);
        n.inner_remove(0); // merge children 0 and 1
        assert_eq!(n.count(), 1);
        assert_eq!(n.key_at(0), 20);
        assert_eq!(n.child_word(0), 0xa);
        assert_eq!(n.child_word(1), 0xc);
    }

    #[test]
    fn torn_count_never_panics() {
        let b = buf();
        let n = NodeView::new(&b);
        n.init_leaf(GlobalAddress::new(0, 8), 0, KEY_INFINITY);
        n.set_count(usize::MAX); // simulated torn header
        assert_eq!(n.count(), n.leaf_cap());
        let _ = n.leaf_search(42);
    }

    #[test]
    fn version_lock_protocol() {
        let w = AtomicU64::new(0);
        let v = vlock::read(&w);
        assert!(!vlock::is_locked(v));
        assert!(vlock::try_lock_from(&w, v));
        assert!(vlock::is_locked(vlock::read(&w)));
        assert!(!vlock::try_lock_from(&w, v));
        vlock::unlock_bump(&w);
        assert_eq!(vlock::read(&w), 2);
        assert!(vlock::try_lock_from(&w, 2));
        vlock::unlock_restore(&w);
        assert_eq!(vlock::read(&w), 2);
    }
}
