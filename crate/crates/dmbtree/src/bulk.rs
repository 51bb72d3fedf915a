//! Bottom-up bulk loading, root-holder plumbing, and offline tree walks.
//!
//! Bulk load assigns each subtree rooted at the grouping level to one
//! memory server (round-robin), nodes above that level round-robin
//! independently, and everything below inherits its subtree root's server.
//! The walks in this module bypass the verb layer on purpose: they are
//! verification tools and must not perturb traffic statistics.

use std::sync::atomic::AtomicU64;

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, GlobalAddress, MemoryPool};
use crate::node::{new_node_buf, vlock, NodeView, PlacementConfig, HEADER_WORDS, KEY_INFINITY};

#[derive(Debug, Error)]
pub enum BulkError {
    #[error("input keys must be strictly ascending")]
    Unsorted,
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Clone, Copy, Debug)]
pub struct BulkLoadResult {
    pub root: GlobalAddress,
    pub height: u64,
    pub nodes_written: u64,
}

/// Reads the current root address from the well-known root-holder word.
/// Costs one one-sided read.
pub fn read_root(fabric: &Fabric) -> Result<GlobalAddress, FabricError> {
    Ok(GlobalAddress::from_word(fabric.read_word(GlobalAddress::ROOT_HOLDER)?))
}

pub fn publish_root(fabric: &Fabric, root: GlobalAddress) -> Result<(), FabricError> {
    fabric.write_word(GlobalAddress::ROOT_HOLDER, root.word())
}

/// Swings the root-holder word from `old` to `new`; returns the observed
/// prior value so the caller can detect a lost race.
pub fn cas_root(
    fabric: &Fabric,
    old: GlobalAddress,
    new: GlobalAddress,
) -> Result<GlobalAddress, FabricError> {
    Ok(GlobalAddress::from_word(fabric.cas_word(
        GlobalAddress::ROOT_HOLDER,
        old.word(),
        new.word(),
    )?))
}

struct Pending {
    level: u64,
    low: u64,
    high: u64,
    keys: Vec<u64>,
    // leaf values or child indexes into the previous level's node list
    payload: Vec<u64>,
    server: u16,
    addr: GlobalAddress,
}

/// Builds the tree bottom-up at the configured fill factor, writes every
/// node through the fabric, publishes the root, and returns it. Empty input
/// yields a single empty leaf as root.
pub fn bulk_load(
    pairs: &[(u64, u64)],
    placement: &PlacementConfig,
    fabric: &Fabric,
) -> Result<BulkLoadResult, BulkError> {
    for w in pairs.windows(2) {
        if w[0].0 >= w[1].0 {
            return Err(BulkError::Unsorted);
        }
    }
    let words = placement.node_words();
    let leaf_cap = crate::node::leaf_capacity(words);
    let inner_cap = crate::node::inner_key_capacity(words);
    let leaf_fill = ((leaf_cap as f64 * placement.fill) as usize).clamp(1, leaf_cap);
    let inner_fill = ((inner_cap as f64 * placement.fill) as usize).clamp(1, inner_cap);

    // Level 0: chunk pairs into leaves.
    let mut levels: Vec<Vec<Pending>> = Vec::new();
    let mut leaves: Vec<Pending> = Vec::new();
    if pairs.is_empty() {
        leaves.push(Pending {
            level: 0,
            low: 0,
            high: KEY_INFINITY,
            keys: Vec::new(),
            payload: Vec::new(),
            server: 0,
            addr: GlobalAddress::ROOT_HOLDER,
        });
    } else {
        for chunk in pairs.chunks(leaf_fill) {
            leaves.push(Pending {
                level: 0,
                low: chunk[0].0,
                high: 0,
                keys: chunk.iter().map(|p| p.0).collect(),
                payload: chunk.iter().map(|p| p.1).collect(),
                server: 0,
                addr: GlobalAddress::ROOT_HOLDER,
            });
        }
    }
    fix_fences(&mut leaves);
    levels.push(leaves);

    // Build inner levels until a single root remains. An inner node over
    // children c0..ck stores the low fences of c1..ck as separators.
    while levels.last().unwrap().len() > 1 {
        let below = levels.last().unwrap();
        let level = below[0].level + 1;
        let mut nodes = Vec::new();
        let group = inner_fill + 1;
        let hard = inner_cap + 1;
        let mut i = 0;
        while i < below.len() {
            let mut n = group.min(below.len() - i);
            // never leave a trailing group of one child: absorb it if
            // capacity allows, otherwise shrink this group by one
            if below.len() - i - n == 1 {
                if n < hard {
                    n += 1;
                } else {
                    n -= 1;
                }
            }
            let children: Vec<u64> = (i..i + n).map(|c| c as u64).collect();
            let keys: Vec<u64> = (i + 1..i + n).map(|c| below[c].low).collect();
            nodes.push(Pending {
                level,
                low: below[i].low,
                high: 0,
                keys,
                payload: children,
                server: 0,
                addr: GlobalAddress::ROOT_HOLDER,
            });
            i += n;
        }
        fix_fences(&mut nodes);
        levels.push(nodes);
    }

    // Server assignment, top-down. Two independent round-robin counters:
    // one for nodes above the grouping level, one for subtree roots.
    // Children at or below the grouping level inherit their parent's server.
    let nservers = fabric.pool().num_servers();
    let m = placement.subtree_level;
    let mut rr_upper = 0u16;
    let mut rr_subtree = 0u16;
    {
        let root = &mut levels.last_mut().unwrap()[0];
        root.server = if root.level > m {
            rr_upper += 1;
            (rr_upper - 1) % nservers
        } else {
            rr_subtree += 1;
            (rr_subtree - 1) % nservers
        };
    }
    for li in (1..levels.len()).rev() {
        let (below_slice, this_slice) = levels.split_at_mut(li);
        let below = below_slice.last_mut().unwrap();
        for node in &this_slice[0] {
            for &c in &node.payload {
                let child = &mut below[c as usize];
                child.server = if node.level > m + 1 {
                    rr_upper += 1;
                    (rr_upper - 1) % nservers
                } else if node.level == m + 1 {
                    rr_subtree += 1;
                    (rr_subtree - 1) % nservers
                } else {
                    node.server
                };
            }
        }
    }

    // Allocate all nodes, then serialize with child addresses resolved.
    for level in levels.iter_mut() {
        for node in level.iter_mut() {
            node.addr = fabric.allocate(node.server, placement.node_size as u64)?;
        }
    }
    let buf = new_node_buf(words);
    let view = NodeView::new(&buf);
    let mut written = 0u64;
    for li in 0..levels.len() {
        for ni in 0..levels[li].len() {
            let node = &levels[li][ni];
            view.init(node.addr, node.level, node.low, node.high);
            if node.level == 0 {
                for (i, (&k, &v)) in node.keys.iter().zip(&node.payload).enumerate() {
                    view.set_key_at(i, k);
                    let slot = HEADER_WORDS + view.leaf_cap() + i;
                    buf[slot].store(v, std::sync::atomic::Ordering::Relaxed);
                }
                view.set_count(node.keys.len());
            } else {
                for (i, &k) in node.keys.iter().enumerate() {
                    view.set_key_at(i, k);
                }
                for (i, &c) in node.payload.iter().enumerate() {
                    view.set_child_word(i, levels[li - 1][c as usize].addr.word());
                }
                view.set_count(node.keys.len());
            }
            fabric.write_words(node.addr, &view.snapshot())?;
            written += 1;
        }
    }

    let root = levels.last().unwrap()[0].addr;
    publish_root(fabric, root)?;
    Ok(BulkLoadResult {
        root,
        height: levels.len() as u64,
        nodes_written: written,
    })
}

fn fix_fences(nodes: &mut [Pending]) {
    let n = nodes.len();
    for i in 0..n - 1 {
        nodes[i].high = nodes[i + 1].low;
    }
    nodes[n - 1].high = KEY_INFINITY;
    nodes[0].low = 0;
}

#[derive(Debug, Error)]
pub enum StructuralViolation {
    #[error("node {addr:?}: keys not strictly ascending")]
    Unsorted { addr: GlobalAddress },
    #[error("node {addr:?}: key {key} outside fences [{low}, {high})")]
    FenceViolation { addr: GlobalAddress, key: u64, low: u64, high: u64 },
    #[error("node {addr:?}: child fence mismatch (expected [{elow}, {ehigh}), found [{low}, {high}))")]
    ChildFences { addr: GlobalAddress, elow: u64, ehigh: u64, low: u64, high: u64 },
    #[error("leaf {addr:?} at depth {depth}, expected {expected}")]
    Unbalanced { addr: GlobalAddress, depth: u64, expected: u64 },
    #[error("node {addr:?} level {level} on server {server}, subtree root on {expected}")]
    Placement { addr: GlobalAddress, level: u64, server: u16, expected: u16 },
    #[error("node {addr:?}: level {level} inconsistent with parent {parent}")]
    LevelSkew { addr: GlobalAddress, level: u64, parent: u64 },
    #[error("node {addr:?}: stored child address is swizzled")]
    SwizzledInPool { addr: GlobalAddress },
    #[error("node {addr:?}: locked during a quiescent walk")]
    Locked { addr: GlobalAddress },
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TreeCheck {
    pub height: u64,
    pub nodes: u64,
    pub keys: u64,
}

/// Full structural walk: fences, sortedness, balance, placement. Assumes a
/// quiescent tree (no concurrent writers).
pub fn verify_structure(
    pool: &MemoryPool,
    root: GlobalAddress,
    placement: &PlacementConfig,
) -> Result<TreeCheck, StructuralViolation> {
    let mut check = TreeCheck::default();
    let words = placement.node_words();
    let root_view = NodeView::new(pool.word_slice(root, words)?);
    check.height = root_view.level() + 1;
    walk(
        pool,
        root,
        placement,
        root_view.level(),
        0,
        KEY_INFINITY,
        None,
        &mut check,
    )?;
    Ok(check)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    pool: &MemoryPool,
    addr: GlobalAddress,
    placement: &PlacementConfig,
    expected_level: u64,
    low: u64,
    high: u64,
    subtree_server: Option<u16>,
    check: &mut TreeCheck,
) -> Result<(), StructuralViolation> {
    let words = placement.node_words();
    let view = NodeView::new(pool.word_slice(addr, words)?);
    check.nodes += 1;
    if vlock::is_locked(view.version()) {
        return Err(StructuralViolation::Locked { addr });
    }
    if view.level() != expected_level {
        return Err(StructuralViolation::LevelSkew {
            addr,
            level: view.level(),
            parent: expected_level,
        });
    }
    if (view.low_fence(), view.high_fence()) != (low, high) {
        return Err(StructuralViolation::ChildFences {
            addr,
            elow: low,
            ehigh: high,
            low: view.low_fence(),
            high: view.high_fence(),
        });
    }
    let n = view.count();
    for i in 0..n {
        let k = view.key_at(i);
        if i > 0 && view.key_at(i - 1) >= k {
            return Err(StructuralViolation::Unsorted { addr });
        }
        if k < low || k >= high {
            return Err(StructuralViolation::FenceViolation { addr, key: k, low, high });
        }
    }
    // Strictly below the grouping level, every node lives on its subtree
    // root's server.
    if let Some(server) = subtree_server {
        if addr.server() != server {
            return Err(StructuralViolation::Placement {
                addr,
                level: view.level(),
                server: addr.server(),
                expected: server,
            });
        }
    }
    if view.is_leaf() {
        check.keys += n as u64;
        return Ok(());
    }
    let child_subtree = if view.level() == placement.subtree_level {
        Some(addr.server())
    } else {
        subtree_server
    };
    for i in 0..=n {
        let w = view.child_word(i);
        if crate::fabric::word_is_swizzled(w) {
            return Err(StructuralViolation::SwizzledInPool { addr });
        }
        let child = GlobalAddress::from_word(w);
        let clow = if i == 0 { low } else { view.key_at(i - 1) };
        let chigh = if i == n { high } else { view.key_at(i) };
        walk(
            pool,
            child,
            placement,
            expected_level - 1,
            clow,
            chigh,
            child_subtree,
            check,
        )?;
    }
    Ok(())
}

/// Collects every (key, value) pair by direct pool walk, in key order.
pub fn collect_pairs(
    pool: &MemoryPool,
    root: GlobalAddress,
    placement: &PlacementConfig,
) -> Result<Vec<(u64, u64)>, StructuralViolation> {
    let mut out = Vec::new();
    collect(pool, root, placement.node_words(), &mut out)?;
    Ok(out)
}

fn collect(
    pool: &MemoryPool,
    addr: GlobalAddress,
    words: usize,
    out: &mut Vec<(u64, u64)>,
) -> Result<(), StructuralViolation> {
    let view = NodeView::new(pool.word_slice(addr, words)?);
    if view.is_leaf() {
        for i in 0..view.count() {
            out.push((view.key_at(i), view.value_at(i)));
        }
        return Ok(());
    }
    for i in 0..=view.count() {
        collect(pool, GlobalAddress::from_word(view.child_word(i)), words, out)?;
    }
    Ok(())
}

/// Point lookup by direct remote walk through fabric verbs (no cache). Used
/// as a self-consistency oracle against bulk-loaded trees.
pub fn remote_lookup(
    fabric: &Fabric,
    placement: &PlacementConfig,
    key: u64,
) -> Result<Option<u64>, FabricError> {
    let words = placement.node_words();
    let mut buf = vec![0u64; words];
    let mut addr = read_root(fabric)?;
    loop {
        fabric.read_words(addr, &mut buf)?;
        let owned: Vec<AtomicU64> = buf.iter().map(|w| AtomicU64::new(*w)).collect();
        let view = NodeView::new(&owned);
        if view.is_leaf() {
            return Ok(view.leaf_search(key));
        }
        addr = GlobalAddress::from_word(view.search_child(key).word);
    }
}

/// Low fence of the leaf currently containing `key`; every leaf low fence is
/// a valid partition boundary. Direct pool walk, no traffic.
pub fn leaf_low_fence_for(
    pool: &MemoryPool,
    root: GlobalAddress,
    placement: &PlacementConfig,
    key: u64,
) -> Result<u64, StructuralViolation> {
    let words = placement.node_words();
    let mut addr = root;
    loop {
        let view = NodeView::new(pool.word_slice(addr, words)?);
        if view.is_leaf() {
            return Ok(view.low_fence());
        }
        addr = GlobalAddress::from_word(view.search_child(key).word);
    }
}
