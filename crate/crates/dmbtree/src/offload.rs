//! Opportunistic offloading: the latency cost model, the request/reply wire
//! format, the memory-side executor, and the compute-side orchestration.
//!
//! A cache miss on a non-shared node at level `L` of a single-server
//! subtree can either be served by fetching the node (and likely its
//! descendants, one read per level) or by shipping the rest of the
//! traversal to the memory server holding that subtree as one RPC. The
//! decision compares the measured RPC latency against the estimated fetch
//! path cost `(L + 1) * (l_o + l_s) * c`, both tracked as moving averages
//! of recent samples. A small exploration probability occasionally takes
//! the contrary action so both samplers keep seeing fresh data.
//!
//! Executors never perform structure-modifying operations: anything that
//! would split or merge returns `SmoRequired` without touching a byte, and
//! the compute side falls back to the ordinary fetch path.
//!
//! ## Wire format
//!
//! Request (40 bytes, little-endian u64 words):
//! `[op, root_addr, level, key, value]` with op 0=lookup, 1=update,
//! 2=insert.
//!
//! Reply (24 + 8n bytes): `[status, value, n, updated_addr * n]` with
//! status 0=ok, 1=not-found, 2=smo-required. For inserts, `value` is 1 when
//! a new key was inserted and 0 when an existing key was overwritten.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{Cache, ParentRef};
use crate::fabric::{word_is_swizzled, Fabric, GlobalAddress, MemoryPool};
use crate::node::{vlock, NodeView, PlacementConfig};

#[derive(Clone, Debug)]
pub struct CostModelConfig {
    /// Samples kept per moving average.
    pub window: usize,
    /// Fixed local node-search latency estimate.
    pub local_search: Duration,
    /// Cache operational-cost coefficient, > 1.
    pub cache_coeff: f64,
    /// Probability of taking the contrary action, keeping both samplers fed.
    pub explore_prob: f64,
    pub bootstrap_fetch: Duration,
    pub bootstrap_offload: Duration,
    pub rng_seed: u64,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        CostModelConfig {
            window: 50,
            local_search: Duration::from_nanos(400),
            cache_coeff: 1.2,
            explore_prob: 0.01,
            bootstrap_fetch: Duration::from_micros(2),
            bootstrap_offload: Duration::from_micros(4),
            rng_seed: 13,
        }
    }
}

struct Window {
    buf: Vec<f64>,
    next: usize,
    sum: f64,
}

impl Window {
    fn new(cap: usize) -> Self {
        Window { buf: Vec::with_capacity(cap), next: 0, sum: 0.0 }
    }

    fn push(&mut self, sample: f64) {
        if self.buf.len() < self.buf.capacity() {
            self.buf.push(sample);
        } else {
            self.sum -= self.buf[self.next];
            self.buf[self.next] = sample;
            self.next = (self.next + 1) % self.buf.len();
        }
        self.sum += sample;
    }

    fn avg(&self) -> f64 {
        if self.buf.is_empty() {
            return 0.0;
        }
        self.sum / self.buf.len() as f64
    }
}

/// Per-thread latency model driving the fetch-vs-offload decision. Not
/// shared across threads, so sampling never contends.
pub struct CostModel {
    cfg: CostModelConfig,
    fetch: Window,
    offload: Window,
    rng: ChaCha8Rng,
}

impl CostModel {
    pub fn new(cfg: CostModelConfig, thread_ordinal: u64) -> Self {
        let mut m = CostModel {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(thread_ordinal)),
            fetch: Window::new(cfg.window),
            offload: Window::new(cfg.window),
            cfg,
        };
        // seed both windows so the first decisions have something to go on;
        // exploration corrects any miscalibration within a window's worth
        // of operations
        m.fetch.push(m.cfg.bootstrap_fetch.as_secs_f64());
        m.offload.push(m.cfg.bootstrap_offload.as_secs_f64());
        m
    }

    pub fn record_fetch(&mut self, d: Duration) {
        self.fetch.push(d.as_secs_f64());
    }

    pub fn record_offload(&mut self, d: Duration) {
        self.offload.push(d.as_secs_f64());
    }

    pub fn fetch_avg(&self) -> Duration {
        Duration::from_secs_f64(self.fetch.avg())
    }

    pub fn offload_avg(&self) -> Duration {
        Duration::from_secs_f64(self.offload.avg())
    }

    /// The bare cost predicate, no exploration: offload when the measured
    /// RPC latency undercuts the estimated fetch-path latency from `level`
    /// down to the leaves.
    pub fn would_offload(&self, level: u64) -> bool {
        let fetch_path = (level + 1) as f64
            * (self.fetch.avg() + self.cfg.local_search.as_secs_f64())
            * self.cfg.cache_coeff;
        self.offload.avg() < fetch_path
    }

    /// The operational decision: the predicate, inverted with probability
    /// `explore_prob`.
    pub fn deserve_offload(&mut self, level: u64) -> bool {
        let base = self.would_offload(level);
        if self.cfg.explore_prob > 0.0 && self.rng.gen::<f64>() < self.cfg.explore_prob {
            !base
        } else {
            base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffloadOp {
    Lookup = 0,
    Update = 1,
    Insert = 2,
}

#[derive(Clone, Copy, Debug)]
pub struct OffloadRequest {
    pub op: OffloadOp,
    pub root: GlobalAddress,
    pub level: u64,
    pub key: u64,
    pub value: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffloadStatus {
    Ok = 0,
    NotFound = 1,
    SmoRequired = 2,
}

#[derive(Clone, Debug)]
pub struct OffloadReply {
    pub status: OffloadStatus,
    pub value: u64,
    pub updated: Vec<GlobalAddress>,
}

impl OffloadRequest {
    pub fn encode(&self) -> Vec<u8> {
        let words = [
            self.op as u64,
            self.root.word(),
            self.level,
            self.key,
            self.value,
        ];
        words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn decode(bytes: &[u8]) -> Option<OffloadRequest> {
        let w = read_words(bytes, 5)?;
        let op = match w[0] {
            0 => OffloadOp::Lookup,
            1 => OffloadOp::Update,
            2 => OffloadOp::Insert,
            _ => return None,
        };
        Some(OffloadRequest {
            op,
            root: GlobalAddress::from_word(w[1]),
            level: w[2],
            key: w[3],
            value: w[4],
        })
    }
}

impl OffloadReply {
    fn new(status: OffloadStatus, value: u64, updated: Vec<GlobalAddress>) -> Self {
        OffloadReply { status, value, updated }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut words = vec![self.status as u64, self.value, self.updated.len() as u64];
        words.extend(self.updated.iter().map(|a| a.word()));
        words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn decode(bytes: &[u8]) -> Option<OffloadReply> {
        let head = read_words(bytes, 3)?;
        let n = head[2] as usize;
        let all = read_words(bytes, 3 + n)?;
        let status = match head[0] {
            0 => OffloadStatus::Ok,
            1 => OffloadStatus::NotFound,
            2 => OffloadStatus::SmoRequired,
            _ => return None,
        };
        Some(OffloadReply {
            status,
            value: head[1],
            updated: all[3..].iter().map(|w| GlobalAddress::from_word(*w)).collect(),
        })
    }
}

fn read_words(bytes: &[u8], n: usize) -> Option<Vec<u64>> {
    if bytes.len() < n * 8 {
        return None;
    }
    Some(
        bytes[..n * 8]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

const EXEC_SPIN_LIMIT: usize = 1000;

/// Runs one offloaded operation against this server's own region. No
/// fabric verbs, no injected latency: the executor reads its local memory
/// directly. Synchronization uses the node version-lock words with local
/// atomics, the same discipline remote writers follow.
pub fn executor_serve(
    pool: &MemoryPool,
    server: u16,
    placement: &PlacementConfig,
    req: &OffloadRequest,
) -> OffloadReply {
    let smo = || OffloadReply::new(OffloadStatus::SmoRequired, 0, Vec::new());
    if req.level > placement.subtree_level || req.root.server() != server {
        return smo();
    }
    let words = placement.node_words();
    let mut cur = req.root;
    for _ in 0..=req.level {
        // confinement: the whole walk stays on this server's region
        if cur.server() != server {
            return smo();
        }
        let Ok(slice) = pool.word_slice(cur, words) else {
            return smo();
        };
        let view = NodeView::new(slice);
        let mut spins = 0;
        loop {
            let v = view.version();
            if vlock::is_locked(v) {
                spins += 1;
                if spins > EXEC_SPIN_LIMIT {
                    return smo();
                }
                std::thread::yield_now();
                continue;
            }
            if !view.contains(req.key) {
                // stale routing or concurrent structural churn: bail out
                return smo();
            }
            if view.is_leaf() {
                return leaf_op(view, cur, req, v);
            }
            let child = view.search_child(req.key);
            if view.version() != v {
                continue;
            }
            if word_is_swizzled(child.word) {
                return smo(); // pool images never carry swizzled words
            }
            cur = GlobalAddress::from_word(child.word);
            break;
        }
    }
    smo()
}

fn leaf_op(view: NodeView, addr: GlobalAddress, req: &OffloadRequest, seen: u64) -> OffloadReply {
    let smo = || OffloadReply::new(OffloadStatus::SmoRequired, 0, Vec::new());
    match req.op {
        OffloadOp::Lookup => {
            let found = view.leaf_search(req.key);
            if view.version() != seen {
                return smo(); // caller retries through the normal path
            }
            match found {
                Some(v) => OffloadReply::new(OffloadStatus::Ok, v, Vec::new()),
                None => OffloadReply::new(OffloadStatus::NotFound, 0, Vec::new()),
            }
        }
        OffloadOp::Update => {
            if !vlock::try_lock_from(view.version_word(), seen) {
                return smo();
            }
            match view.leaf_search(req.key) {
                Some(_) => {
                    view.leaf_insert(req.key, req.value);
                    vlock::unlock_bump(view.version_word());
                    OffloadReply::new(OffloadStatus::Ok, 0, vec![addr])
                }
                None => {
                    vlock::unlock_restore(view.version_word());
                    OffloadReply::new(OffloadStatus::NotFound, 0, Vec::new())
                }
            }
        }
        OffloadOp::Insert => {
            if !vlock::try_lock_from(view.version_word(), seen) {
                return smo();
            }
            use crate::node::LeafInsert;
            match view.leaf_insert(req.key, req.value) {
                LeafInsert::Inserted => {
                    vlock::unlock_bump(view.version_word());
                    OffloadReply::new(OffloadStatus::Ok, 1, vec![addr])
                }
                LeafInsert::Updated => {
                    vlock::unlock_bump(view.version_word());
                    OffloadReply::new(OffloadStatus::Ok, 0, vec![addr])
                }
                LeafInsert::Full => {
                    // splits are compute-side business; leave every byte as-is
                    vlock::unlock_restore(view.version_word());
                    smo()
                }
            }
        }
    }
}

/// Registers executor threads on every memory server, all running
/// `executor_serve` against the shared pool.
pub fn register_executors(
    fabric: &Arc<Fabric>,
    threads_per_server: usize,
    placement: PlacementConfig,
) {
    let pool = Arc::clone(fabric.pool());
    let handler: Arc<crate::fabric::RpcHandler> = Arc::new(move |server, bytes: &[u8]| {
        let reply = match OffloadRequest::decode(bytes) {
            Some(req) => executor_serve(&pool, server, &placement, &req),
            None => OffloadReply::new(OffloadStatus::SmoRequired, 0, Vec::new()),
        };
        reply.encode()
    });
    for server in 0..fabric.pool().num_servers() {
        fabric
            .register_executor(server, threads_per_server, Arc::clone(&handler))
            .expect("executor registration");
    }
}

pub enum OffloadOutcome {
    /// The executor finished the operation.
    Done { status: OffloadStatus, value: u64 },
    /// Structure modification needed (or transport trouble): take the
    /// ordinary fetch path for this child.
    Fallback,
    /// Lost a race installing the I/O marker or validating the parent;
    /// restart from the root.
    Restart,
}

/// Compute-side orchestration of one offloaded operation.
///
/// Pins the parent frame so it cannot cool away mid-flight, claims the
/// I/O marker for the subtree root so concurrent threads on this compute
/// server restart instead of fetching, runs the RPC, then invalidates any
/// cached copies of nodes the executor reports as updated.
pub fn offload_op(
    cache: &Cache,
    parent: ParentRef,
    req: &OffloadRequest,
    cost: &mut CostModel,
) -> OffloadOutcome {
    cache.pin(parent.frame);
    if vlock::read(cache.frame_lock(parent.frame)) != parent.version {
        cache.unpin(parent.frame);
        return OffloadOutcome::Restart;
    }
    if !cache.try_io_marker(req.root.word()) {
        cache.unpin(parent.frame);
        return OffloadOutcome::Restart;
    }

    let started = Instant::now();
    let reply = cache
        .fabric()
        .rpc_call(req.root.server(), &req.encode())
        .ok()
        .and_then(|bytes| OffloadReply::decode(&bytes));

    let outcome = match reply {
        None => OffloadOutcome::Fallback,
        Some(reply) => {
            cost.record_offload(started.elapsed());
            match reply.status {
                OffloadStatus::SmoRequired => OffloadOutcome::Fallback,
                status => {
                    for addr in &reply.updated {
                        cache.invalidate_node(*addr);
                    }
                    OffloadOutcome::Done { status, value: reply.value }
                }
            }
        }
    };
    cache.remove_io_marker(req.root.word());
    cache.unpin(parent.frame);
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bulk::{bulk_load, read_root};
    use crate::fabric::{FabricConfig, LatencyMode};

    #[test]
    fn moving_window_displacement() {
        let mut m = CostModel::new(
            CostModelConfig { bootstrap_fetch: Duration::from_micros(2), ..Default::default() },
            0,
        );
        // 50 samples of 2us then 50 of 4us: the window holds only the 4us ones
        for _ in 0..50 {
            m.record_fetch(Duration::from_micros(2));
        }
        for _ in 0..50 {
            m.record_fetch(Duration::from_micros(4));
        }
        assert!((m.fetch_avg().as_secs_f64() - 4e-6).abs() < 1e-12);

        let mut m = CostModel::new(CostModelConfig::default(), 0);
        m.record_offload(Duration::from_micros(8));
        // bootstrap sample (4us) + 8us
        assert!((m.offload_avg().as_secs_f64() - 6e-6).abs() < 1e-12);

        let mut m = CostModel::new(CostModelConfig::default(), 0);
        for i in 0..50 {
            m.record_fetch(Duration::from_micros(if i % 2 == 0 { 1 } else { 3 }));
        }
        // the window holds the last 50 samples: an even 1us/3us mix
        assert!((m.fetch_avg().as_secs_f64() - 2e-6).abs() < 1e-9);
    }

    fn model_with(l_p_us: u64, l_o_us: u64, q: f64) -> CostModel {
        let cfg = CostModelConfig {
            local_search: Duration::from_nanos(400),
            cache_coeff: 1.2,
            explore_prob: q,
            bootstrap_fetch: Duration::from_micros(l_o_us),
            bootstrap_offload: Duration::from_micros(l_p_us),
            ..Default::default()
        };
        CostModel::new(cfg, 0)
    }

    #[test]
    fn decision_rule_matches_direct_evaluation() {
        let m = model_with(4, 2, 0.0);
        // level 0: 4 < 1 * 2.4 * 1.2 = 2.88 is false -> fetch
        assert!(!m.would_offload(0));
        // level 2: 4 < 3 * 2.88 = 8.64 -> offload
        assert!(m.would_offload(2));
    }

    #[test]
    fn decision_is_monotone_in_level() {
        let m = model_with(7, 2, 0.0);
        let mut prev = false;
        for level in 0..8 {
            let d = m.would_offload(level);
            assert!(!prev || d, "offload at level {} but not above", level - 1);
            prev = d;
        }
    }

    #[test]
    fn full_exploration_always_inverts() {
        let mut m = model_with(4, 2, 1.0);
        for level in 0..6 {
            assert_eq!(m.deserve_offload(level), !m.would_offload(level));
        }
    }

    #[test]
    fn wire_roundtrip() {
        let req = OffloadRequest {
            op: OffloadOp::Insert,
            root: GlobalAddress::new(3, 4096),
            level: 2,
            key: 77,
            value: 770,
        };
        let bytes = req.encode();
        assert_eq!(bytes.len(), 40);
        let back = OffloadRequest::decode(&bytes).unwrap();
        assert_eq!(back.op, OffloadOp::Insert);
        assert_eq!(back.root, req.root);
        assert_eq!((back.level, back.key, back.value), (2, 77, 770));

        let reply = OffloadReply::new(
            OffloadStatus::Ok,
            9,
            vec![GlobalAddress::new(1, 64), GlobalAddress::new(0, 128)],
        );
        let bytes = reply.encode();
        assert_eq!(bytes.len(), 24 + 16);
        let back = OffloadReply::decode(&bytes).unwrap();
        assert_eq!(back.status, OffloadStatus::Ok);
        assert_eq!(back.value, 9);
        assert_eq!(back.updated, reply.updated);

        assert!(OffloadRequest::decode(&bytes[..30]).is_none());
    }

    fn loaded_fabric(n: u64) -> (Arc<Fabric>, PlacementConfig, GlobalAddress) {
        let fabric = Fabric::new(FabricConfig {
            num_memory_servers: 2,
            region_bytes_per_server: 16 << 20,
            latency_mode: LatencyMode::Zero,
            ..Default::default()
        });
        let placement = PlacementConfig { subtree_level: 2, node_size: 256, fill: 0.8 };
        let pairs: Vec<(u64, u64)> = (0..n).map(|i| (i * 2, i * 2 + 100)).collect();
        bulk_load(&pairs, &placement, &fabric).unwrap();
        let root = read_root(&fabric).unwrap();
        (fabric, placement, root)
    }

    /// Finds the ancestor of `key` at `level` by walking down.
    fn node_for(
        fabric: &Fabric,
        placement: &PlacementConfig,
        root: GlobalAddress,
        key: u64,
        level: u64,
    ) -> GlobalAddress {
        let words = placement.node_words();
        let mut cur = root;
        loop {
            let slice = fabric.pool().word_slice(cur, words).unwrap();
            let view = NodeView::new(slice);
            if view.level() == level {
                return cur;
            }
            cur = GlobalAddress::from_word(view.search_child(key).word);
        }
    }

    #[test]
    fn executor_lookup_uses_no_fabric_verbs() {
        let (fabric, placement, root) = loaded_fabric(5_000);
        let sub = node_for(&fabric, &placement, root, 1234, 2);
        fabric.stats().reset();
        let req = OffloadRequest { op: OffloadOp::Lookup, root: sub, level: 2, key: 1234, value: 0 };
        let reply = executor_serve(fabric.pool(), sub.server(), &placement, &req);
        assert_eq!(reply.status, OffloadStatus::Ok);
        assert_eq!(reply.value, 1234 + 100);
        assert!(reply.updated.is_empty());
        assert_eq!(fabric.stats().snapshot().total_verbs(), 0);

        let req = OffloadRequest { op: OffloadOp::Lookup, root: sub, level: 2, key: 1235, value: 0 };
        let reply = executor_serve(fabric.pool(), sub.server(), &placement, &req);
        assert_eq!(reply.status, OffloadStatus::NotFound);
    }

    #[test]
    fn executor_update_bumps_leaf_version() {
        let (fabric, placement, root) = loaded_fabric(5_000);
        let sub = node_for(&fabric, &placement, root, 42, 1);
        let leaf = node_for(&fabric, &placement, root, 42, 0);
        let v_before =
            NodeView::new(fabric.pool().word_slice(leaf, placement.node_words()).unwrap())
                .version();
        let req = OffloadRequest { op: OffloadOp::Update, root: sub, level: 1, key: 42, value: 999 };
        let reply = executor_serve(fabric.pool(), sub.server(), &placement, &req);
        assert_eq!(reply.status, OffloadStatus::Ok);
        assert_eq!(reply.updated, vec![leaf]);
        let view = NodeView::new(fabric.pool().word_slice(leaf, placement.node_words()).unwrap());
        assert_eq!(view.leaf_search(42), Some(999));
        assert_eq!(view.version(), v_before + 2);
    }

    #[test]
    fn executor_insert_into_full_leaf_is_pure_smo() {
        let (fabric, placement, root) = loaded_fabric(5_000);
        let sub = node_for(&fabric, &placement, root, 0, 1);
        let leaf = node_for(&fabric, &placement, root, 0, 0);
        let words = placement.node_words();
        // fill the leaf to capacity through the executor (odd keys are free)
        loop {
            let view = NodeView::new(fabric.pool().word_slice(leaf, words).unwrap());
            if view.is_full() {
                break;
            }
            let next_key = (view.low_fence()..view.high_fence())
                .filter(|k| k % 2 == 1)
                .find(|k| view.leaf_search(*k).is_none())
                .unwrap();
            let req =
                OffloadRequest { op: OffloadOp::Insert, root: sub, level: 1, key: next_key, value: 5 };
            let reply = executor_serve(fabric.pool(), sub.server(), &placement, &req);
            assert_eq!(reply.status, OffloadStatus::Ok);
            assert_eq!(reply.value, 1);
        }
        // snapshot, then attempt an overflowing insert: pure rejection
        let view = NodeView::new(fabric.pool().word_slice(leaf, words).unwrap());
        let free_key = (view.low_fence()..view.high_fence())
            .find(|k| view.leaf_search(*k).is_none())
            .unwrap();
        let before = fabric.pool().snapshot_words(leaf, words).unwrap();
        let req =
            OffloadRequest { op: OffloadOp::Insert, root: sub, level: 1, key: free_key, value: 5 };
        let reply = executor_serve(fabric.pool(), sub.server(), &placement, &req);
        assert_eq!(reply.status, OffloadStatus::SmoRequired);
        assert_eq!(fabric.pool().snapshot_words(leaf, words).unwrap(), before);
    }

    #[test]
    fn executor_rejects_foreign_and_deep_requests() {
        let (fabric, placement, root) = loaded_fabric(5_000);
        let sub = node_for(&fabric, &placement, root, 42, 2);
        let other = 1 - sub.server();
        let req = OffloadRequest { op: OffloadOp::Lookup, root: sub, level: 2, key: 42, value: 0 };
        // wrong server: confinement guard rejects without touching anything
        let reply = executor_serve(fabric.pool(), other, &placement, &req);
        assert_eq!(reply.status, OffloadStatus::SmoRequired);
        // level above the grouping level
        let req = OffloadRequest { op: OffloadOp::Lookup, root, level: 99, key: 42, value: 0 };
        let reply = executor_serve(fabric.pool(), root.server(), &placement, &req);
        assert_eq!(reply.status, OffloadStatus::SmoRequired);
    }

    #[test]
    fn rpc_round_trip_through_registered_executors() {
        let (fabric, placement, root) = loaded_fabric(5_000);
        register_executors(&fabric, 2, placement);
        let sub = node_for(&fabric, &placement, root, 500, 2);
        fabric.stats().reset();
        let req = OffloadRequest { op: OffloadOp::Lookup, root: sub, level: 2, key: 500, value: 0 };
        let bytes = fabric.rpc_call(sub.server(), &req.encode()).unwrap();
        let reply = OffloadReply::decode(&bytes).unwrap();
        assert_eq!(reply.status, OffloadStatus::Ok);
        assert_eq!(reply.value, 600);
        let s = fabric.stats().snapshot();
        assert_eq!(s.two_sided, 1);
        assert_eq!(s.one_sided_verbs(), 0);
        assert_eq!(s.two_sided_bytes, 40 + 24);
    }
}
