//! Per-compute-server page cache with pointer swizzling and randomized
//! cooling.
//!
//! Structure:
//! - a mapping table (concurrent hash map) from node id — the unswizzled
//!   global-address word — to a frame index or an in-progress I/O marker;
//! - fixed-size frames backed by one flat word arena, each guarded by its
//!   own version lock (same encoding as node headers);
//! - a cooling map: hash-indexed buckets, each a small locked FIFO of
//!   eviction candidates.
//!
//! A cached inner node stores swizzled child words (local frame indexes)
//! for children that are themselves cached and hot, so warm traversals do
//! no mapping-table probes. Cooling a node first unswizzles it from its
//! parent and writes it back if dirty, which keeps eviction itself free of
//! fabric traffic and keeps remote images free of swizzled words.
//!
//! Locking discipline: frame version locks are only ever acquired with
//! `try_lock_from` on a validated version (writers never block each other,
//! they restart), always parent before child; bucket locks are leaf-level —
//! code holding a bucket lock never acquires a frame lock. That ordering is
//! what makes the whole cache deadlock-free under arbitrary interleaving.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::time::Duration;

use dashmap::DashMap;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

use crate::fabric::{swizzle_frame, swizzled_frame, word_is_swizzled, Fabric, FabricError, GlobalAddress};
use crate::node::{new_node_buf, vlock, NodeView};

pub const NO_FRAME: u32 = u32::MAX;

const FREE_BATCH: usize = 4;
const MAX_EVICT_ROUNDS: usize = 64;
const DELEGATE_DEPTH_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache too small: no frame could be cooled or evicted")]
    CacheTooSmall,
    #[error("undefined input: {0}")]
    UndefinedInput(&'static str),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoolingStructure {
    /// Bucketed FIFO arrays (the default).
    Map,
    /// One FIFO protected by one lock, for the contention ablation.
    SingleQueue,
}

#[derive(Clone, Debug)]
pub struct CacheConfig {
    pub capacity_bytes: usize,
    pub node_size: usize,
    /// Cooling map capacity as a fraction of the frame count.
    pub cooling_fraction: f64,
    /// FIFO slots per cooling bucket.
    pub bucket_slots: usize,
    /// Frames sampled per cooling pass.
    pub sample_count: usize,
    pub admit_prob_leaf: f64,
    pub admit_prob_inner: f64,
    pub cooling_structure: CoolingStructure,
    pub rng_seed: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity_bytes: 4 << 20,
            node_size: 1024,
            cooling_fraction: 0.10,
            bucket_slots: 6,
            sample_count: 2,
            admit_prob_leaf: 0.1,
            admit_prob_inner: 1.0,
            cooling_structure: CoolingStructure::Map,
            rng_seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameState {
    Free = 0,
    Hot = 1,
    Cooling = 2,
    Io = 3,
}

struct Frame {
    lock: AtomicU64,
    state: AtomicU8,
    dirty: AtomicBool,
    pin: AtomicU32,
    parent: AtomicU32,
}

impl Frame {
    fn state(&self) -> FrameState {
        match self.state.load(Ordering::Acquire) {
            0 => FrameState::Free,
            1 => FrameState::Hot,
            2 => FrameState::Cooling,
            _ => FrameState::Io,
        }
    }

    fn set_state(&self, s: FrameState) {
        self.state.store(s as u8, Ordering::Release);
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MapEntry {
    Io,
    Frame(u32),
}

struct Bucket {
    fifo: Mutex<VecDeque<u32>>,
}

struct CoolingMap {
    buckets: Vec<Bucket>,
    slots_per_bucket: usize,
    count: AtomicUsize,
}

impl CoolingMap {
    fn bucket_of(&self, node_id: u64) -> usize {
        // splitmix-style scatter so sequential offsets spread across buckets
        let mut x = node_id.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        (x % self.buckets.len() as u64) as usize
    }
}

/// Per-worker mutable state: the thread-local free set, the seeded
/// generator behind admission and sampling, and a fetch scratch buffer.
pub struct WorkerCtx {
    free: Vec<u32>,
    rng: ChaCha8Rng,
    scratch: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CacheStatsSnapshot {
    pub hits: u64,
    pub misses: u64,
    pub admissions: u64,
    pub rejections: u64,
    pub coolings: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub restores: u64,
    pub io_conflicts: u64,
    pub invalidations: u64,
}

impl CacheStatsSnapshot {
    pub fn hit_ratio(&self) -> f64 {
        if self.hits + self.misses == 0 {
            return 0.0;
        }
        self.hits as f64 / (self.hits + self.misses) as f64
    }
}

#[derive(Default)]
struct CacheStats {
    hits: AtomicU64,
    misses: AtomicU64,
    admissions: AtomicU64,
    rejections: AtomicU64,
    coolings: AtomicU64,
    evictions: AtomicU64,
    writebacks: AtomicU64,
    restores: AtomicU64,
    io_conflicts: AtomicU64,
    invalidations: AtomicU64,
}

/// Identifies the parent frame a traversal came through: the frame, the
/// version the caller validated, and the child slot it took.
#[derive(Clone, Copy, Debug)]
pub struct ParentRef {
    pub frame: u32,
    pub version: u64,
    pub slot: usize,
}

pub enum Lookup {
    /// Cached and hot. If a second-chance restore re-swizzled the parent
    /// slot, the parent's version moved to `restored_parent_version`.
    Hit { frame: u32, restored_parent_version: Option<u64> },
    Miss,
    /// Someone is fetching or offloading this node; restart from the root.
    IoInProgress,
    Restart,
}

/// What a fetch may produce.
pub enum Fetch<'c> {
    /// Admitted into a frame; the parent slot is swizzled and its version
    /// is now `parent_version`.
    Admitted { frame: u32, parent_version: u64 },
    /// Not admitted: a one-shot buffer. For write intents the I/O marker is
    /// still held (released by `TransientBuf` drop or write-back) so no
    /// other thread can fetch the node mid-modification.
    Transient(TransientBuf<'c>),
    Restart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FetchIntent {
    Read,
    Write,
    /// Admit unconditionally (structure-modifying paths need frames).
    Force,
}

/// One-shot node image for non-admitted fetches.
pub struct TransientBuf<'c> {
    cache: &'c Cache,
    addr: GlobalAddress,
    data: Box<[AtomicU64]>,
    holds_marker: bool,
    pinned: Option<u32>,
}

impl<'c> TransientBuf<'c> {
    pub fn view(&self) -> NodeView<'_> {
        NodeView::new(&self.data)
    }

    pub fn addr(&self) -> GlobalAddress {
        self.addr
    }

    /// Takes over a pin on the parent frame; released when this buffer is
    /// consumed or dropped. Pinning the parent keeps the whole path hot,
    /// which excludes any concurrent offload from reaching this node's
    /// subtree while the one-shot image is in use.
    pub fn hold_pin(&mut self, frame: u32) {
        debug_assert!(self.pinned.is_none());
        self.pinned = Some(frame);
    }

    /// Writes the (modified) image back and releases the I/O marker.
    pub fn write_back(mut self) -> Result<(), FabricError> {
        debug_assert!(self.holds_marker);
        let img = self.view().snapshot();
        self.cache.fabric.write_words(self.addr, &img)?;
        self.release();
        Ok(())
    }

    /// Admits the held image into a frame after all (used when a write path
    /// discovers it needs a real frame, e.g. to split). The marker must
    /// still be held. Returns the frame and the parent's bumped version.
    pub fn promote(
        mut self,
        ctx: &mut WorkerCtx,
        parent: Option<ParentRef>,
    ) -> Result<Option<(u32, u64)>, CacheError> {
        debug_assert!(self.holds_marker);
        let img = self.view().snapshot();
        let r = self.cache.install(ctx, self.addr, &img, parent)?;
        if r.is_some() {
            self.holds_marker = false; // install replaced the marker
        }
        // on None (parent moved) drop() releases the marker
        Ok(r)
    }

    fn release(&mut self) {
        if self.holds_marker {
            self.cache.mapping.remove(&self.addr.word());
            self.holds_marker = false;
        }
        if let Some(f) = self.pinned.take() {
            self.cache.unpin(f);
        }
    }
}

impl Drop for TransientBuf<'_> {
    fn drop(&mut self) {
        self.release();
    }
}

pub struct Cache {
    cfg: CacheConfig,
    fabric: Arc<Fabric>,
    node_words: usize,
    frame_count: usize,
    frames: Box<[Frame]>,
    arena: Box<[AtomicU64]>,
    mapping: DashMap<u64, MapEntry>,
    cooling: CoolingMap,
    global_free: Mutex<Vec<u32>>,
    root_frame: AtomicU32,
    stats: CacheStats,
}

impl Cache {
    pub fn new(cfg: CacheConfig, fabric: Arc<Fabric>) -> Self {
        let node_words = crate::node::node_words(cfg.node_size);
        let frame_count = cfg.capacity_bytes / cfg.node_size;
        assert!(frame_count >= 8, "cache must hold at least 8 frames");
        let frames: Box<[Frame]> = (0..frame_count)
            .map(|_| Frame {
                lock: AtomicU64::new(0),
                state: AtomicU8::new(FrameState::Free as u8),
                dirty: AtomicBool::new(false),
                pin: AtomicU32::new(0),
                parent: AtomicU32::new(NO_FRAME),
            })
            .collect();
        let arena = (0..frame_count * node_words).map(|_| AtomicU64::new(0)).collect();
        let cooling_capacity = ((frame_count as f64 * cfg.cooling_fraction).ceil() as usize).max(1);
        let (nbuckets, slots) = match cfg.cooling_structure {
            CoolingStructure::Map => {
                (cooling_capacity.div_ceil(cfg.bucket_slots).max(1), cfg.bucket_slots)
            }
            CoolingStructure::SingleQueue => (1, cooling_capacity),
        };
        let cooling = CoolingMap {
            buckets: (0..nbuckets).map(|_| Bucket { fifo: Mutex::new(VecDeque::new()) }).collect(),
            slots_per_bucket: slots,
            count: AtomicUsize::new(0),
        };
        Cache {
            fabric,
            node_words,
            frame_count,
            frames,
            arena,
            mapping: DashMap::new(),
            cooling,
            global_free: Mutex::new((0..frame_count as u32).rev().collect()),
            root_frame: AtomicU32::new(NO_FRAME),
            stats: CacheStats::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn worker_ctx(&self, ordinal: u64) -> WorkerCtx {
        WorkerCtx {
            free: Vec::with_capacity(FREE_BATCH),
            rng: ChaCha8Rng::seed_from_u64(self.cfg.rng_seed.wrapping_add(ordinal)),
            scratch: vec![0u64; self.node_words],
        }
    }

    /// View of a frame's node image.
    pub fn node(&self, frame: u32) -> NodeView<'_> {
        let i = frame as usize * self.node_words;
        NodeView::new(&self.arena[i..i + self.node_words])
    }

    pub fn frame_lock(&self, frame: u32) -> &AtomicU64 {
        &self.frames[frame as usize].lock
    }

    pub fn frame_state(&self, frame: u32) -> FrameState {
        self.frames[frame as usize].state()
    }

    pub fn frame_dirty(&self, frame: u32) -> bool {
        self.frames[frame as usize].dirty.load(Ordering::Acquire)
    }

    pub fn mark_dirty(&self, frame: u32) {
        self.frames[frame as usize].dirty.store(true, Ordering::Release);
    }

    pub fn pin(&self, frame: u32) {
        self.frames[frame as usize].pin.fetch_add(1, Ordering::AcqRel);
    }

    pub fn unpin(&self, frame: u32) {
        let old = self.frames[frame as usize].pin.fetch_sub(1, Ordering::AcqRel);
        debug_assert!(old > 0);
    }

    pub fn root_frame(&self) -> Option<u32> {
        match self.root_frame.load(Ordering::Acquire) {
            NO_FRAME => None,
            f => Some(f),
        }
    }

    pub fn clear_root_frame(&self) {
        self.root_frame.store(NO_FRAME, Ordering::Release);
    }

    pub fn stats(&self) -> CacheStatsSnapshot {
        CacheStatsSnapshot {
            hits: self.stats.hits.load(Ordering::Relaxed),
            misses: self.stats.misses.load(Ordering::Relaxed),
            admissions: self.stats.admissions.load(Ordering::Relaxed),
            rejections: self.stats.rejections.load(Ordering::Relaxed),
            coolings: self.stats.coolings.load(Ordering::Relaxed),
            evictions: self.stats.evictions.load(Ordering::Relaxed),
            writebacks: self.stats.writebacks.load(Ordering::Relaxed),
            restores: self.stats.restores.load(Ordering::Relaxed),
            io_conflicts: self.stats.io_conflicts.load(Ordering::Relaxed),
            invalidations: self.stats.invalidations.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        self.stats.hits.store(0, Ordering::Relaxed);
        self.stats.misses.store(0, Ordering::Relaxed);
        self.stats.admissions.store(0, Ordering::Relaxed);
        self.stats.rejections.store(0, Ordering::Relaxed);
        self.stats.coolings.store(0, Ordering::Relaxed);
        self.stats.evictions.store(0, Ordering::Relaxed);
        self.stats.writebacks.store(0, Ordering::Relaxed);
        self.stats.restores.store(0, Ordering::Relaxed);
        self.stats.io_conflicts.store(0, Ordering::Relaxed);
        self.stats.invalidations.store(0, Ordering::Relaxed);
    }

    /// Frame counts by state `[free, hot, cooling, io]`; they always sum to
    /// the frame total.
    pub fn state_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for f in self.frames.iter() {
            counts[f.state.load(Ordering::Acquire).min(3) as usize] += 1;
        }
        counts
    }

    pub fn cooling_len(&self) -> usize {
        self.cooling.count.load(Ordering::Acquire)
    }

    pub fn cooling_capacity(&self) -> usize {
        self.cooling.buckets.len() * self.cooling.slots_per_bucket
    }

    /// Resolves a child reference word. Swizzled words go straight to their
    /// frame; unswizzled words probe the mapping table. Cooling frames get
    /// their second chance here: restored to hot and re-swizzled into the
    /// parent under the parent's lock.
    pub fn lookup(&self, word: u64, parent: Option<ParentRef>) -> Lookup {
        if word_is_swizzled(word) {
            self.stats.hits.fetch_add(1, Ordering::Relaxed);
            return Lookup::Hit { frame: swizzled_frame(word), restored_parent_version: None };
        }
        let entry = match self.mapping.get(&word) {
            None => {
                self.stats.misses.fetch_add(1, Ordering::Relaxed);
                return Lookup::Miss;
            }
            Some(e) => *e,
        };
        match entry {
            MapEntry::Io => {
                self.stats.io_conflicts.fetch_add(1, Ordering::Relaxed);
                Lookup::IoInProgress
            }
            MapEntry::Frame(f) => match self.frames[f as usize].state() {
                FrameState::Hot => {
                    self.stats.hits.fetch_add(1, Ordering::Relaxed);
                    Lookup::Hit { frame: f, restored_parent_version: None }
                }
                FrameState::Cooling => self.second_chance(word, f, parent),
                // Free/Io here means an evictor or admitter is mid-flight.
                _ => Lookup::Restart,
            },
        }
    }

    fn second_chance(&self, word: u64, frame: u32, parent: Option<ParentRef>) -> Lookup {
        let Some(p) = parent else {
            return Lookup::Restart;
        };
        let plock = self.frame_lock(p.frame);
        if !vlock::try_lock_from(plock, p.version) {
            return Lookup::Restart;
        }
        // parent is stable; the slot must still carry the word we resolved
        let pview = self.node(p.frame);
        if pview.is_leaf() || p.slot > pview.count() || pview.child_word(p.slot) != word {
            vlock::unlock_restore(plock);
            return Lookup::Restart;
        }
        // pull it out of its cooling bucket; losing this race to an evictor
        // means the frame lost its second chance
        let bucket = &self.cooling.buckets[self.cooling.bucket_of(word)];
        let found = {
            let mut fifo = bucket.fifo.lock();
            match fifo.iter().position(|x| *x == frame) {
                Some(i) => {
                    fifo.remove(i);
                    true
                }
                None => false,
            }
        };
        if !found {
            vlock::unlock_restore(plock);
            return Lookup::Restart;
        }
        self.cooling.count.fetch_sub(1, Ordering::AcqRel);
        self.frames[frame as usize].set_state(FrameState::Hot);
        self.frames[frame as usize].parent.store(p.frame, Ordering::Release);
        pview.set_child_word(p.slot, swizzle_frame(frame));
        vlock::unlock_bump(plock);
        self.stats.hits.fetch_add(1, Ordering::Relaxed);
        self.stats.restores.fetch_add(1, Ordering::Relaxed);
        Lookup::Hit { frame, restored_parent_version: Some(p.version + 2) }
    }

    /// Remote fetch with the shared-node read protocol, then admission.
    ///
    /// Shared nodes pay a version read before and after the node read and
    /// retry on any instability; non-shared nodes are a single read. The
    /// caller must have seen a mapping miss; exactly one concurrent fetcher
    /// wins the I/O marker, everyone else restarts.
    pub fn fetch<'c>(
        &'c self,
        ctx: &mut WorkerCtx,
        addr: GlobalAddress,
        shared: bool,
        parent: Option<ParentRef>,
        intent: FetchIntent,
    ) -> Result<Fetch<'c>, CacheError> {
        use dashmap::mapref::entry::Entry;
        match self.mapping.entry(addr.word()) {
            Entry::Occupied(_) => return Ok(Fetch::Restart),
            Entry::Vacant(v) => {
                v.insert(MapEntry::Io);
            }
        }
        self.stats.misses.fetch_add(1, Ordering::Relaxed);

        let mut release = MarkerGuard { cache: self, word: Some(addr.word()) };
        if shared {
            let v1 = self.fabric.read_word(addr)?;
            if vlock::is_locked(v1) {
                return Ok(Fetch::Restart); // guard removes the marker
            }
            self.fabric.read_words(addr, &mut ctx.scratch)?;
            let v2 = self.fabric.read_word(addr)?;
            if v1 != v2 {
                return Ok(Fetch::Restart);
            }
        } else {
            self.fabric.read_words(addr, &mut ctx.scratch)?;
        }

        let is_leaf = ctx.scratch[2] == 0; // level word
        let admit = match intent {
            FetchIntent::Force => true,
            _ if parent.is_none() => true, // the root is always admitted
            _ => {
                let p = if is_leaf { self.cfg.admit_prob_leaf } else { self.cfg.admit_prob_inner };
                p >= 1.0 || ctx.rng.gen::<f64>() < p
            }
        };
        if !admit {
            self.stats.rejections.fetch_add(1, Ordering::Relaxed);
            let data = new_node_buf(self.node_words);
            for (d, s) in data.iter().zip(&ctx.scratch) {
                d.store(*s, Ordering::Relaxed);
            }
            let holds_marker = intent == FetchIntent::Write;
            if holds_marker {
                // the TransientBuf takes over the marker: holding it across
                // the modify + write-back excludes racing fetchers, which is
                // what makes transient writes safe
                release.disarm();
            }
            // for read intents the guard removes the marker on return
            return Ok(Fetch::Transient(TransientBuf {
                cache: self,
                addr,
                data,
                holds_marker,
                pinned: None,
            }));
        }

        let scratch = std::mem::take(&mut ctx.scratch);
        let installed = self.install(ctx, addr, &scratch, parent)?;
        ctx.scratch = scratch;
        match installed {
            Some((frame, parent_version)) => {
                release.disarm(); // install replaced the marker
                Ok(Fetch::Admitted { frame, parent_version })
            }
            None => Ok(Fetch::Restart),
        }
    }

    /// Installs a node image into a fresh frame and swizzles the parent
    /// slot. Returns None (and leaves no trace) when the parent moved.
    fn install(
        &self,
        ctx: &mut WorkerCtx,
        addr: GlobalAddress,
        image: &[u64],
        parent: Option<ParentRef>,
    ) -> Result<Option<(u32, u64)>, CacheError> {
        let frame = self.get_free_frame(ctx)?;
        let flock = self.frame_lock(frame);
        let v = vlock::read(flock);
        let locked = vlock::try_lock_from(flock, v);
        debug_assert!(locked, "free frames are unlocked");
        self.frames[frame as usize].set_state(FrameState::Io);
        self.node(frame).load_from(image);
        self.frames[frame as usize].dirty.store(false, Ordering::Release);

        let parent_version = if let Some(p) = parent {
            let plock = self.frame_lock(p.frame);
            if !vlock::try_lock_from(plock, p.version) {
                // roll back: nobody has seen this frame yet
                self.frames[frame as usize].set_state(FrameState::Free);
                vlock::unlock_bump(flock);
                ctx.free.push(frame);
                return Ok(None);
            }
            let pview = self.node(p.frame);
            if pview.is_leaf() || p.slot > pview.count() || pview.child_word(p.slot) != addr.word()
            {
                vlock::unlock_restore(plock);
                self.frames[frame as usize].set_state(FrameState::Free);
                vlock::unlock_bump(flock);
                ctx.free.push(frame);
                return Ok(None);
            }
            pview.set_child_word(p.slot, swizzle_frame(frame));
            self.frames[frame as usize].parent.store(p.frame, Ordering::Release);
            vlock::unlock_bump(plock);
            p.version + 2
        } else {
            // root admission: pin it against eviction
            self.frames[frame as usize].parent.store(NO_FRAME, Ordering::Release);
            self.pin(frame);
            self.root_frame.store(frame, Ordering::Release);
            0
        };

        self.frames[frame as usize].set_state(FrameState::Hot);
        vlock::unlock_bump(flock);
        self.mapping.insert(addr.word(), MapEntry::Frame(frame));
        self.stats.admissions.fetch_add(1, Ordering::Relaxed);
        Ok(Some((frame, parent_version)))
    }

    fn get_free_frame(&self, ctx: &mut WorkerCtx) -> Result<u32, CacheError> {
        if let Some(f) = ctx.free.pop() {
            return Ok(f);
        }
        {
            let mut global = self.global_free.lock();
            for _ in 0..FREE_BATCH {
                match global.pop() {
                    Some(f) => ctx.free.push(f),
                    None => break,
                }
            }
        }
        if let Some(f) = ctx.free.pop() {
            return Ok(f);
        }
        self.evict_one(ctx)
    }

    /// Takes the oldest entry of a random non-empty cooling bucket, cooling
    /// fresh candidates first if the map is empty. Eviction itself issues no
    /// fabric traffic: dirty pages were written back when they cooled.
    pub fn evict_one(&self, ctx: &mut WorkerCtx) -> Result<u32, CacheError> {
        for _ in 0..MAX_EVICT_ROUNDS {
            if self.cooling.count.load(Ordering::Acquire) > 0 {
                let nbuckets = self.cooling.buckets.len();
                let start = ctx.rng.gen_range(0..nbuckets);
                for i in 0..nbuckets {
                    let bucket = &self.cooling.buckets[(start + i) % nbuckets];
                    let popped = bucket.fifo.lock().pop_front();
                    if let Some(frame) = popped {
                        self.cooling.count.fetch_sub(1, Ordering::AcqRel);
                        self.finalize_eviction(frame);
                        return Ok(frame);
                    }
                }
            }
            self.cool_sample(ctx);
        }
        Err(CacheError::CacheTooSmall)
    }

    fn finalize_eviction(&self, frame: u32) {
        // sole owner after the bucket pop: restorers give up when the frame
        // is not in its bucket
        let addr = self.node(frame).self_addr();
        self.mapping.remove(&addr.word());
        self.lock_frame_spin(frame);
        self.frames[frame as usize].set_state(FrameState::Free);
        self.frames[frame as usize].dirty.store(false, Ordering::Release);
        vlock::unlock_bump(self.frame_lock(frame));
        self.stats.evictions.fetch_add(1, Ordering::Relaxed);
    }

    fn lock_frame_spin(&self, frame: u32) {
        let lock = self.frame_lock(frame);
        loop {
            let v = vlock::read(lock);
            if !vlock::is_locked(v) && vlock::try_lock_from(lock, v) {
                return;
            }
            std::thread::yield_now();
        }
    }

    /// Randomized cooling pass: samples hot frames, delegates each sample
    /// down its swizzled path, and cools the path ends.
    pub fn cool_sample(&self, ctx: &mut WorkerCtx) {
        let mut cooled = 0;
        let mut attempts = 0;
        while cooled < self.cfg.sample_count && attempts < self.cfg.sample_count * 8 {
            attempts += 1;
            let f = ctx.rng.gen_range(0..self.frame_count) as u32;
            if self.frames[f as usize].state() != FrameState::Hot {
                continue;
            }
            let target = self.delegate_cooling(ctx, f);
            if self.cool_frame(ctx, target) {
                cooled += 1;
            }
        }
    }

    /// Walks from `start` down random swizzled children until reaching a
    /// node with none. Reads are optimistic; the result is re-verified under
    /// locks by `cool_frame`.
    pub fn delegate_cooling(&self, ctx: &mut WorkerCtx, start: u32) -> u32 {
        let mut cur = start;
        let mut swizzled: Vec<u32> = Vec::new();
        for _ in 0..DELEGATE_DEPTH_LIMIT {
            let view = self.node(cur);
            if view.is_leaf() {
                return cur;
            }
            swizzled.clear();
            let n = view.count();
            for i in 0..=n {
                let w = view.child_word(i);
                if word_is_swizzled(w) {
                    swizzled.push(swizzled_frame(w));
                }
            }
            if swizzled.is_empty() {
                return cur;
            }
            cur = swizzled[ctx.rng.gen_range(0..swizzled.len())];
        }
        cur
    }

    /// Cools one frame: unswizzles it from its parent, writes it back if
    /// dirty, and appends it to its cooling bucket (evicting the bucket head
    /// to the caller's free set when full). Returns false if any validation
    /// failed; callers just sample again.
    pub fn cool_frame(&self, ctx: &mut WorkerCtx, target: u32) -> bool {
        let parent = self.frames[target as usize].parent.load(Ordering::Acquire);
        if parent == NO_FRAME {
            return false;
        }
        let plock = self.frame_lock(parent);
        let vp = vlock::read(plock);
        if vlock::is_locked(vp) || !vlock::try_lock_from(plock, vp) {
            return false;
        }
        let pview = self.node(parent);
        let mut slot = None;
        if !pview.is_leaf() {
            for i in 0..=pview.count() {
                if pview.child_word(i) == swizzle_frame(target) {
                    slot = Some(i);
                    break;
                }
            }
        }
        let Some(slot) = slot else {
            vlock::unlock_restore(plock);
            return false;
        };
        let tlock = self.frame_lock(target);
        let vt = vlock::read(tlock);
        if vlock::is_locked(vt) || !vlock::try_lock_from(tlock, vt) {
            vlock::unlock_restore(plock);
            return false;
        }
        let tview = self.node(target);
        let pinned = self.frames[target as usize].pin.load(Ordering::Acquire) > 0;
        let has_swizzled_child = !tview.is_leaf()
            && (0..=tview.count()).any(|i| word_is_swizzled(tview.child_word(i)));
        if self.frames[target as usize].state() != FrameState::Hot || pinned || has_swizzled_child {
            vlock::unlock_restore(tlock);
            vlock::unlock_restore(plock);
            return false;
        }
        let addr = tview.self_addr();
        if self.frames[target as usize].dirty.load(Ordering::Acquire) {
            let img = tview.snapshot();
            self.fabric
                .write_words(addr, &img)
                .expect("write-back of a cached node failed");
            self.frames[target as usize].dirty.store(false, Ordering::Release);
            self.stats.writebacks.fetch_add(1, Ordering::Relaxed);
        }
        pview.set_child_word(slot, addr.word());
        self.frames[target as usize].set_state(FrameState::Cooling);

        let bucket = &self.cooling.buckets[self.cooling.bucket_of(addr.word())];
        let evicted = {
            let mut fifo = bucket.fifo.lock();
            let evicted = if fifo.len() >= self.cooling.slots_per_bucket {
                fifo.pop_front()
            } else {
                None
            };
            fifo.push_back(target);
            evicted
        };
        if evicted.is_none() {
            self.cooling.count.fetch_add(1, Ordering::AcqRel);
        }
        // contents unchanged: optimistic readers of the target stay valid
        vlock::unlock_restore(tlock);
        vlock::unlock_bump(plock);
        self.stats.coolings.fetch_add(1, Ordering::Relaxed);

        if let Some(head) = evicted {
            self.finalize_eviction(head);
            ctx.free.push(head);
        }
        true
    }

    /// Builds a pool-ready image of a frame: swizzled child words are
    /// replaced by the children's global addresses.
    pub fn unswizzled_image(&self, frame: u32) -> Vec<u64> {
        let view = self.node(frame);
        let mut img = view.snapshot();
        if view.is_leaf() {
            return img;
        }
        let base = crate::node::HEADER_WORDS + view.inner_cap();
        for i in 0..=view.count() {
            let w = img[base + i];
            if word_is_swizzled(w) {
                img[base + i] = self.node(swizzled_frame(w)).self_addr().word();
            }
        }
        img
    }

    /// Writes every dirty frame back (unswizzled images) and clears dirty
    /// flags. Requires writer quiescence, which callers orchestrate.
    pub fn flush_dirty(&self) -> Result<u64, FabricError> {
        let mut written = 0;
        for f in 0..self.frame_count as u32 {
            let frame = &self.frames[f as usize];
            if !matches!(frame.state(), FrameState::Hot | FrameState::Cooling) {
                continue;
            }
            if !frame.dirty.load(Ordering::Acquire) {
                continue;
            }
            let img = self.unswizzled_image(f);
            self.fabric.write_words(self.node(f).self_addr(), &img)?;
            frame.dirty.store(false, Ordering::Release);
            self.stats.writebacks.fetch_add(1, Ordering::Relaxed);
            written += 1;
        }
        Ok(written)
    }

    /// Count of dirty frames whose fence interval lies inside `[low, high)`.
    pub fn dirty_in_range(&self, low: u64, high: u64) -> u64 {
        (0..self.frame_count as u32)
            .filter(|&f| {
                let frame = &self.frames[f as usize];
                matches!(frame.state(), FrameState::Hot | FrameState::Cooling)
                    && frame.dirty.load(Ordering::Acquire)
                    && self.node(f).low_fence() >= low
                    && self.node(f).high_fence() <= high
            })
            .count() as u64
    }

    /// Flushes and drops every unpinned frame whose fence interval lies
    /// entirely inside `[low, high)`. Bottom-up (leaves first) so parents
    /// never lose swizzled children they still reference. Requires writer
    /// quiescence. Returns (write-backs, frames freed).
    pub fn release_range(&self, low: u64, high: u64) -> Result<(u64, u64), FabricError> {
        let mut writes = 0;
        let mut freed = 0;
        let mut level = 0u64;
        loop {
            let mut any_at_level = false;
            let mut any_above = false;
            for f in 0..self.frame_count as u32 {
                let frame = &self.frames[f as usize];
                if !matches!(frame.state(), FrameState::Hot | FrameState::Cooling) {
                    continue;
                }
                let view = self.node(f);
                if view.level() > level {
                    any_above = true;
                }
                if view.level() != level
                    || frame.pin.load(Ordering::Acquire) > 0
                    || view.low_fence() < low
                    || view.high_fence() > high
                {
                    continue;
                }
                any_at_level = true;
                let addr = view.self_addr();
                let state = frame.state();
                if state == FrameState::Cooling {
                    let bucket = &self.cooling.buckets[self.cooling.bucket_of(addr.word())];
                    let mut fifo = bucket.fifo.lock();
                    if let Some(i) = fifo.iter().position(|x| *x == f) {
                        fifo.remove(i);
                        self.cooling.count.fetch_sub(1, Ordering::AcqRel);
                    }
                } else {
                    // unswizzle from the (quiescent) parent
                    let p = frame.parent.load(Ordering::Acquire);
                    if p != NO_FRAME {
                        self.lock_frame_spin(p);
                        let pview = self.node(p);
                        if !pview.is_leaf() {
                            for i in 0..=pview.count() {
                                if pview.child_word(i) == swizzle_frame(f) {
                                    pview.set_child_word(i, addr.word());
                                    break;
                                }
                            }
                        }
                        vlock::unlock_bump(self.frame_lock(p));
                    }
                }
                if frame.dirty.load(Ordering::Acquire) {
                    let img = self.unswizzled_image(f);
                    self.fabric.write_words(addr, &img)?;
                    frame.dirty.store(false, Ordering::Release);
                    self.stats.writebacks.fetch_add(1, Ordering::Relaxed);
                    writes += 1;
                }
                self.mapping.remove(&addr.word());
                self.lock_frame_spin(f);
                frame.set_state(FrameState::Free);
                vlock::unlock_bump(self.frame_lock(f));
                self.global_free.lock().push(f);
                freed += 1;
            }
            let _ = any_at_level;
            if !any_above {
                break;
            }
            level += 1;
        }
        Ok((writes, freed))
    }

    /// Drops any cached copy of `addr` (used when an offloaded write updated
    /// the node remotely). Hot copies are detached from their parent and
    /// their whole swizzled subtree is freed. Returns true if a copy
    /// existed.
    pub fn invalidate_node(&self, addr: GlobalAddress) -> bool {
        loop {
            let entry = match self.mapping.get(&addr.word()) {
                None => return false,
                Some(e) => *e,
            };
            let frame = match entry {
                MapEntry::Io => {
                    // a racing admission; it cannot be for stale bytes (the
                    // I/O marker on the offload root gates the only path)
                    std::thread::yield_now();
                    continue;
                }
                MapEntry::Frame(f) => f,
            };
            match self.frames[frame as usize].state() {
                FrameState::Cooling => {
                    let bucket = &self.cooling.buckets[self.cooling.bucket_of(addr.word())];
                    let removed = {
                        let mut fifo = bucket.fifo.lock();
                        match fifo.iter().position(|x| *x == frame) {
                            Some(i) => {
                                fifo.remove(i);
                                true
                            }
                            None => false,
                        }
                    };
                    if !removed {
                        // racing evictor or restorer; reread the state
                        std::thread::yield_now();
                        continue;
                    }
                    self.cooling.count.fetch_sub(1, Ordering::AcqRel);
                    self.mapping.remove(&addr.word());
                    self.lock_frame_spin(frame);
                    self.frames[frame as usize].set_state(FrameState::Free);
                    self.frames[frame as usize].dirty.store(false, Ordering::Release);
                    vlock::unlock_bump(self.frame_lock(frame));
                    self.global_free.lock().push(frame);
                    self.stats.invalidations.fetch_add(1, Ordering::Relaxed);
                    return true;
                }
                FrameState::Hot => {
                    if self.detach_and_free(frame) {
                        self.stats.invalidations.fetch_add(1, Ordering::Relaxed);
                        return true;
                    }
                    std::thread::yield_now();
                }
                _ => {
                    std::thread::yield_now();
                }
            }
        }
    }

    /// Unswizzles `frame` from its parent and frees its entire swizzled
    /// subtree. Returns false when a race invalidated the attempt.
    fn detach_and_free(&self, frame: u32) -> bool {
        let p = self.frames[frame as usize].parent.load(Ordering::Acquire);
        if p == NO_FRAME {
            return false; // the pinned root is never invalidated this way
        }
        let plock = self.frame_lock(p);
        let vp = vlock::read(plock);
        if vlock::is_locked(vp) || !vlock::try_lock_from(plock, vp) {
            return false;
        }
        let pview = self.node(p);
        let mut found = false;
        if !pview.is_leaf() {
            for i in 0..=pview.count() {
                if pview.child_word(i) == swizzle_frame(frame) {
                    pview.set_child_word(i, self.node(frame).self_addr().word());
                    found = true;
                    break;
                }
            }
        }
        if !found {
            vlock::unlock_restore(plock);
            return false;
        }
        self.free_subtree(frame);
        vlock::unlock_bump(plock);
        true
    }

    /// Frees `frame` and every frame reachable through swizzled child words.
    /// The caller must have already detached `frame` from its parent (or own
    /// the parent slot).
    pub(crate) fn free_subtree(&self, frame: u32) {
        self.lock_frame_spin(frame);
        let view = self.node(frame);
        if !view.is_leaf() {
            for i in 0..=view.count() {
                let w = view.child_word(i);
                if word_is_swizzled(w) {
                    self.free_subtree(swizzled_frame(w));
                }
            }
        }
        let addr = view.self_addr();
        self.mapping.remove(&addr.word());
        debug_assert_eq!(self.frames[frame as usize].pin.load(Ordering::Acquire), 0);
        self.frames[frame as usize].set_state(FrameState::Free);
        self.frames[frame as usize].dirty.store(false, Ordering::Release);
        vlock::unlock_bump(self.frame_lock(frame));
        self.global_free.lock().push(frame);
    }

    /// Drops the pinned root frame and its swizzled subtree; the next
    /// traversal re-admits from the root-holder word.
    pub fn drop_root(&self) {
        let Some(root) = self.root_frame() else { return };
        self.root_frame.store(NO_FRAME, Ordering::Release);
        self.unpin(root);
        self.free_subtree(root);
    }

    /// Frees every swizzled child subtree of a frame the caller holds
    /// locked, restoring the global-address words. Used before splitting an
    /// inner node, whose right-half children would otherwise become
    /// unreachable swizzled orphans.
    pub(crate) fn unswizzle_all_children(&self, frame: u32) {
        let view = self.node(frame);
        if view.is_leaf() {
            return;
        }
        for i in 0..=view.count() {
            let w = view.child_word(i);
            if word_is_swizzled(w) {
                let child = swizzled_frame(w);
                let addr = self.node(child).self_addr();
                self.free_subtree(child);
                view.set_child_word(i, addr.word());
            }
        }
    }

    /// Frees a frame the caller holds locked and has already detached from
    /// the tree (merged-away siblings).
    pub(crate) fn free_locked_frame(&self, frame: u32) {
        let addr = self.node(frame).self_addr();
        self.mapping.remove(&addr.word());
        self.frames[frame as usize].set_state(FrameState::Free);
        self.frames[frame as usize].dirty.store(false, Ordering::Release);
        vlock::unlock_bump(self.frame_lock(frame));
        self.global_free.lock().push(frame);
    }

    pub(crate) fn set_parent_hint(&self, frame: u32, parent: u32) {
        self.frames[frame as usize].parent.store(parent, Ordering::Release);
    }

    /// Claims the I/O marker for a node about to be fetched or offloaded.
    /// False means someone else holds an entry; the caller restarts.
    pub(crate) fn try_io_marker(&self, word: u64) -> bool {
        use dashmap::mapref::entry::Entry;
        match self.mapping.entry(word) {
            Entry::Occupied(_) => false,
            Entry::Vacant(v) => {
                v.insert(MapEntry::Io);
                true
            }
        }
    }

    pub(crate) fn remove_io_marker(&self, word: u64) {
        let removed = self.mapping.remove(&word);
        debug_assert!(matches!(removed, Some((_, MapEntry::Io))));
    }

    /// Testing hook: cools the delegation target reached from `frame`.
    #[doc(hidden)]
    pub fn cool_target_of(&self, ctx: &mut WorkerCtx, frame: u32) -> bool {
        let t = self.delegate_cooling(ctx, frame);
        self.cool_frame(ctx, t)
    }

    /// Testing hook: maps a global address to its frame, if cached.
    #[doc(hidden)]
    pub fn frame_of(&self, addr: GlobalAddress) -> Option<u32> {
        match self.mapping.get(&addr.word()).map(|e| *e) {
            Some(MapEntry::Frame(f)) => Some(f),
            _ => None,
        }
    }

    /// Testing hook: true if the mapping table has any entry (frame or
    /// marker) for this address.
    #[doc(hidden)]
    pub fn mapped(&self, addr: GlobalAddress) -> bool {
        self.mapping.contains_key(&addr.word())
    }
}

/// Removes the I/O marker on drop unless disarmed.
struct MarkerGuard<'c> {
    cache: &'c Cache,
    word: Option<u64>,
}

impl MarkerGuard<'_> {
    fn disarm(&mut self) {
        self.word = None;
    }
}

impl Drop for MarkerGuard<'_> {
    fn drop(&mut self) {
        if let Some(w) = self.word {
            self.cache.mapping.remove(&w);
        }
    }
}

/// Cache replacements per second for a thread pool with the given cached /
/// uncached access latencies and miss ratio.
pub fn replacement_frequency(
    t_cached: Duration,
    t_miss: Duration,
    miss_ratio: f64,
    threads: u32,
) -> Result<f64, CacheError> {
    if !(miss_ratio > 0.0 && miss_ratio <= 1.0) {
        return Err(CacheError::UndefinedInput("miss ratio must be in (0, 1]"));
    }
    if t_cached <= Duration::ZERO || t_miss <= Duration::ZERO {
        return Err(CacheError::UndefinedInput("latencies must be positive"));
    }
    let tc = t_cached.as_secs_f64();
    let td = t_miss.as_secs_f64();
    let per_replacement = td + ((1.0 - miss_ratio) / miss_ratio) * tc;
    Ok(threads as f64 / per_replacement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{FabricConfig, LatencyMode};
    use crate::node::KEY_INFINITY;

    struct Rig {
        fabric: Arc<Fabric>,
        cache: Cache,
        ctx: WorkerCtx,
    }

    fn rig(frames: usize) -> Rig {
        let fabric = Fabric::new(FabricConfig {
            num_memory_servers: 2,
            region_bytes_per_server: 4 << 20,
            latency_mode: LatencyMode::Zero,
            ..Default::default()
        });
        let cache = Cache::new(
            CacheConfig {
                capacity_bytes: frames * 1024,
                node_size: 1024,
                admit_prob_leaf: 1.0,
                ..Default::default()
            },
            Arc::clone(&fabric),
        );
        let ctx = cache.worker_ctx(0);
        Rig { fabric, cache, ctx }
    }

    fn write_leaf(fabric: &Fabric, low: u64, high: u64, pairs: &[(u64, u64)]) -> GlobalAddress {
        let addr = fabric.allocate(0, 1024).unwrap();
        let buf = new_node_buf(128);
        let v = NodeView::new(&buf);
        v.init_leaf(addr, low, high);
        for &(k, val) in pairs {
            v.leaf_insert(k, val);
        }
        fabric.write_words(addr, &v.snapshot()).unwrap();
        addr
    }

    fn write_inner(
        fabric: &Fabric,
        level: u64,
        low: u64,
        high: u64,
        children: &[(u64, GlobalAddress)], // (separator-above, child); first separator ignored
    ) -> GlobalAddress {
        let addr = fabric.allocate(0, 1024).unwrap();
        let buf = new_node_buf(128);
        let v = NodeView::new(&buf);
        v.init(addr, level, low, high);
        v.set_child_word(0, children[0].1.word());
        for (sep, child) in &children[1..] {
            assert!(v.inner_insert(*sep, child.word()));
        }
        fabric.write_words(addr, &v.snapshot()).unwrap();
        addr
    }

    /// root -> inner -> two leaves, written straight to the pool.
    fn small_tree(fabric: &Fabric) -> (GlobalAddress, GlobalAddress, GlobalAddress, GlobalAddress) {
        let left = write_leaf(fabric, 0, 50, &[(1, 10), (2, 20)]);
        let right = write_leaf(fabric, 50, 100, &[(60, 600)]);
        let inner = write_inner(fabric, 1, 0, 100, &[(0, left), (50, right)]);
        let root = write_inner(fabric, 2, 0, KEY_INFINITY, &[(0, inner)]);
        (root, inner, left, right)
    }

    fn fetch_admit(rig: &mut Rig, addr: GlobalAddress, parent: Option<ParentRef>) -> u32 {
        match rig.cache.fetch(&mut rig.ctx, addr, false, parent, FetchIntent::Force).unwrap() {
            Fetch::Admitted { frame, .. } => frame,
            _ => panic!("expected admission"),
        }
    }

    /// Admits root -> inner -> left leaf, returns their frames.
    fn warm_path(rig: &mut Rig) -> (u32, u32, u32, GlobalAddress, GlobalAddress) {
        let (root, inner, left, _right) = small_tree(&rig.fabric);
        let root_f = fetch_admit(rig, root, None);
        let vroot = vlock::read(rig.cache.frame_lock(root_f));
        let slot = rig.cache.node(root_f).search_child(1).slot;
        let inner_f = fetch_admit(rig, inner, Some(ParentRef { frame: root_f, version: vroot, slot }));
        let vinner = vlock::read(rig.cache.frame_lock(inner_f));
        let slot = rig.cache.node(inner_f).search_child(1).slot;
        let left_f = fetch_admit(rig, left, Some(ParentRef { frame: inner_f, version: vinner, slot }));
        (root_f, inner_f, left_f, inner, left)
    }

    #[test]
    fn non_shared_fetch_is_one_read() {
        let mut r = rig(16);
        let (root, ..) = small_tree(&r.fabric);
        r.fabric.stats().reset();
        let f = fetch_admit(&mut r, root, None);
        assert_eq!(r.fabric.stats().snapshot().reads, 1);
        assert_eq!(r.cache.frame_state(f), FrameState::Hot);
        // the root is pinned
        assert_eq!(r.cache.root_frame(), Some(f));
    }

    #[test]
    fn shared_fetch_uses_version_bracket() {
        let mut r = rig(16);
        let (root, ..) = small_tree(&r.fabric);
        r.fabric.stats().reset();
        match r.cache.fetch(&mut r.ctx, root, true, None, FetchIntent::Read).unwrap() {
            Fetch::Admitted { .. } => {}
            _ => panic!(),
        }
        let s = r.fabric.stats().snapshot();
        assert_eq!(s.reads, 3); // 8B + node + 8B
        assert_eq!(s.read_bytes, 8 + 1024 + 8);
    }

    #[test]
    fn shared_fetch_of_locked_node_restarts_after_one_read() {
        let mut r = rig(16);
        let (root, ..) = small_tree(&r.fabric);
        // set the remote lock bit
        let v = r.fabric.read_word(root).unwrap();
        r.fabric.write_word(root, v | 1).unwrap();
        r.fabric.stats().reset();
        match r.cache.fetch(&mut r.ctx, root, true, None, FetchIntent::Read).unwrap() {
            Fetch::Restart => {}
            _ => panic!("locked node must force a restart"),
        }
        assert_eq!(r.fabric.stats().snapshot().reads, 1);
        assert!(!r.cache.mapped(root), "marker must be released on restart");
    }

    #[test]
    fn admission_swizzles_parent_slot() {
        let mut r = rig(16);
        let (root_f, inner_f, left_f, _, _) = warm_path(&mut r);
        let rview = r.cache.node(root_f);
        assert!(word_is_swizzled(rview.child_word(0)));
        assert_eq!(swizzled_frame(rview.child_word(0)), inner_f);
        let iview = r.cache.node(inner_f);
        assert!(word_is_swizzled(iview.child_word(0)));
        assert_eq!(swizzled_frame(iview.child_word(0)), left_f);
        // swizzled lookup resolves with no mapping probe
        match r.cache.lookup(swizzle_frame(left_f), None) {
            Lookup::Hit { frame, .. } => assert_eq!(frame, left_f),
            _ => panic!(),
        }
    }

    #[test]
    fn lazy_leaf_admission_threshold() {
        let fabric = Fabric::new(FabricConfig {
            num_memory_servers: 1,
            region_bytes_per_server: 4 << 20,
            latency_mode: LatencyMode::Zero,
            ..Default::default()
        });
        // p = 0: leaves never admitted
        let cache = Cache::new(
            CacheConfig {
                capacity_bytes: 16 * 1024,
                admit_prob_leaf: 0.0,
                ..Default::default()
            },
            Arc::clone(&fabric),
        );
        let mut ctx = cache.worker_ctx(0);
        let root = write_inner(
            &fabric,
            1,
            0,
            KEY_INFINITY,
            &[(0, write_leaf(&fabric, 0, KEY_INFINITY, &[(1, 1)]))],
        );
        let root_f = match cache.fetch(&mut ctx, root, false, None, FetchIntent::Read).unwrap() {
            Fetch::Admitted { frame, .. } => frame,
            _ => panic!(),
        };
        let leaf_addr = GlobalAddress::from_word(cache.node(root_f).child_word(0));
        let v = vlock::read(cache.frame_lock(root_f));
        match cache
            .fetch(&mut ctx, leaf_addr, false, Some(ParentRef { frame: root_f, version: v, slot: 0 }), FetchIntent::Read)
            .unwrap()
        {
            Fetch::Transient(t) => {
                assert_eq!(t.view().leaf_search(1), Some(1));
            }
            _ => panic!("p=0 must reject leaves"),
        }
        assert!(!cache.mapped(leaf_addr), "read transient releases the marker");
        assert_eq!(cache.stats().rejections, 1);
        // inner nodes are always admitted regardless
        assert_eq!(cache.stats().admissions, 1);
    }

    #[test]
    fn cooling_delegates_to_swizzle_childless_target() {
        let mut r = rig(16);
        let (root_f, inner_f, left_f, _, left) = warm_path(&mut r);
        // delegation from the root must land on the leaf
        assert_eq!(r.cache.delegate_cooling(&mut r.ctx, root_f), left_f);
        assert!(r.cache.cool_target_of(&mut r.ctx, root_f));
        assert_eq!(r.cache.frame_state(left_f), FrameState::Cooling);
        assert_eq!(r.cache.cooling_len(), 1);
        // unswizzled from the parent
        let iview = r.cache.node(inner_f);
        assert_eq!(iview.child_word(0), left.word());
        // mapping still resolves it (second chance is possible)
        assert_eq!(r.cache.frame_of(left), Some(left_f));
        // next delegation target is the inner node itself
        assert_eq!(r.cache.delegate_cooling(&mut r.ctx, root_f), inner_f);
    }

    #[test]
    fn cooling_dirty_frame_writes_back_once() {
        let mut r = rig(16);
        let (_root_f, _inner_f, left_f, _, left) = warm_path(&mut r);
        r.cache.node(left_f).leaf_insert(3, 30);
        r.cache.mark_dirty(left_f);
        r.fabric.stats().reset();
        assert!(r.cache.cool_frame(&mut r.ctx, left_f));
        let s = r.fabric.stats().snapshot();
        assert_eq!(s.writes, 1);
        assert_eq!(s.write_bytes, 1024);
        assert!(!r.cache.frame_dirty(left_f));
        // the remote copy now has the new pair
        let img = r.fabric.pool().snapshot_words(left, 128).unwrap();
        let buf: Box<[AtomicU64]> = img.iter().map(|w| AtomicU64::new(*w)).collect();
        assert_eq!(NodeView::new(&buf).leaf_search(3), Some(30));
    }

    #[test]
    fn second_chance_restores_and_reswizzles() {
        let mut r = rig(16);
        let (_root_f, inner_f, left_f, _, left) = warm_path(&mut r);
        assert!(r.cache.cool_frame(&mut r.ctx, left_f));
        let vp = vlock::read(r.cache.frame_lock(inner_f));
        let slot = r.cache.node(inner_f).search_child(1).slot;
        match r.cache.lookup(left.word(), Some(ParentRef { frame: inner_f, version: vp, slot })) {
            Lookup::Hit { frame, restored_parent_version } => {
                assert_eq!(frame, left_f);
                assert_eq!(restored_parent_version, Some(vp + 2));
            }
            _ => panic!("cooling lookup must restore"),
        }
        assert_eq!(r.cache.frame_state(left_f), FrameState::Hot);
        assert_eq!(r.cache.cooling_len(), 0);
        assert!(word_is_swizzled(r.cache.node(inner_f).child_word(slot)));
        assert_eq!(r.cache.stats().restores, 1);
    }

    #[test]
    fn eviction_pops_oldest_and_is_trafficless() {
        let mut r = rig(16);
        let (_root_f, _inner_f, left_f, _, left) = warm_path(&mut r);
        assert!(r.cache.cool_frame(&mut r.ctx, left_f));
        r.fabric.stats().reset();
        let f = r.cache.evict_one(&mut r.ctx).unwrap();
        assert_eq!(f, left_f);
        assert_eq!(r.fabric.stats().snapshot().total_verbs(), 0);
        assert!(!r.cache.mapped(left));
        assert_eq!(r.cache.frame_state(left_f), FrameState::Free);
    }

    #[test]
    fn flush_dirty_unswizzles_written_images() {
        let mut r = rig(16);
        let (_root_f, inner_f, _left_f, inner, _) = warm_path(&mut r);
        r.cache.mark_dirty(inner_f);
        r.fabric.stats().reset();
        assert_eq!(r.cache.flush_dirty().unwrap(), 1);
        assert_eq!(r.fabric.stats().snapshot().writes, 1);
        // remote image must carry global addresses, not frame indexes
        let img = r.fabric.pool().snapshot_words(inner, 128).unwrap();
        let buf: Box<[AtomicU64]> = img.iter().map(|w| AtomicU64::new(*w)).collect();
        let v = NodeView::new(&buf);
        for i in 0..=v.count() {
            assert!(!word_is_swizzled(v.child_word(i)));
        }
        // zero dirty frames -> zero writes
        assert_eq!(r.cache.flush_dirty().unwrap(), 0);
    }

    #[test]
    fn invalidate_cooling_copy() {
        let mut r = rig(16);
        let (_root_f, _inner_f, left_f, _, left) = warm_path(&mut r);
        assert!(r.cache.cool_frame(&mut r.ctx, left_f));
        assert!(r.cache.invalidate_node(left));
        assert!(!r.cache.mapped(left));
        assert_eq!(r.cache.frame_state(left_f), FrameState::Free);
        assert_eq!(r.cache.cooling_len(), 0);
        // absent copy
        assert!(!r.cache.invalidate_node(left));
    }

    #[test]
    fn invalidate_hot_copy_detaches_from_parent() {
        let mut r = rig(16);
        let (_root_f, inner_f, left_f, _, left) = warm_path(&mut r);
        assert!(r.cache.invalidate_node(left));
        assert_eq!(r.cache.frame_state(left_f), FrameState::Free);
        assert!(!r.cache.mapped(left));
        // parent slot unswizzled back to the global address
        assert_eq!(r.cache.node(inner_f).child_word(0), left.word());
    }

    #[test]
    fn frame_accounting_always_sums() {
        let mut r = rig(16);
        let (_root_f, _inner_f, left_f, _, _) = warm_path(&mut r);
        let total: usize = r.cache.state_counts().iter().sum();
        assert_eq!(total, 16);
        r.cache.cool_frame(&mut r.ctx, left_f);
        let counts = r.cache.state_counts();
        assert_eq!(counts.iter().sum::<usize>(), 16);
        assert_eq!(counts[FrameState::Cooling as usize], 1);
        r.cache.evict_one(&mut r.ctx).unwrap();
        let counts = r.cache.state_counts();
        assert_eq!(counts.iter().sum::<usize>(), 16);
        assert_eq!(counts[FrameState::Cooling as usize], 0);
    }

    #[test]
    fn cache_too_small_when_everything_pinned() {
        let mut r = rig(8);
        let (root, ..) = small_tree(&r.fabric);
        let root_f = fetch_admit(&mut r, root, None);
        let _ = root_f;
        // pin every frame so no target can cool
        for f in 0..8 {
            r.cache.pin(f);
        }
        // drain free frames
        let mut held = Vec::new();
        loop {
            let got = {
                let mut global = r.cache.global_free.lock();
                global.pop()
            };
            match got {
                Some(f) => held.push(f),
                None => break,
            }
        }
        r.ctx.free.clear();
        assert!(matches!(r.cache.evict_one(&mut r.ctx), Err(CacheError::CacheTooSmall)));
    }

    #[test]
    fn concurrent_misses_issue_one_fabric_read() {
        let r = rig(32);
        let (root, inner, ..) = small_tree(&r.fabric);
        let cache = &r.cache;
        let fabric = &r.fabric;
        let mut ctx0 = cache.worker_ctx(1);
        let root_f = match cache.fetch(&mut ctx0, root, false, None, FetchIntent::Force).unwrap() {
            Fetch::Admitted { frame, .. } => frame,
            _ => panic!(),
        };
        fabric.stats().reset();
        let barrier = std::sync::Barrier::new(8);
        std::thread::scope(|s| {
            for t in 0..8u64 {
                let barrier = &barrier;
                s.spawn(move || {
                    let mut ctx = cache.worker_ctx(10 + t);
                    barrier.wait();
                    loop {
                        let vp = vlock::read(cache.frame_lock(root_f));
                        if vlock::is_locked(vp) {
                            std::thread::yield_now();
                            continue;
                        }
                        let parent = Some(ParentRef { frame: root_f, version: vp, slot: 0 });
                        match cache.lookup(inner.word(), parent) {
                            Lookup::Hit { .. } => break,
                            Lookup::Miss => {
                                match cache
                                    .fetch(&mut ctx, inner, false, parent, FetchIntent::Read)
                                    .unwrap()
                                {
                                    Fetch::Admitted { .. } => break,
                                    _ => std::thread::yield_now(),
                                }
                            }
                            _ => std::thread::yield_now(),
                        }
                    }
                });
            }
        });
        assert_eq!(fabric.stats().snapshot().reads, 1, "exactly one fetch may reach the fabric");
    }

    #[test]
    fn replacement_frequency_formula() {
        let f = |tc_ns: u64, td_ns: u64, r: f64, n: u32| {
            replacement_frequency(
                Duration::from_nanos(tc_ns),
                Duration::from_nanos(td_ns),
                r,
                n,
            )
            .unwrap()
        };
        // remote-memory-class miss penalty
        let fast = f(400, 2_000, 0.1, 36);
        assert!((fast - 6.43e6).abs() / 6.43e6 < 0.01, "{fast}");
        // storage-class miss penalty
        let slow = f(400, 100_000, 0.1, 36);
        assert!((slow - 0.35e6).abs() / 0.35e6 < 0.01, "{slow}");
        assert!(fast / slow >= 18.0);
        // R = 1: every access misses
        let all_miss = f(400, 2_000, 1.0, 36);
        assert!((all_miss - 36.0 / 2e-6).abs() < 1.0);
        assert!(replacement_frequency(
            Duration::from_nanos(400),
            Duration::from_nanos(2000),
            0.0,
            36
        )
        .is_err());
    }

    #[test]
    fn transient_write_back_holds_marker() {
        let fabric = Fabric::new(FabricConfig {
            num_memory_servers: 1,
            region_bytes_per_server: 4 << 20,
            latency_mode: LatencyMode::Zero,
            ..Default::default()
        });
        let cache = Cache::new(
            CacheConfig { capacity_bytes: 16 * 1024, admit_prob_leaf: 0.0, ..Default::default() },
            Arc::clone(&fabric),
        );
        let mut ctx = cache.worker_ctx(0);
        let leaf = write_leaf(&fabric, 0, KEY_INFINITY, &[(1, 1)]);
        let root = write_inner(&fabric, 1, 0, KEY_INFINITY, &[(0, leaf)]);
        let root_f = match cache.fetch(&mut ctx, root, false, None, FetchIntent::Read).unwrap() {
            Fetch::Admitted { frame, .. } => frame,
            _ => panic!(),
        };
        let v = vlock::read(cache.frame_lock(root_f));
        let t = match cache
            .fetch(&mut ctx, leaf, false, Some(ParentRef { frame: root_f, version: v, slot: 0 }), FetchIntent::Write)
            .unwrap()
        {
            Fetch::Transient(t) => t,
            _ => panic!(),
        };
        // while held, other fetchers see the marker
        assert!(cache.mapped(leaf));
        t.view().leaf_insert(2, 22);
        t.write_back().unwrap();
        assert!(!cache.mapped(leaf));
        let img = fabric.pool().snapshot_words(leaf, 128).unwrap();
        let buf: Box<[AtomicU64]> = img.iter().map(|w| AtomicU64::new(*w)).collect();
        assert_eq!(NodeView::new(&buf).leaf_search(2), Some(22));
    }
}
