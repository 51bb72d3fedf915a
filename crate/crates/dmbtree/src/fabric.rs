//! Simulated disaggregated memory fabric.
//!
//! One process hosts every memory server as a flat, word-addressed region.
//! Compute-side code reaches the pool exclusively through the one-sided verb
//! API ([`Fabric::read_words`], [`Fabric::write_words`], [`Fabric::cas_word`])
//! and a two-sided RPC channel served by per-server executor threads.
//!
//! Reads and writes deliberately copy without locking: concurrent accesses to
//! the same range can observe torn data at 8-byte granularity, exactly like
//! real one-sided remote reads. Callers must layer optimistic validation on
//! top. `cas_word` is atomic per aligned 8-byte word.
//!
//! Every verb is counted in [`FabricStats`] and, depending on
//! [`LatencyMode`], pays a configurable injected delay.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, unbounded, Sender};
use parking_lot::Mutex;
use thiserror::Error;

/// All fabric transfers are multiples of this.
pub const WORD_BYTES: usize = 8;

const SERVER_BITS: u32 = 15;
const OFFSET_BITS: u32 = 48;
const SWIZZLED_BIT: u64 = 1 << 63;
const OFFSET_MASK: u64 = (1 << OFFSET_BITS) - 1;

/// Tagged 64-bit pointer into the memory pool:
/// `[swizzled:1][server:15][offset:48]`.
///
/// Addresses stored in the pool itself are always unswizzled; the swizzled
/// bit is only ever set on compute-side cache copies, where the low bits
/// carry a local frame index instead of a pool offset.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlobalAddress(u64);

impl GlobalAddress {
    /// The well-known root-holder word: the first 8 bytes of server 0,
    /// reserved at fabric construction and never handed out by `allocate`.
    pub const ROOT_HOLDER: GlobalAddress = GlobalAddress(0);

    pub fn new(server: u16, offset: u64) -> Self {
        assert!((server as u64) < (1 << SERVER_BITS), "server id out of range");
        assert!(offset <= OFFSET_MASK, "offset out of range");
        GlobalAddress(((server as u64) << OFFSET_BITS) | offset)
    }

    pub fn from_word(word: u64) -> Self {
        GlobalAddress(word)
    }

    pub fn word(self) -> u64 {
        self.0
    }

    pub fn is_swizzled(self) -> bool {
        self.0 & SWIZZLED_BIT != 0
    }

    pub fn server(self) -> u16 {
        ((self.0 & !SWIZZLED_BIT) >> OFFSET_BITS) as u16
    }

    pub fn offset(self) -> u64 {
        self.0 & OFFSET_MASK
    }

    pub fn add(self, bytes: u64) -> Self {
        GlobalAddress::new(self.server(), self.offset() + bytes)
    }
}

impl fmt::Debug for GlobalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_swizzled() {
            write!(f, "swz:{}", self.0 & OFFSET_MASK)
        } else {
            write!(f, "{}:{:#x}", self.server(), self.offset())
        }
    }
}

/// Local frame reference encoded as a swizzled pointer word.
pub fn swizzle_frame(frame: u32) -> u64 {
    SWIZZLED_BIT | frame as u64
}

/// Frame index carried by a swizzled pointer word.
pub fn swizzled_frame(word: u64) -> u32 {
    debug_assert!(word & SWIZZLED_BIT != 0);
    (word & OFFSET_MASK) as u32
}

pub fn word_is_swizzled(word: u64) -> bool {
    word & SWIZZLED_BIT != 0
}

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("server {server} out of {size} region bytes (requested {requested})")]
    OutOfRegion { server: u16, requested: u64, size: u64 },
    #[error("access fault at {addr:?} len {len}")]
    Fault { addr: GlobalAddress, len: u64 },
    #[error("swizzled address {0:#x} passed to a fabric verb")]
    SwizzledAddress(u64),
    #[error("misaligned address {0:?}")]
    Misaligned(GlobalAddress),
    #[error("no executor registered on server {0}")]
    NoExecutor(u16),
    #[error("unknown server {0}")]
    UnknownServer(u16),
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Delay model for injected verb latency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatencyMode {
    /// No delay; deterministic unit-test mode.
    Zero,
    /// Fixed delay per verb.
    Fixed,
    /// Fixed delay plus seeded uniform jitter.
    FixedJitter,
}

#[derive(Clone, Debug)]
pub struct FabricConfig {
    pub num_memory_servers: u16,
    pub region_bytes_per_server: u64,
    pub latency_one_sided: Duration,
    pub latency_two_sided: Duration,
    pub latency_jitter_pct: u32,
    pub latency_mode: LatencyMode,
    pub rng_seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            num_memory_servers: 2,
            region_bytes_per_server: 64 << 20,
            latency_one_sided: Duration::from_micros(2),
            latency_two_sided: Duration::from_micros(4),
            latency_jitter_pct: 10,
            latency_mode: LatencyMode::Zero,
            rng_seed: 42,
        }
    }
}

impl FabricConfig {
    /// Parses the documented `key = value` config format. Unknown keys are
    /// rejected so typos fail loudly. Durations accept `ns`, `us` and `ms`
    /// suffixes; a bare integer means nanoseconds.
    pub fn from_kv_text(text: &str) -> Result<Self, FabricError> {
        let mut cfg = FabricConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FabricError::BadConfig(format!("line {}: missing '='", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "num_memory_servers" => cfg.num_memory_servers = parse_num(key, value)? as u16,
                "region_bytes_per_server" => cfg.region_bytes_per_server = parse_num(key, value)?,
                "latency_one_sided" => cfg.latency_one_sided = parse_duration(key, value)?,
                "latency_two_sided" => cfg.latency_two_sided = parse_duration(key, value)?,
                "latency_jitter_pct" => cfg.latency_jitter_pct = parse_num(key, value)? as u32,
                "latency_mode" => {
                    cfg.latency_mode = match value {
                        "zero" => LatencyMode::Zero,
                        "fixed" => LatencyMode::Fixed,
                        "fixed-with-jitter" => LatencyMode::FixedJitter,
                        other => {
                            return Err(FabricError::BadConfig(format!(
                                "latency_mode must be zero|fixed|fixed-with-jitter, got {other:?}"
                            )))
                        }
                    }
                }
                "rng_seed" => cfg.rng_seed = parse_num(key, value)?,
                other => return Err(FabricError::BadConfig(format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }
}

fn parse_num(key: &str, value: &str) -> Result<u64, FabricError> {
    value
        .replace('_', "")
        .parse::<u64>()
        .map_err(|e| FabricError::BadConfig(format!("{key}: {e}")))
}

fn parse_duration(key: &str, value: &str) -> Result<Duration, FabricError> {
    let (digits, unit) = match value.find(|c: char| c.is_ascii_alphabetic()) {
        Some(pos) => value.split_at(pos),
        None => (value, "ns"),
    };
    let n = parse_num(key, digits.trim())?;
    let d = match unit.trim() {
        "ns" => Duration::from_nanos(n),
        "us" => Duration::from_micros(n),
        "ms" => Duration::from_millis(n),
        other => return Err(FabricError::BadConfig(format!("{key}: bad unit {other:?}"))),
    };
    Ok(d)
}

/// Monotonic verb counters. `snapshot` is cheap and `delta` against an
/// earlier snapshot yields per-phase accounting.
#[derive(Default)]
pub struct FabricStats {
    reads: AtomicU64,
    writes: AtomicU64,
    cas: AtomicU64,
    two_sided: AtomicU64,
    read_bytes: AtomicU64,
    write_bytes: AtomicU64,
    cas_bytes: AtomicU64,
    two_sided_bytes: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FabricStatsSnapshot {
    pub reads: u64,
    pub writes: u64,
    pub cas: u64,
    pub two_sided: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub cas_bytes: u64,
    pub two_sided_bytes: u64,
}

impl FabricStatsSnapshot {
    pub fn total_verbs(&self) -> u64 {
        self.reads + self.writes + self.cas + self.two_sided
    }

    pub fn one_sided_verbs(&self) -> u64 {
        self.reads + self.writes + self.cas
    }

    pub fn total_bytes(&self) -> u64 {
        self.read_bytes + self.write_bytes + self.cas_bytes + self.two_sided_bytes
    }

    pub fn delta(&self, earlier: &FabricStatsSnapshot) -> FabricStatsSnapshot {
        FabricStatsSnapshot {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
            cas: self.cas - earlier.cas,
            two_sided: self.two_sided - earlier.two_sided,
            read_bytes: self.read_bytes - earlier.read_bytes,
            write_bytes: self.write_bytes - earlier.write_bytes,
            cas_bytes: self.cas_bytes - earlier.cas_bytes,
            two_sided_bytes: self.two_sided_bytes - earlier.two_sided_bytes,
        }
    }
}

impl FabricStats {
    pub fn snapshot(&self) -> FabricStatsSnapshot {
        FabricStatsSnapshot {
            reads: self.reads.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            cas: self.cas.load(Ordering::Relaxed),
            two_sided: self.two_sided.load(Ordering::Relaxed),
            read_bytes: self.read_bytes.load(Ordering::Relaxed),
            write_bytes: self.write_bytes.load(Ordering::Relaxed),
            cas_bytes: self.cas_bytes.load(Ordering::Relaxed),
            two_sided_bytes: self.two_sided_bytes.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.reads.store(0, Ordering::Relaxed);
        self.writes.store(0, Ordering::Relaxed);
        self.cas.store(0, Ordering::Relaxed);
        self.two_sided.store(0, Ordering::Relaxed);
        self.read_bytes.store(0, Ordering::Relaxed);
        self.write_bytes.store(0, Ordering::Relaxed);
        self.cas_bytes.store(0, Ordering::Relaxed);
        self.two_sided_bytes.store(0, Ordering::Relaxed);
    }
}

struct Region {
    words: Box<[AtomicU64]>,
    bump: AtomicU64,
}

/// The raw memory-server regions, shared between the verb front-end and
/// memory-side executors (which access their own server's region directly,
/// without fabric verbs).
pub struct MemoryPool {
    regions: Vec<Region>,
    region_bytes: u64,
}

impl MemoryPool {
    fn new(num_servers: u16, region_bytes: u64) -> Self {
        assert!(region_bytes % WORD_BYTES as u64 == 0);
        let words_per = (region_bytes / WORD_BYTES as u64) as usize;
        let regions = (0..num_servers)
            .map(|_| Region {
                words: (0..words_per).map(|_| AtomicU64::new(0)).collect(),
                bump: AtomicU64::new(0),
            })
            .collect();
        MemoryPool { regions, region_bytes }
    }

    pub fn num_servers(&self) -> u16 {
        self.regions.len() as u16
    }

    pub fn region_bytes(&self) -> u64 {
        self.region_bytes
    }

    fn region(&self, server: u16) -> Result<&Region, FabricError> {
        self.regions
            .get(server as usize)
            .ok_or(FabricError::UnknownServer(server))
    }

    fn check(&self, addr: GlobalAddress, len_bytes: u64) -> Result<(), FabricError> {
        if addr.is_swizzled() {
            return Err(FabricError::SwizzledAddress(addr.word()));
        }
        if addr.offset() % WORD_BYTES as u64 != 0 || len_bytes % WORD_BYTES as u64 != 0 {
            return Err(FabricError::Misaligned(addr));
        }
        let region = self.region(addr.server())?;
        let end = addr
            .offset()
            .checked_add(len_bytes)
            .ok_or(FabricError::Fault { addr, len: len_bytes })?;
        if end > region.words.len() as u64 * WORD_BYTES as u64 {
            return Err(FabricError::Fault { addr, len: len_bytes });
        }
        Ok(())
    }

    /// Bump-allocates a zeroed, exclusively owned range. Nothing is ever
    /// freed back; the simulation does not model pool reclamation.
    pub fn allocate(&self, server: u16, size: u64) -> Result<GlobalAddress, FabricError> {
        let size = size.div_ceil(WORD_BYTES as u64) * WORD_BYTES as u64;
        let region = self.region(server)?;
        let limit = region.words.len() as u64 * WORD_BYTES as u64;
        let mut cur = region.bump.load(Ordering::Relaxed);
        loop {
            if cur + size > limit {
                return Err(FabricError::OutOfRegion { server, requested: size, size: limit });
            }
            match region.bump.compare_exchange_weak(
                cur,
                cur + size,
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => return Ok(GlobalAddress::new(server, cur)),
                Err(seen) => cur = seen,
            }
        }
    }

    /// Direct word-slice view of a range, used by memory-side executors and
    /// offline verification walks. Does not count as fabric traffic.
    pub fn word_slice(&self, addr: GlobalAddress, words: usize) -> Result<&[AtomicU64], FabricError> {
        self.check(addr, (words * WORD_BYTES) as u64)?;
        let region = self.region(addr.server())?;
        let start = addr.offset() as usize / WORD_BYTES;
        Ok(&region.words[start..start + words])
    }

    /// Owned copy of a range, for byte-level comparisons in tests.
    pub fn snapshot_words(&self, addr: GlobalAddress, words: usize) -> Result<Vec<u64>, FabricError> {
        let slice = self.word_slice(addr, words)?;
        Ok(slice.iter().map(|w| w.load(Ordering::Acquire)).collect())
    }
}

struct RpcJob {
    payload: Vec<u8>,
    reply: Sender<Vec<u8>>,
}

struct Executor {
    tx: Sender<RpcJob>,
    threads: Vec<JoinHandle<()>>,
}

/// Handler run on memory-side executor threads: `(server_id, request) -> reply`.
pub type RpcHandler = dyn Fn(u16, &[u8]) -> Vec<u8> + Send + Sync;

struct LatencyInjector {
    mode: LatencyMode,
    jitter_pct: u32,
    seed: u64,
    seq: AtomicU64,
}

// Sleeping is only accurate enough above this; shorter delays spin.
const SLEEP_THRESHOLD: Duration = Duration::from_micros(20);

impl LatencyInjector {
    fn delay(&self, base: Duration) {
        let d = match self.mode {
            LatencyMode::Zero => return,
            LatencyMode::Fixed => base,
            LatencyMode::FixedJitter => {
                let r = splitmix64(self.seed ^ self.seq.fetch_add(1, Ordering::Relaxed));
                // uniform in [1 - pct/100, 1 + pct/100]
                let unit = (r >> 11) as f64 / (1u64 << 53) as f64;
                let f = 1.0 + (2.0 * unit - 1.0) * self.jitter_pct as f64 / 100.0;
                base.mul_f64(f.max(0.0))
            }
        };
        if d >= SLEEP_THRESHOLD {
            std::thread::sleep(d);
        } else {
            let deadline = Instant::now() + d;
            while Instant::now() < deadline {
                std::hint::spin_loop();
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Verb front-end plus executor lifecycle. One `Fabric` simulates the whole
/// memory pool; all operations are callable from any thread.
pub struct Fabric {
    pool: Arc<MemoryPool>,
    config: FabricConfig,
    stats: FabricStats,
    latency: LatencyInjector,
    executors: Mutex<Vec<Option<Executor>>>,
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Arc<Fabric> {
        let pool = Arc::new(MemoryPool::new(
            config.num_memory_servers,
            config.region_bytes_per_server,
        ));
        // Reserve the root-holder word so offset 0 is never a node address.
        pool.allocate(0, WORD_BYTES as u64).expect("region too small");
        let latency = LatencyInjector {
            mode: config.latency_mode,
            jitter_pct: config.latency_jitter_pct,
            seed: config.rng_seed,
            seq: AtomicU64::new(0),
        };
        let executors = Mutex::new((0..config.num_memory_servers).map(|_| None).collect());
        Arc::new(Fabric { pool, config, stats: FabricStats::default(), latency, executors })
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn pool(&self) -> &Arc<MemoryPool> {
        &self.pool
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn allocate(&self, server: u16, size: u64) -> Result<GlobalAddress, FabricError> {
        self.pool.allocate(server, size)
    }

    /// One-sided read of `dst.len()` words into a caller-owned buffer.
    pub fn read_words(&self, addr: GlobalAddress, dst: &mut [u64]) -> Result<(), FabricError> {
        let len = (dst.len() * WORD_BYTES) as u64;
        self.pool.check(addr, len)?;
        self.stats.reads.fetch_add(1, Ordering::Relaxed);
        self.stats.read_bytes.fetch_add(len, Ordering::Relaxed);
        self.latency.delay(self.config.latency_one_sided);
        let src = self.pool.word_slice(addr, dst.len())?;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s.load(Ordering::Acquire);
        }
        Ok(())
    }

    /// One-sided read of a single word.
    pub fn read_word(&self, addr: GlobalAddress) -> Result<u64, FabricError> {
        let mut word = [0u64];
        self.read_words(addr, &mut word)?;
        Ok(word[0])
    }

    /// One-sided write of `src.len()` words.
    pub fn write_words(&self, addr: GlobalAddress, src: &[u64]) -> Result<(), FabricError> {
        let len = (src.len() * WORD_BYTES) as u64;
        self.pool.check(addr, len)?;
        self.stats.writes.fetch_add(1, Ordering::Relaxed);
        self.stats.write_bytes.fetch_add(len, Ordering::Relaxed);
        self.latency.delay(self.config.latency_one_sided);
        let dst = self.pool.word_slice(addr, src.len())?;
        for (d, s) in dst.iter().zip(src) {
            d.store(*s, Ordering::Release);
        }
        Ok(())
    }

    pub fn write_word(&self, addr: GlobalAddress, word: u64) -> Result<(), FabricError> {
        self.write_words(addr, &[word])
    }

    /// Atomic compare-and-swap on one aligned word; returns the observed
    /// prior value (swap happened iff it equals `expected`).
    pub fn cas_word(
        &self,
        addr: GlobalAddress,
        expected: u64,
        desired: u64,
    ) -> Result<u64, FabricError> {
        self.pool.check(addr, WORD_BYTES as u64)?;
        self.stats.cas.fetch_add(1, Ordering::Relaxed);
        self.stats.cas_bytes.fetch_add(WORD_BYTES as u64, Ordering::Relaxed);
        self.latency.delay(self.config.latency_one_sided);
        let slot = &self.pool.word_slice(addr, 1)?[0];
        match slot.compare_exchange(expected, desired, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(prev) => Ok(prev),
            Err(prev) => Ok(prev),
        }
    }

    /// Registers `threads` executor threads on `server`, replacing any
    /// previous registration. The handler runs on the executor threads and
    /// may access the pool directly.
    pub fn register_executor(
        &self,
        server: u16,
        threads: usize,
        handler: Arc<RpcHandler>,
    ) -> Result<(), FabricError> {
        assert!(threads > 0);
        let mut executors = self.executors.lock();
        if server as usize >= executors.len() {
            return Err(FabricError::UnknownServer(server));
        }
        let (tx, rx) = unbounded::<RpcJob>();
        let joined: Vec<_> = (0..threads)
            .map(|_| {
                let rx = rx.clone();
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    while let Ok(job) = rx.recv() {
                        let reply = handler(server, &job.payload);
                        let _ = job.reply.send(reply);
                    }
                })
            })
            .collect();
        if let Some(old) = executors[server as usize].replace(Executor { tx, threads: joined }) {
            drop(old.tx);
            for t in old.threads {
                let _ = t.join();
            }
        }
        Ok(())
    }

    /// Two-sided RPC: blocks until an executor thread replies. Counts one
    /// two-sided verb; request and reply sizes both feed traffic bytes.
    pub fn rpc_call(&self, server: u16, request: &[u8]) -> Result<Vec<u8>, FabricError> {
        let tx = {
            let executors = self.executors.lock();
            let slot = executors
                .get(server as usize)
                .ok_or(FabricError::UnknownServer(server))?;
            slot.as_ref().ok_or(FabricError::NoExecutor(server))?.tx.clone()
        };
        self.stats.two_sided.fetch_add(1, Ordering::Relaxed);
        self.stats
            .two_sided_bytes
            .fetch_add(request.len() as u64, Ordering::Relaxed);
        self.latency.delay(self.config.latency_two_sided);
        let (reply_tx, reply_rx) = bounded(1);
        tx.send(RpcJob { payload: request.to_vec(), reply: reply_tx })
            .map_err(|_| FabricError::NoExecutor(server))?;
        let reply = reply_rx.recv().map_err(|_| FabricError::NoExecutor(server))?;
        self.stats
            .two_sided_bytes
            .fetch_add(reply.len() as u64, Ordering::Relaxed);
        Ok(reply)
    }
}

impl Drop for Fabric {
    fn drop(&mut self) {
        let mut executors = self.executors.lock();
        for slot in executors.iter_mut() {
            if let Some(exec) = slot.take() {
                drop(exec.tx);
                for t in exec.threads {
                    let _ = t.join();
                }
            }
        }
    }
}
