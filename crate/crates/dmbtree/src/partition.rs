//! Logical partitioning of the key space across compute servers.
//!
//! A partition table is an ordered list of boundary keys cutting the full
//! u64 domain into contiguous half-open ranges, each owned by one compute
//! server. A boundary key belongs to the range above it. Nothing here moves
//! data; ownership is purely a routing fact, which is what makes
//! repartitioning cheap (see `tree::repartition`).

use thiserror::Error;

pub type ComputeId = u16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("boundaries must be strictly ascending and nonzero")]
    BadBoundaries,
    #[error("owner list must have exactly boundaries + 1 entries")]
    BadOwners,
}

/// Immutable snapshot of range ownership. Compute servers swap whole tables
/// atomically; the epoch lets in-flight work detect the swap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionTable {
    boundaries: Vec<u64>,
    owners: Vec<ComputeId>,
    epoch: u64,
}

impl PartitionTable {
    pub fn new(boundaries: Vec<u64>, owners: Vec<ComputeId>) -> Result<Self, PartitionError> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.first() == Some(&0) {
            return Err(PartitionError::BadBoundaries);
        }
        if owners.len() != boundaries.len() + 1 {
            return Err(PartitionError::BadOwners);
        }
        Ok(PartitionTable { boundaries, owners, epoch: 0 })
    }

    /// One range per server, equal widths over `[0, domain_upper)`.
    pub fn equal_width(servers: ComputeId, domain_upper: u64) -> Self {
        assert!(servers >= 1);
        let width = domain_upper / servers as u64;
        let boundaries = (1..servers as u64).map(|i| i * width).collect();
        let owners = (0..servers).collect();
        PartitionTable { boundaries, owners, epoch: 0 }
    }

    pub fn single(owner: ComputeId) -> Self {
        PartitionTable { boundaries: Vec::new(), owners: vec![owner], epoch: 0 }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn num_ranges(&self) -> usize {
        self.owners.len()
    }

    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }

    pub fn owners(&self) -> &[ComputeId] {
        &self.owners
    }

    fn range_index(&self, key: u64) -> usize {
        self.boundaries.partition_point(|b| *b <= key)
    }

    /// Total routing function: every key has exactly one owner.
    pub fn owner_of(&self, key: u64) -> ComputeId {
        self.owners[self.range_index(key)]
    }

    /// True iff the fence interval `[low, high)` spans more than one range.
    /// `high == u64::MAX` is treated as +infinity.
    pub fn is_shared(&self, low: u64, high: u64) -> bool {
        if low >= high {
            return false;
        }
        // last key the interval can contain
        let last = high - 1;
        self.range_index(low) != self.range_index(last)
    }

    /// Key ranges owned by `server` in this table, as half-open intervals
    /// with `u64::MAX` standing in for the domain end.
    pub fn ranges_of(&self, server: ComputeId) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for (i, owner) in self.owners.iter().enumerate() {
            if *owner != server {
                continue;
            }
            let low = if i == 0 { 0 } else { self.boundaries[i - 1] };
            let high = if i == self.boundaries.len() { u64::MAX } else { self.boundaries[i] };
            out.push((low, high));
        }
        out
    }

    /// Intervals owned by `server` here but not in `next` — the ranges that
    /// must be flushed and dropped when `next` is installed. Computed on
    /// boundary points of both tables, so partial overlaps split correctly.
    pub fn ceded_ranges(&self, next: &PartitionTable, server: ComputeId) -> Vec<(u64, u64)> {
        let mut points = vec![0u64];
        points.extend_from_slice(&self.boundaries);
        points.extend_from_slice(&next.boundaries);
        points.sort_unstable();
        points.dedup();
        let mut out: Vec<(u64, u64)> = Vec::new();
        for (i, &low) in points.iter().enumerate() {
            let high = points.get(i + 1).copied().unwrap_or(u64::MAX);
            if self.owner_of(low) == server && next.owner_of(low) != server {
                match out.last_mut() {
                    Some(last) if last.1 == low => last.1 = high,
                    _ => out.push((low, high)),
                }
            }
        }
        out
    }
}
