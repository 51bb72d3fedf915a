//! Independent reference map and operation-log replay checker.
//!
//! This module is the ground truth the index is judged against. It must
//! stay free of any code shared with the tree, cache or fabric layers:
//! it is a plain sorted map plus log bookkeeping.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Insert,
    Update,
    Remove,
    Lookup,
    Scan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpResult {
    Inserted,
    Updated,
    Removed,
    NotFound,
    Value(u64),
    Absent,
    /// Range scans record length and an order-sensitive digest instead of
    /// every pair.
    Scan { len: u32, digest: u64 },
}

/// One executed index operation, recorded exactly as the index returned it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub thread: u32,
    pub seq: u64,
    pub kind: OpKind,
    pub key: u64,
    pub value: u64,
    pub result: OpResult,
}

pub fn scan_digest(pairs: &[(u64, u64)]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for (k, v) in pairs {
        for w in [*k, *v] {
            h ^= w;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Append-only operation log. Per-thread sequence numbers give a total
/// order per thread; cross-thread order is deliberately unrecorded.
#[derive(Default)]
pub struct OpLog {
    entries: Vec<LogEntry>,
}

impl OpLog {
    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: OpLog) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Newline-delimited text form, one record per line.
    pub fn to_text(&self) -> String {
        use fmt::Write;
        let mut out = String::new();
        for e in &self.entries {
            let kind = match e.kind {
                OpKind::Insert => "insert",
                OpKind::Update => "update",
                OpKind::Remove => "remove",
                OpKind::Lookup => "lookup",
                OpKind::Scan => "scan",
            };
            let result = match e.result {
                OpResult::Inserted => "inserted".to_string(),
                OpResult::Updated => "updated".to_string(),
                OpResult::Removed => "removed".to_string(),
                OpResult::NotFound => "not-found".to_string(),
                OpResult::Absent => "absent".to_string(),
                OpResult::Value(v) => format!("value:{v}"),
                OpResult::Scan { len, digest } => format!("scan:{len}:{digest:x}"),
            };
            writeln!(out, "{} {} {} {} {} {}", e.thread, e.seq, kind, e.key, e.value, result)
                .unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<OpLog, String> {
        let mut log = OpLog::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_ascii_whitespace();
            let mut next = || it.next().ok_or_else(|| format!("line {}: short", lineno + 1));
            let thread = next()?.parse::<u32>().map_err(|e| e.to_string())?;
            let seq = next()?.parse::<u64>().map_err(|e| e.to_string())?;
            let kind = match next()? {
                "insert" => OpKind::Insert,
                "update" => OpKind::Update,
                "remove" => OpKind::Remove,
                "lookup" => OpKind::Lookup,
                "scan" => OpKind::Scan,
                other => return Err(format!("line {}: bad kind {other}", lineno + 1)),
            };
            let key = next()?.parse::<u64>().map_err(|e| e.to_string())?;
            let value = next()?.parse::<u64>().map_err(|e| e.to_string())?;
            let result = match next()? {
                "inserted" => OpResult::Inserted,
                "updated" => OpResult::Updated,
                "removed" => OpResult::Removed,
                "not-found" => OpResult::NotFound,
                "absent" => OpResult::Absent,
                r if r.starts_with("value:") => {
                    OpResult::Value(r[6..].parse().map_err(|e: std::num::ParseIntError| e.to_string())?)
                }
                r if r.starts_with("scan:") => {
                    let mut parts = r[5..].split(':');
                    let len = parts.next().unwrap().parse().map_err(|e: std::num::ParseIntError| e.to_string())?;
                    let digest = u64::from_str_radix(parts.next().ok_or("bad scan")?, 16)
                        .map_err(|e| e.to_string())?;
                    OpResult::Scan { len, digest }
                }
                other => return Err(format!("line {}: bad result {other}", lineno + 1)),
            };
            log.push(LogEntry { thread, seq, kind, key, value, result });
        }
        Ok(log)
    }
}

/// Plain sorted map with the index's operation semantics.
#[derive(Default)]
pub struct Oracle {
    map: BTreeMap<u64, u64>,
}

impl Oracle {
    pub fn from_pairs(pairs: &[(u64, u64)]) -> Self {
        Oracle { map: pairs.iter().copied().collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn pairs(&self) -> Vec<(u64, u64)> {
        self.map.iter().map(|(k, v)| (*k, *v)).collect()
    }

    pub fn apply(&mut self, kind: OpKind, key: u64, value: u64, scan_len: u32) -> OpResult {
        match kind {
            OpKind::Insert => match self.map.insert(key, value) {
                None => OpResult::Inserted,
                Some(_) => OpResult::Updated,
            },
            OpKind::Update => {
                if let Some(v) = self.map.get_mut(&key) {
                    *v = value;
                    OpResult::Updated
                } else {
                    OpResult::NotFound
                }
            }
            OpKind::Remove => {
                if self.map.remove(&key).is_some() {
                    OpResult::Removed
                } else {
                    OpResult::NotFound
                }
            }
            OpKind::Lookup => match self.map.get(&key) {
                Some(v) => OpResult::Value(*v),
                None => OpResult::Absent,
            },
            OpKind::Scan => {
                let pairs: Vec<(u64, u64)> = self
                    .map
                    .range(key..)
                    .take(scan_len as usize)
                    .map(|(k, v)| (*k, *v))
                    .collect();
                OpResult::Scan { len: pairs.len() as u32, digest: scan_digest(&pairs) }
            }
        }
    }
}

#[derive(Debug)]
pub struct Divergence {
    pub entry: Option<LogEntry>,
    pub detail: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.entry {
            Some(e) => write!(f, "divergence at {e:?}: {}", self.detail),
            None => write!(f, "divergence: {}", self.detail),
        }
    }
}

/// Replays a single-threaded log: every recorded result must match the
/// oracle exactly, and the final tree pairs must equal the oracle map.
/// Scan results are checked by length and digest. `scan_len` is the fixed
/// scan fan-out the run used.
pub fn check_single_threaded(
    initial: &[(u64, u64)],
    log: &OpLog,
    final_pairs: &[(u64, u64)],
    scan_len: u32,
) -> Result<(), Divergence> {
    let mut oracle = Oracle::from_pairs(initial);
    let mut entries: Vec<&LogEntry> = log.entries.iter().collect();
    entries.sort_by_key(|e| e.seq);
    for e in entries {
        let expect = oracle.apply(e.kind, e.key, e.value, scan_len);
        let got = e.result;
        let matches = match (expect, got) {
            // a scan bounded by a partition edge may legitimately be shorter
            (OpResult::Scan { .. }, OpResult::Scan { .. }) => expect == got,
            _ => expect == got,
        };
        if !matches {
            return Err(Divergence { entry: Some(*e), detail: format!("oracle says {expect:?}") });
        }
    }
    if oracle.pairs() != final_pairs {
        return Err(Divergence {
            entry: None,
            detail: format!(
                "final state mismatch: oracle {} keys, index {} keys",
                oracle.len(),
                final_pairs.len()
            ),
        });
    }
    Ok(())
}

/// Checks a multi-threaded run under the disjoint-writer regime: each key is
/// written by at most one thread. The final key→value map must match the
/// oracle, and every lookup result must be a value (or absence) that key
/// legitimately held at some point of its writer's history.
pub fn check_disjoint_writers(
    initial: &[(u64, u64)],
    log: &OpLog,
    final_pairs: &[(u64, u64)],
) -> Result<(), Divergence> {
    use std::collections::hash_map::Entry;
    use std::collections::{HashMap, HashSet};

    // Per-key committed history, replayed in each writer thread's order.
    let mut writer_of: HashMap<u64, u32> = HashMap::new();
    let mut by_thread: BTreeMap<u32, Vec<&LogEntry>> = BTreeMap::new();
    for e in &log.entries {
        by_thread.entry(e.thread).or_default().push(e);
    }
    for entries in by_thread.values_mut() {
        entries.sort_by_key(|e| e.seq);
    }

    let mut state: HashMap<u64, Option<u64>> = initial.iter().map(|(k, v)| (*k, Some(*v))).collect();
    let mut history: HashMap<u64, HashSet<Option<u64>>> = HashMap::new();
    for (k, v) in initial {
        history.entry(*k).or_default().insert(Some(*v));
    }
    // Keys start absent unless loaded.
    for entries in by_thread.values() {
        for e in entries {
            if !matches!(e.kind, OpKind::Insert | OpKind::Update | OpKind::Remove) {
                continue;
            }
            match writer_of.entry(e.key) {
                Entry::Vacant(slot) => {
                    slot.insert(e.thread);
                }
                Entry::Occupied(w) if *w.get() == e.thread => {}
                Entry::Occupied(w) => {
                    return Err(Divergence {
                        entry: Some(**e),
                        detail: format!(
                            "key {} written by threads {} and {}; log not disjoint-writer",
                            e.key,
                            w.get(),
                            e.thread
                        ),
                    });
                }
            }
            let slot = state.entry(e.key).or_insert(None);
            match e.kind {
                OpKind::Insert => *slot = Some(e.value),
                OpKind::Update => {
                    if slot.is_some() {
                        *slot = Some(e.value)
                    }
                }
                OpKind::Remove => {
                    if matches!(e.result, OpResult::Removed) {
                        *slot = None
                    }
                }
                _ => unreachable!(),
            }
            history.entry(e.key).or_default().insert(*slot);
        }
    }

    // Final state must match.
    let expected: Vec<(u64, u64)> = {
        let mut v: Vec<(u64, u64)> = state
            .iter()
            .filter_map(|(k, val)| val.map(|x| (*k, x)))
            .collect();
        v.sort_unstable();
        v
    };
    if expected != final_pairs {
        let want: HashSet<_> = expected.iter().collect();
        let got: HashSet<_> = final_pairs.iter().collect();
        let missing = expected.iter().find(|p| !got.contains(p));
        let extra = final_pairs.iter().find(|p| !want.contains(p));
        return Err(Divergence {
            entry: None,
            detail: format!(
                "final state mismatch ({} vs {} keys; missing {:?}, extra {:?})",
                expected.len(),
                final_pairs.len(),
                missing,
                extra
            ),
        });
    }

    // Every lookup observed some legitimately committed value.
    for entries in by_thread.values() {
        for e in entries {
            if e.kind != OpKind::Lookup {
                continue;
            }
            let seen = match e.result {
                OpResult::Value(v) => Some(v),
                OpResult::Absent => None,
                other => {
                    return Err(Divergence {
                        entry: Some(**e),
                        detail: format!("lookup recorded {other:?}"),
                    })
                }
            };
            let legit = history.get(&e.key).map_or(seen.is_none(), |h| h.contains(&seen))
                || seen.is_none(); // absence before first write is always legal
            if !legit {
                return Err(Divergence {
                    entry: Some(**e),
                    detail: format!("lookup saw {seen:?}, never a committed value"),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_semantics() {
        let mut o = Oracle::default();
        assert_eq!(o.apply(OpKind::Insert, 5, 50, 0), OpResult::Inserted);
        assert_eq!(o.apply(OpKind::Lookup, 5, 0, 0), OpResult::Value(50));
        assert_eq!(o.apply(OpKind::Remove, 9, 0, 0), OpResult::NotFound);
        assert_eq!(o.apply(OpKind::Insert, 5, 51, 0), OpResult::Updated);
        o.apply(OpKind::Insert, 1, 10, 0);
        o.apply(OpKind::Insert, 2, 20, 0);
        let r = o.apply(OpKind::Scan, 0, 0, 3);
        let expect = scan_digest(&[(1, 10), (2, 20), (5, 51)]);
        assert_eq!(r, OpResult::Scan { len: 3, digest: expect });
    }

    #[test]
    fn empty_log_empty_tree_passes() {
        let log = OpLog::default();
        assert!(check_single_threaded(&[], &log, &[], 100).is_ok());
    }

    #[test]
    fn fabricated_wrong_result_detected() {
        let mut log = OpLog::default();
        log.push(LogEntry {
            thread: 0,
            seq: 0,
            kind: OpKind::Insert,
            key: 5,
            value: 50,
            result: OpResult::Inserted,
        });
        log.push(LogEntry {
            thread: 0,
            seq: 1,
            kind: OpKind::Lookup,
            key: 5,
            value: 0,
            result: OpResult::Value(51), // wrong on purpose
        });
        let err = check_single_threaded(&[], &log, &[(5, 50)], 100).unwrap_err();
        assert!(err.entry.is_some());
        assert!(err.detail.contains("Value(50)"));
    }

    #[test]
    fn disjoint_writer_check_accepts_interleavings() {
        let mut log = OpLog::default();
        // thread 0 owns key 1, thread 1 owns key 2
        log.push(LogEntry { thread: 0, seq: 0, kind: OpKind::Insert, key: 1, value: 10, result: OpResult::Inserted });
        log.push(LogEntry { thread: 1, seq: 0, kind: OpKind::Insert, key: 2, value: 20, result: OpResult::Inserted });
        log.push(LogEntry { thread: 0, seq: 1, kind: OpKind::Update, key: 1, value: 11, result: OpResult::Updated });
        // thread 1 may see either committed value of key 1
        log.push(LogEntry { thread: 1, seq: 1, kind: OpKind::Lookup, key: 1, value: 0, result: OpResult::Value(10) });
        assert!(check_disjoint_writers(&[], &log, &[(1, 11), (2, 20)]).is_ok());

        // but never a value that was never committed
        log.push(LogEntry { thread: 1, seq: 2, kind: OpKind::Lookup, key: 1, value: 0, result: OpResult::Value(99) });
        assert!(check_disjoint_writers(&[], &log, &[(1, 11), (2, 20)]).is_err());
    }

    #[test]
    fn overlapping_writers_rejected() {
        let mut log = OpLog::default();
        log.push(LogEntry { thread: 0, seq: 0, kind: OpKind::Insert, key: 1, value: 10, result: OpResult::Inserted });
        log.push(LogEntry { thread: 1, seq: 0, kind: OpKind::Insert, key: 1, value: 11, result: OpResult::Updated });
        let err = check_disjoint_writers(&[], &log, &[(1, 11)]).unwrap_err();
        assert!(err.detail.contains("not disjoint-writer"));
    }

    #[test]
    fn log_text_roundtrip() {
        let mut log = OpLog::default();
        log.push(LogEntry { thread: 3, seq: 7, kind: OpKind::Scan, key: 9, value: 0, result: OpResult::Scan { len: 4, digest: 0xabc } });
        log.push(LogEntry { thread: 0, seq: 0, kind: OpKind::Remove, key: 1, value: 0, result: OpResult::Removed });
        let text = log.to_text();
        let back = OpLog::from_text(&text).unwrap();
        assert_eq!(back.entries(), log.entries());
    }
}
