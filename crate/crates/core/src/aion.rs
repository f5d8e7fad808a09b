//! Online incremental checking of out-of-order transaction streams.
//!
//! Transactions arrive one at a time with per-session order preserved, but
//! with no global ordering guarantee. Each arrival is processed in three
//! steps:
//!
//! 1. the arriving transaction's own session/internal/external reads are
//!    checked against the timestamp-versioned frontier; an unjustified
//!    external read is only recorded as an interim verdict, because a
//!    delayed writer may still justify it;
//! 2. the per-key ongoing-writer sets are re-derived across the arrival's
//!    `[start, commit]` window, re-checking write-write conflicts for every
//!    transaction overlapping it, attributed once to the smaller-commit
//!    member of each conflicting pair;
//! 3. external-read verdicts of transactions starting after the arrival
//!    commits are re-checked against the arrival's writes, restricted to
//!    keys the arrival wrote that later committers have not yet overwritten,
//!    and stopping as soon as that working set empties.
//!
//! Interim external verdicts become final (and immutable) when the
//! transaction's timer fires; verdict oscillations are surfaced as flip-flop
//! events. Garbage collection conservatively spills versions and transaction
//! records below a timestamp to disk; re-checks reload on demand, so GC
//! never changes a verdict.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::PathBuf;

use serde::Serialize;

use crate::history::{EventKind, Key, Sid, Tid, Timestamp, Transaction, Value};
use crate::report::{Report, Violation};
use crate::vstore::{SpillError, VersionedMap};

/// Which condition set the checker enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    /// Snapshot isolation: session, internal, external, write-conflict.
    Si,
    /// Commit-order serializability: internal and external reads evaluated
    /// at commit positions; start timestamps ignored, no conflict check.
    Ser,
}

/// When the checker spills old state to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcTrigger {
    Never,
    /// Spill the oldest half once more than `resident_max` transaction
    /// records are in memory.
    Threshold { resident_max: usize },
    /// Spill down to a small remainder every time `resident_max` is hit;
    /// deliberately aggressive, trading throughput for a hard memory bound.
    HardCap { resident_max: usize },
}

#[derive(Debug, Clone)]
pub struct OnlineConfig {
    pub mode: CheckMode,
    /// Delay before an external-read verdict becomes final.
    pub timeout_ms: u64,
    pub gc: GcTrigger,
    /// Directory for spill segments; required unless `gc` is `Never`.
    pub spill_dir: Option<PathBuf>,
}

impl OnlineConfig {
    pub fn new(mode: CheckMode) -> OnlineConfig {
        OnlineConfig { mode, timeout_ms: 5_000, gc: GcTrigger::Never, spill_dir: None }
    }
}

/// Everything the checker tells the outside world, in emission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CheckerEvent {
    TsOrderError { tid: Tid },
    SessionViolation { tid: Tid },
    IntViolation { tid: Tid, key: Key, op_index: usize },
    /// Emitted at arrival when at least one external read is unjustified;
    /// subject to change until the transaction's timeout fires.
    InterimExtVerdict { tid: Tid, ok: bool, failing: Vec<(Key, usize)>, at_us: u64 },
    /// A (possibly re-derived) write-write conflict; re-emitted when a later
    /// arrival changes the peer set, latest peers win.
    NoConflictViolation { subject: Tid, key: Key, peers: BTreeSet<Tid> },
    /// An external-read verdict changed because of an out-of-order arrival.
    FlipFlop { tid: Tid, key: Key, from: bool, to: bool, at_us: u64 },
    /// Final, immutable external-read violation, at most one per (tid, key).
    FinalExtViolation { tid: Tid, key: Key, op_index: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum OnlineError {
    #[error("transaction {0} was already received")]
    DuplicateTid(Tid),
    #[error("timestamp {ts} of {b} is already owned by {a}")]
    TimestampCollision { ts: Timestamp, a: Tid, b: Tid },
    #[error("garbage collection requires a spill directory")]
    NoSpillDir,
    #[error(transparent)]
    Spill(#[from] SpillError),
    #[error("transaction record store i/o failure")]
    Store(#[from] std::io::Error),
}

/// Compact always-resident state per received transaction. The full record
/// (the operation list) may be spilled; everything re-checks need stays
/// here.
struct TxnMeta {
    commit: Timestamp,
    wkey: BTreeSet<Key>,
    /// External reads as (key, op index, observed value).
    ext_reads: Vec<(Key, usize, Value)>,
    /// Keys whose external read is currently unjustified.
    bad: BTreeSet<Key>,
    fired: bool,
}

/// Spillable store of full transaction records.
struct TxnStore {
    resident: HashMap<Tid, Transaction>,
    by_commit: BTreeSet<(Timestamp, Tid)>,
    dir: Option<PathBuf>,
    file: Option<File>,
    file_path: PathBuf,
    offsets: HashMap<Tid, (u64, u32)>,
    reloaded: HashMap<Tid, Transaction>,
}

impl TxnStore {
    fn new(dir: Option<PathBuf>) -> TxnStore {
        TxnStore {
            resident: HashMap::new(),
            by_commit: BTreeSet::new(),
            dir,
            file: None,
            file_path: PathBuf::new(),
            offsets: HashMap::new(),
            reloaded: HashMap::new(),
        }
    }

    fn contains(&self, tid: Tid) -> bool {
        self.resident.contains_key(&tid) || self.offsets.contains_key(&tid)
    }

    fn insert(&mut self, t: Transaction) {
        self.by_commit.insert((t.commit_ts, t.tid));
        self.resident.insert(t.tid, t);
    }

    fn resident_len(&self) -> usize {
        self.resident.len()
    }

    /// Move every resident record with commit timestamp at or below `bound`
    /// to the spill file. Returns how many records were written.
    fn spill_upto(&mut self, bound: Timestamp) -> Result<usize, OnlineError> {
        let victims: Vec<Tid> = self
            .by_commit
            .range(..=(bound, Tid(u64::MAX)))
            .map(|&(_, tid)| tid)
            .collect();
        if victims.is_empty() {
            return Ok(0);
        }
        let dir = self.dir.clone().ok_or(OnlineError::NoSpillDir)?;
        if self.file.is_none() {
            fs::create_dir_all(&dir)?;
            self.file_path = dir.join("txns.seg");
            self.file =
                Some(OpenOptions::new().create(true).append(true).read(true).open(&self.file_path)?);
        }
        let file = self.file.as_mut().expect("opened above");
        let mut written = 0;
        for tid in victims {
            let t = self.resident.remove(&tid).expect("victim is resident");
            self.by_commit.remove(&(t.commit_ts, tid));
            let bytes = serde_json::to_vec(&t).expect("transactions serialize");
            let offset = file.seek(SeekFrom::End(0))?;
            file.write_all(&(bytes.len() as u32).to_le_bytes())?;
            file.write_all(&bytes)?;
            self.offsets.insert(tid, (offset, bytes.len() as u32));
            written += 1;
        }
        file.sync_data().ok();
        Ok(written)
    }

    /// Fetch a record, reloading it from the spill file if it was evicted.
    #[allow(dead_code)] // re-check paths run off TxnMeta; kept for completeness
    fn get(&mut self, tid: Tid) -> Result<Option<&Transaction>, OnlineError> {
        if self.resident.contains_key(&tid) {
            return Ok(self.resident.get(&tid));
        }
        if !self.reloaded.contains_key(&tid) {
            let Some(&(offset, len)) = self.offsets.get(&tid) else {
                return Ok(None);
            };
            let file = self.file.as_mut().expect("spilled records have a file");
            file.seek(SeekFrom::Start(offset + 4))?;
            let mut buf = vec![0u8; len as usize];
            file.read_exact(&mut buf)?;
            let t: Transaction = serde_json::from_slice(&buf).map_err(|_| {
                OnlineError::Spill(SpillError::Corrupt { path: self.file_path.clone() })
            })?;
            self.reloaded.insert(tid, t);
        }
        Ok(self.reloaded.get(&tid))
    }
}

pub struct OnlineChecker {
    config: OnlineConfig,
    /// Sorted event index over all received transactions; commit events only
    /// in serializability mode.
    events: BTreeSet<(Timestamp, EventKind, Tid)>,
    tick_owner: HashMap<Timestamp, Tid>,
    metas: HashMap<Tid, TxnMeta>,
    store: TxnStore,
    frontier_ts: VersionedMap<Value>,
    ongoing_ts: VersionedMap<BTreeSet<Tid>>,
    sessions: HashMap<Sid, (Option<u64>, Timestamp)>,
    timers: BinaryHeap<Reverse<(u64, Tid)>>,
    // Violation accumulators; the final report is assembled from these.
    ts_order: BTreeSet<Tid>,
    session_bad: BTreeSet<Tid>,
    int_bad: BTreeSet<(Tid, Key, usize)>,
    no_conflict: BTreeMap<(Tid, Key), BTreeSet<Tid>>,
    ext_final: BTreeMap<(Tid, Key), usize>,
    received: u64,
}

impl OnlineChecker {
    pub fn new(config: OnlineConfig) -> OnlineChecker {
        let (frontier_ts, ongoing_ts, store) = match &config.spill_dir {
            Some(dir) => (
                VersionedMap::spillable(dir.join("frontier")),
                VersionedMap::spillable(dir.join("ongoing")),
                TxnStore::new(Some(dir.join("txns"))),
            ),
            None => (VersionedMap::in_memory(), VersionedMap::in_memory(), TxnStore::new(None)),
        };
        OnlineChecker {
            config,
            events: BTreeSet::new(),
            tick_owner: HashMap::new(),
            metas: HashMap::new(),
            store,
            frontier_ts,
            ongoing_ts,
            sessions: HashMap::new(),
            timers: BinaryHeap::new(),
            ts_order: BTreeSet::new(),
            session_bad: BTreeSet::new(),
            int_bad: BTreeSet::new(),
            no_conflict: BTreeMap::new(),
            ext_final: BTreeMap::new(),
            received: 0,
        }
    }

    pub fn mode(&self) -> CheckMode {
        self.config.mode
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn resident_txns(&self) -> usize {
        self.store.resident_len()
    }

    /// Deadline of the next pending timer, if any.
    pub fn next_deadline(&self) -> Option<u64> {
        self.timers.peek().map(|Reverse((d, _))| *d)
    }

    /// Process one arriving transaction at (monotonic) time `now_us`.
    pub fn on_transaction(
        &mut self,
        t: Transaction,
        now_us: u64,
    ) -> Result<Vec<CheckerEvent>, OnlineError> {
        if self.metas.contains_key(&t.tid) || self.store.contains(t.tid) {
            return Err(OnlineError::DuplicateTid(t.tid));
        }
        for ts in [t.start_ts, t.commit_ts] {
            if let Some(&owner) = self.tick_owner.get(&ts) {
                if owner != t.tid {
                    return Err(OnlineError::TimestampCollision { ts, a: owner, b: t.tid });
                }
            }
        }
        self.tick_owner.insert(t.start_ts, t.tid);
        self.tick_owner.insert(t.commit_ts, t.tid);

        let mut events_out = Vec::new();
        if t.start_ts > t.commit_ts {
            self.ts_order.insert(t.tid);
            events_out.push(CheckerEvent::TsOrderError { tid: t.tid });
        }

        if self.config.mode == CheckMode::Si {
            // Arrival preserves session order, so the last transaction seen
            // on this session is the session predecessor.
            let (last_sno, last_cts) =
                self.sessions.entry(t.sid).or_insert((None, Timestamp::INITIAL));
            let expected = last_sno.map_or(0, |s| s + 1);
            if t.sno != expected || t.start_ts < *last_cts {
                self.session_bad.insert(t.tid);
                events_out.push(CheckerEvent::SessionViolation { tid: t.tid });
            }
            *last_sno = Some(t.sno);
            *last_cts = t.commit_ts;
        }

        // Step 1: internal reads are stable; external reads are evaluated
        // against the versioned frontier and recorded as an interim verdict.
        let read_at = match self.config.mode {
            CheckMode::Si => t.start_ts,
            CheckMode::Ser => t.commit_ts,
        };
        let mut seen: HashMap<&Key, Value> = HashMap::new();
        let mut ext_reads = Vec::new();
        let mut bad = BTreeSet::new();
        for (i, op) in t.ops.iter().enumerate() {
            if op.is_read() {
                match seen.get(&op.key) {
                    None => {
                        let expect = self.frontier_ts.floor_lookup(&op.key, read_at)?;
                        if op.value != expect {
                            bad.insert(op.key.clone());
                        }
                        ext_reads.push((op.key.clone(), i, op.value));
                    }
                    Some(&prev) => {
                        if prev != op.value {
                            self.int_bad.insert((t.tid, op.key.clone(), i));
                            events_out.push(CheckerEvent::IntViolation {
                                tid: t.tid,
                                key: op.key.clone(),
                                op_index: i,
                            });
                        }
                    }
                }
            }
            seen.insert(&op.key, op.value);
        }
        drop(seen);
        if !bad.is_empty() {
            events_out.push(CheckerEvent::InterimExtVerdict {
                tid: t.tid,
                ok: false,
                failing: bad
                    .iter()
                    .map(|k| {
                        let (_, i, _) =
                            ext_reads.iter().find(|(ek, _, _)| ek == k).expect("bad key was read");
                        (k.clone(), *i)
                    })
                    .collect(),
                at_us: now_us,
            });
        }
        let finals = t.final_writes();
        for (k, v) in &finals {
            self.frontier_ts.insert_version(k, t.commit_ts, *v);
        }
        self.timers.push(Reverse((now_us + self.config.timeout_ms * 1_000, t.tid)));

        let meta = TxnMeta {
            commit: t.commit_ts,
            wkey: t.wkey().clone(),
            ext_reads,
            bad,
            fired: false,
        };
        match self.config.mode {
            CheckMode::Si => {
                self.events.insert((t.start_ts, EventKind::Start, t.tid));
                self.events.insert((t.commit_ts, EventKind::Commit, t.tid));
            }
            CheckMode::Ser => {
                self.events.insert((t.commit_ts, EventKind::Commit, t.tid));
            }
        }
        self.metas.insert(t.tid, meta);

        if self.config.mode == CheckMode::Si {
            self.recheck_conflicts(&t, &mut events_out)?;
        }
        self.recheck_ext(&t, &finals, now_us, &mut events_out)?;

        self.store.insert(t);
        self.received += 1;
        self.maybe_gc()?;
        Ok(events_out)
    }

    /// Step 2: re-derive the ongoing-writer sets at every event inside
    /// `[t.start, t.commit]` and re-check conflicts at the commit events in
    /// that window. Re-derivation replaces versions idempotently, so
    /// sweeping the same window again is harmless.
    fn recheck_conflicts(
        &mut self,
        t: &Transaction,
        out: &mut Vec<CheckerEvent>,
    ) -> Result<(), OnlineError> {
        if t.wkey().is_empty() {
            // A read-only arrival changes no membership, and every event in
            // its window was already derived by its own arrival.
            return Ok(());
        }
        let lo = (t.start_ts, EventKind::Start, Tid(0));
        let hi = (t.commit_ts, EventKind::Commit, Tid(u64::MAX));
        let window: Vec<(Timestamp, EventKind, Tid)> =
            self.events.range(lo..=hi).copied().collect();
        for (ts, kind, etid) in window {
            let wkey = self.metas[&etid].wkey.clone();
            for k in &wkey {
                let mut set = self.ongoing_ts.floor_lookup(k, ts)?;
                match kind {
                    EventKind::Start => {
                        set.insert(etid);
                    }
                    EventKind::Commit => {
                        set.remove(&etid);
                        if !set.is_empty() {
                            let prev = self.no_conflict.insert((etid, k.clone()), set.clone());
                            if prev.as_ref() != Some(&set) {
                                out.push(CheckerEvent::NoConflictViolation {
                                    subject: etid,
                                    key: k.clone(),
                                    peers: set.clone(),
                                });
                            }
                        }
                    }
                }
                self.ongoing_ts.insert_version(k, ts, set);
            }
        }
        Ok(())
    }

    /// Step 3: walk events after `t.commit`, re-checking external reads of
    /// later transactions on the keys `t` wrote, dropping keys as later
    /// committers overwrite them, and stopping once none survive.
    ///
    /// In serializability mode the index holds commit events only, so the
    /// sweep re-checks later committers instead of later starters.
    fn recheck_ext(
        &mut self,
        t: &Transaction,
        finals: &BTreeMap<Key, Value>,
        now_us: u64,
        out: &mut Vec<CheckerEvent>,
    ) -> Result<(), OnlineError> {
        if finals.is_empty() {
            return Ok(());
        }
        let mut keys: BTreeSet<Key> = finals.keys().cloned().collect();
        let lo = (Timestamp(t.commit_ts.0 + 1), EventKind::Start, Tid(0));
        let window: Vec<(Timestamp, EventKind, Tid)> =
            self.events.range(lo..).copied().collect();
        for (_, kind, etid) in window {
            if etid == t.tid {
                continue;
            }
            let recheck_here = match (self.config.mode, kind) {
                (CheckMode::Si, EventKind::Start) => true,
                (CheckMode::Si, EventKind::Commit) => false,
                (CheckMode::Ser, _) => true,
            };
            if recheck_here {
                let m = self.metas.get_mut(&etid).expect("indexed txn has meta");
                if !m.fired {
                    let mut flips = Vec::new();
                    for (k, _, v) in &m.ext_reads {
                        if !keys.contains(k) {
                            continue;
                        }
                        let ok_now = *v == finals[k];
                        let was_ok = !m.bad.contains(k);
                        if ok_now != was_ok {
                            flips.push((k.clone(), was_ok, ok_now));
                        }
                    }
                    for (k, was_ok, ok_now) in flips {
                        if ok_now {
                            m.bad.remove(&k);
                        } else {
                            m.bad.insert(k.clone());
                        }
                        out.push(CheckerEvent::FlipFlop {
                            tid: etid,
                            key: k,
                            from: was_ok,
                            to: ok_now,
                            at_us: now_us,
                        });
                    }
                }
            }
            if kind == EventKind::Commit {
                let m = &self.metas[&etid];
                for k in &m.wkey {
                    keys.remove(k);
                }
                if keys.is_empty() {
                    break;
                }
                // With per-key version chains the surviving keys' frontier
                // versions are already correct; no patching needed here.
            }
        }
        Ok(())
    }

    /// Finalize the external-read verdict of `tid`. Unknown transactions are
    /// ignored with a warning; already-final verdicts are immutable.
    pub fn on_timeout(&mut self, tid: Tid, _now_us: u64) -> Vec<CheckerEvent> {
        let Some(m) = self.metas.get_mut(&tid) else {
            log::warn!("timeout for unknown transaction {tid}");
            return Vec::new();
        };
        if m.fired {
            return Vec::new();
        }
        m.fired = true;
        let mut out = Vec::new();
        for k in m.bad.clone() {
            let (_, i, _) = m
                .ext_reads
                .iter()
                .find(|(ek, _, _)| *ek == k)
                .expect("bad keys come from external reads");
            let op_index = *i;
            self.ext_final.insert((tid, k.clone()), op_index);
            out.push(CheckerEvent::FinalExtViolation { tid, key: k, op_index });
        }
        out
    }

    /// Fire every timer with a deadline at or before `now_us`.
    pub fn fire_due(&mut self, now_us: u64) -> Vec<CheckerEvent> {
        let mut out = Vec::new();
        while let Some(&Reverse((deadline, tid))) = self.timers.peek() {
            if deadline > now_us {
                break;
            }
            self.timers.pop();
            out.extend(self.on_timeout(tid, now_us));
        }
        out
    }

    /// Fire all remaining timers immediately: the quiescent end-of-stream
    /// finalization.
    pub fn finalize_all(&mut self, now_us: u64) -> Vec<CheckerEvent> {
        let mut out = Vec::new();
        while let Some(Reverse((_, tid))) = self.timers.pop() {
            out.extend(self.on_timeout(tid, now_us));
        }
        out
    }

    /// Spill versioned state and transaction records with timestamps at or
    /// below `threshold` to disk. Subsequent checks reload on demand and
    /// behave as if nothing was evicted.
    pub fn online_gc(&mut self, threshold: Timestamp) -> Result<(), OnlineError> {
        self.frontier_ts.spill_below(threshold)?;
        if self.config.mode == CheckMode::Si {
            self.ongoing_ts.spill_below(threshold)?;
        }
        let n = self.store.spill_upto(threshold)?;
        log::debug!("gc below {}: spilled {} transaction records", threshold.0, n);
        Ok(())
    }

    fn maybe_gc(&mut self) -> Result<(), OnlineError> {
        let (cap, keep) = match self.config.gc {
            GcTrigger::Never => return Ok(()),
            GcTrigger::Threshold { resident_max } => (resident_max, resident_max / 2),
            GcTrigger::HardCap { resident_max } => (resident_max, 64.min(resident_max / 2)),
        };
        let resident = self.store.resident_len();
        if resident <= cap.max(1) {
            return Ok(());
        }
        let evict = resident - keep.max(1);
        let threshold = match self.store.by_commit.iter().nth(evict - 1) {
            Some(&(ts, _)) => ts,
            None => return Ok(()),
        };
        self.online_gc(threshold)
    }

    /// The canonical violation report over everything received so far,
    /// external-read verdicts included only once final.
    pub fn final_report(&self) -> Report {
        let commit_of = |tid: Tid| self.metas[&tid].commit;
        let mut out = Vec::new();
        for &tid in &self.ts_order {
            out.push(Violation::ts_order(tid, commit_of(tid)));
        }
        for &tid in &self.session_bad {
            out.push(Violation::session(tid, commit_of(tid)));
        }
        for (tid, key, i) in &self.int_bad {
            out.push(Violation::int(*tid, commit_of(*tid), key.clone(), *i));
        }
        for ((tid, key), peers) in &self.no_conflict {
            out.push(Violation::no_conflict(*tid, commit_of(*tid), key.clone(), peers.clone()));
        }
        for ((tid, key), i) in &self.ext_final {
            out.push(Violation::ext(*tid, commit_of(*tid), key.clone(), *i));
        }
        Report::from_unsorted(out)
    }

    /// Interim external verdict of a transaction: `true` means currently
    /// justified. `None` for unknown transactions.
    pub fn ext_flag(&self, tid: Tid) -> Option<bool> {
        self.metas.get(&tid).map(|m| m.bad.is_empty())
    }
}
