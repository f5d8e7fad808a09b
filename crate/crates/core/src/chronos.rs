//! Offline checking by a single ascending sweep over start/commit events.
//!
//! The sweep maintains, per key, the last committed value (`frontier`) and
//! the set of started-but-uncommitted writers (`ongoing`), plus small
//! per-transaction read/write tracking maps. Every violation is reported and
//! the sweep continues as if it had not occurred, so one run surfaces all
//! defects of a history. Periodic garbage collection drops per-transaction
//! state that can no longer influence any later event; it never changes the
//! report, only the memory profile.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::history::{
    event_sequence, EventKind, Key, OpKind, Tid, Timestamp, Transaction, ValidatedHistory, Value,
};
use crate::report::{Report, Violation};

/// When to drop state for already-committed transactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcPolicy {
    /// Retain everything until the sweep finishes.
    Never,
    /// After every `n` processed commits, drop the records and write maps of
    /// all committed transactions. `n` must be at least 1.
    EveryNTxns(usize),
}

/// Memory-profile counters for a sweep; reports are identical across
/// [`GcPolicy`] values, these are not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    /// Maximum number of transaction records held at once. Dominated by the
    /// initial load, so it barely distinguishes GC policies.
    pub peak_resident_txns: usize,
    /// Maximum number of live per-transaction key/value tracking entries.
    pub peak_state_entries: usize,
    /// Maximum of records plus tracking entries over the sweep: the gauge
    /// garbage collection actually lowers.
    pub peak_live_units: usize,
}

/// Offline snapshot-isolation check, all violations reported.
pub fn check_si(h: &ValidatedHistory, gc: GcPolicy) -> Report {
    check_si_with_stats(h, gc).0
}

pub fn check_si_with_stats(h: &ValidatedHistory, gc: GcPolicy) -> (Report, SweepStats) {
    let mut out = Vec::new();
    let mut stats = SweepStats::default();
    let gc_every = gc_period(gc);

    // Commit timestamp of each transaction's session predecessor; retained
    // for the whole sweep so predecessor records can be dropped.
    let pred_commit: HashMap<Tid, Timestamp> =
        h.txns().iter().filter_map(|t| h.session_pred(t.tid).map(|p| (t.tid, p.commit_ts))).collect();

    let events = event_sequence(h);
    let mut txns: HashMap<Tid, Transaction> =
        h.txns().iter().map(|t| (t.tid, t.clone())).collect();

    let mut frontier: HashMap<Key, Value> = HashMap::new();
    let mut ongoing: HashMap<Key, BTreeSet<Tid>> = HashMap::new();
    let mut int_val: HashMap<Tid, HashMap<Key, Value>> = HashMap::new();
    let mut ext_val: HashMap<Tid, BTreeMap<Key, Value>> = HashMap::new();
    let mut state_entries = 0usize;
    let mut awaiting_gc: Vec<Tid> = Vec::new();
    let mut commits_since_gc = 0usize;

    stats.peak_resident_txns = txns.len();

    for ev in &events {
        match ev.kind {
            EventKind::Start => {
                let t = &txns[&ev.tid];
                if let Some(&pc) = pred_commit.get(&t.tid) {
                    if t.start_ts < pc {
                        out.push(Violation::session(t.tid, t.commit_ts));
                    }
                }
                let ints = int_val.entry(t.tid).or_default();
                let exts = ext_val.entry(t.tid).or_default();
                for (i, op) in t.ops.iter().enumerate() {
                    match op.kind {
                        OpKind::Read => match ints.get(&op.key) {
                            None => {
                                // External read: must observe the last
                                // committed value of the key.
                                let expect =
                                    frontier.get(&op.key).copied().unwrap_or(Value::Initial);
                                if op.value != expect {
                                    out.push(Violation::ext(
                                        t.tid,
                                        t.commit_ts,
                                        op.key.clone(),
                                        i,
                                    ));
                                }
                            }
                            Some(&prev) => {
                                if prev != op.value {
                                    out.push(Violation::int(
                                        t.tid,
                                        t.commit_ts,
                                        op.key.clone(),
                                        i,
                                    ));
                                }
                            }
                        },
                        OpKind::Write => {
                            if exts.insert(op.key.clone(), op.value).is_none() {
                                state_entries += 1;
                            }
                            ongoing.entry(op.key.clone()).or_default().insert(t.tid);
                        }
                    }
                    if ints.insert(op.key.clone(), op.value).is_none() {
                        state_entries += 1;
                    }
                }
                stats.peak_state_entries = stats.peak_state_entries.max(state_entries);
            }
            EventKind::Commit => {
                let t = &txns[&ev.tid];
                if t.start_ts > t.commit_ts {
                    out.push(Violation::ts_order(t.tid, t.commit_ts));
                }
                let exts = ext_val.get(&t.tid);
                for k in t.wkey() {
                    let set = ongoing.entry(k.clone()).or_default();
                    set.remove(&t.tid);
                    if !set.is_empty() {
                        out.push(Violation::no_conflict(
                            t.tid,
                            t.commit_ts,
                            k.clone(),
                            set.clone(),
                        ));
                    }
                    let v = exts.and_then(|m| m.get(k)).copied().expect("writer tracked its keys");
                    frontier.insert(k.clone(), v);
                }
                // Per-transaction read tracking is dead the moment the
                // transaction commits.
                if let Some(m) = int_val.remove(&t.tid) {
                    state_entries -= m.len();
                }
                awaiting_gc.push(t.tid);
                commits_since_gc += 1;
                if let Some(n) = gc_every {
                    if commits_since_gc >= n {
                        for tid in awaiting_gc.drain(..) {
                            if let Some(m) = ext_val.remove(&tid) {
                                state_entries -= m.len();
                            }
                            txns.remove(&tid);
                        }
                        commits_since_gc = 0;
                    }
                }
            }
        }
        stats.peak_resident_txns = stats.peak_resident_txns.max(txns.len());
        stats.peak_state_entries = stats.peak_state_entries.max(state_entries);
        stats.peak_live_units = stats.peak_live_units.max(txns.len() + state_entries);
    }

    (Report::from_unsorted(out), stats)
}

/// Offline commit-order serializability check: one sweep over commit events
/// only, reads evaluated against the frontier at the owner's commit
/// position. Start timestamps and write-write overlap play no role.
pub fn check_ser(h: &ValidatedHistory, gc: GcPolicy) -> Report {
    check_ser_with_stats(h, gc).0
}

pub fn check_ser_with_stats(h: &ValidatedHistory, gc: GcPolicy) -> (Report, SweepStats) {
    let mut out = Vec::new();
    let mut stats = SweepStats::default();
    let gc_every = gc_period(gc);

    let mut order: Vec<Tid> = h.txns().iter().map(|t| t.tid).collect();
    order.sort_by_key(|&tid| h.get(tid).expect("tid indexed").commit_ts);
    let mut txns: HashMap<Tid, Transaction> =
        h.txns().iter().map(|t| (t.tid, t.clone())).collect();
    stats.peak_resident_txns = txns.len();

    let mut frontier: HashMap<Key, Value> = HashMap::new();
    let mut last: HashMap<Key, Value> = HashMap::new();
    let mut awaiting_gc: Vec<Tid> = Vec::new();
    let mut commits_since_gc = 0usize;

    for tid in order {
        let t = &txns[&tid];
        last.clear();
        for (i, op) in t.ops.iter().enumerate() {
            match op.kind {
                OpKind::Read => match last.get(&op.key) {
                    None => {
                        let expect = frontier.get(&op.key).copied().unwrap_or(Value::Initial);
                        if op.value != expect {
                            out.push(Violation::ext(t.tid, t.commit_ts, op.key.clone(), i));
                        }
                    }
                    Some(&prev) => {
                        if prev != op.value {
                            out.push(Violation::int(t.tid, t.commit_ts, op.key.clone(), i));
                        }
                    }
                },
                OpKind::Write => {}
            }
            last.insert(op.key.clone(), op.value);
        }
        stats.peak_state_entries = stats.peak_state_entries.max(last.len());
        for (k, v) in t.final_writes() {
            frontier.insert(k, v);
        }
        awaiting_gc.push(tid);
        commits_since_gc += 1;
        if let Some(n) = gc_every {
            if commits_since_gc >= n {
                for tid in awaiting_gc.drain(..) {
                    txns.remove(&tid);
                }
                commits_since_gc = 0;
            }
        }
        stats.peak_resident_txns = stats.peak_resident_txns.max(txns.len());
    }

    (Report::from_unsorted(out), stats)
}

fn gc_period(gc: GcPolicy) -> Option<usize> {
    match gc {
        GcPolicy::Never => None,
        GcPolicy::EveryNTxns(n) => Some(n.max(1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{History, Operation, Sid};
    use crate::oracle;
    use crate::report::ViolationKind;

    fn txn(tid: u64, start: u64, commit: u64, ops: Vec<Operation>) -> Transaction {
        Transaction::new(Tid(tid), Sid(tid), 0, Timestamp(start), Timestamp(commit), ops)
    }

    fn validated(txns: Vec<Transaction>) -> ValidatedHistory {
        History::from_txns(txns).unwrap().validate().unwrap()
    }

    #[test]
    fn overlapping_writers_conflict_once_on_smaller_commit() {
        let h = validated(vec![
            txn(1, 1, 3, vec![Operation::write("x", 1)]),
            txn(2, 2, 4, vec![Operation::write("x", 2)]),
        ]);
        let r = check_si(&h, GcPolicy::Never);
        assert_eq!(r, oracle::check_si(&h));
        assert_eq!(r.len(), 1);
        let v = &r.violations()[0];
        assert_eq!(v.kind, ViolationKind::NoConflict);
        assert_eq!(v.subject, Tid(1));
        assert_eq!(v.peers, BTreeSet::from([Tid(2)]));
    }

    #[test]
    fn internal_read_mismatch_is_flagged_at_its_op_index() {
        let h = validated(vec![txn(
            1,
            1,
            2,
            vec![
                Operation::write("x", 5),
                Operation::read("x", Value::Int(5)),
                Operation::read("x", Value::Int(6)),
            ],
        )]);
        let r = check_si(&h, GcPolicy::Never);
        assert_eq!(r.len(), 1);
        let v = &r.violations()[0];
        assert_eq!(v.kind, ViolationKind::Int);
        assert_eq!(v.op_index, Some(2));
    }

    #[test]
    fn frontier_carries_only_the_last_write_per_key() {
        let h = validated(vec![
            txn(1, 1, 2, vec![Operation::write("x", 1), Operation::write("x", 2)]),
            txn(2, 3, 4, vec![Operation::read("x", Value::Int(2))]),
        ]);
        assert!(check_si(&h, GcPolicy::Never).is_clean());

        let h = validated(vec![
            txn(1, 1, 2, vec![Operation::write("x", 1), Operation::write("x", 2)]),
            txn(2, 3, 4, vec![Operation::read("x", Value::Int(1))]),
        ]);
        assert_eq!(check_si(&h, GcPolicy::Never).count_of(ViolationKind::Ext), 1);
    }

    #[test]
    fn read_of_never_written_key_must_see_the_initial_sentinel() {
        let h = validated(vec![txn(1, 1, 2, vec![Operation::read("nope", Value::Int(3))])]);
        assert_eq!(check_si(&h, GcPolicy::Never).count_of(ViolationKind::Ext), 1);
        let h = validated(vec![txn(1, 1, 2, vec![Operation::read("nope", Value::Initial)])]);
        assert!(check_si(&h, GcPolicy::Never).is_clean());
    }

    #[test]
    fn ser_sweep_is_clean_on_read_your_committed_writes_chain() {
        let h = validated(vec![
            txn(1, 1, 2, vec![Operation::write("a", 1)]),
            txn(2, 3, 4, vec![Operation::read("a", Value::Int(1)), Operation::write("a", 2)]),
            txn(3, 5, 6, vec![Operation::read("a", Value::Int(2))]),
        ]);
        assert!(check_ser(&h, GcPolicy::Never).is_clean());
    }

    #[test]
    fn gc_policy_never_changes_reports() {
        // A small deliberately dirty history: conflicting writers plus a
        // stale read.
        let h = validated(vec![
            txn(1, 1, 5, vec![Operation::write("x", 1), Operation::write("y", 10)]),
            txn(2, 2, 6, vec![Operation::write("x", 2)]),
            txn(3, 7, 8, vec![Operation::read("x", Value::Int(1))]),
            txn(4, 9, 10, vec![Operation::read("y", Value::Int(10))]),
        ]);
        let baseline = check_si(&h, GcPolicy::Never);
        for n in [1, 2, 3, 64] {
            assert_eq!(check_si(&h, GcPolicy::EveryNTxns(n)), baseline, "gc every {n}");
            assert_eq!(
                check_ser(&h, GcPolicy::EveryNTxns(n)),
                check_ser(&h, GcPolicy::Never),
                "ser gc every {n}"
            );
        }
    }

    #[test]
    fn gc_reduces_peak_resident_txns() {
        let txns: Vec<Transaction> = (0..200)
            .map(|i| {
                txn(
                    i + 1,
                    2 * i + 1,
                    2 * i + 2,
                    vec![Operation::write(format!("k{}", i % 5), i as i64)],
                )
            })
            .collect();
        let h = validated(txns);
        let (_, never) = check_si_with_stats(&h, GcPolicy::Never);
        let (_, frequent) = check_si_with_stats(&h, GcPolicy::EveryNTxns(10));
        assert!(frequent.peak_live_units < never.peak_live_units);
        assert!(frequent.peak_state_entries < never.peak_state_entries);
    }
}
