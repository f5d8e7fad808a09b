//! Transactional histories and the timestamp-derived relations over them.
//!
//! A history is a set of committed transactions, each carrying a start and a
//! commit timestamp drawn from one totally ordered logical clock, plus the
//! per-session order of submission. Every checker in this crate consumes the
//! same [`History`] type and interprets it through two relations:
//!
//! * arbitration ([`ar_less`]): `a` executes before `b` iff
//!   `a.commit_ts < b.commit_ts`;
//! * visibility ([`vis`]): `a` is in `b`'s snapshot iff
//!   `a.commit_ts <= b.start_ts`.
//!
//! The canonical on-disk format is UTF-8 JSON lines, one transaction per
//! line, with `#`-prefixed comment lines:
//!
//! ```text
//! {"tid":1,"sid":0,"sno":0,"start":1,"commit":2,"ops":[["w","x",1]]}
//! ```
//!
//! A `null` operation value is only legal in reads and denotes the initial
//! sentinel: the value every key holds before any transaction writes it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Transaction identifier, unique within a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tid(pub u64);

/// Session (client) identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sid(pub u64);

/// Logical timestamp. Tick 0 is reserved for the implicit initial
/// transaction and sits strictly below every user timestamp.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    /// The reserved timestamp of the implicit initial transaction.
    pub const INITIAL: Timestamp = Timestamp(0);
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A key of the store. Non-empty, compared by exact equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Key(pub String);

impl Key {
    pub fn new(name: impl Into<String>) -> Key {
        Key(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A stored value: either a concrete integer payload or the distinguished
/// initial sentinel written by the implicit initial transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    /// The pre-history value of every key; encoded as `null` on disk.
    Initial,
    Int(i64),
}

impl Value {
    pub fn is_initial(&self) -> bool {
        matches!(self, Value::Initial)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Initial => f.write_str("null"),
            Value::Int(v) => v.fmt(f),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Initial => s.serialize_none(),
            Value::Int(v) => s.serialize_i64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match Option::<i64>::deserialize(d)? {
            None => Value::Initial,
            Some(v) => Value::Int(v),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Read,
    Write,
}

/// A single read or write inside a transaction.
///
/// Serialized as a three-element array `["r"|"w", key, value]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    pub kind: OpKind,
    pub key: Key,
    pub value: Value,
}

impl Operation {
    pub fn read(key: impl Into<String>, value: Value) -> Operation {
        Operation { kind: OpKind::Read, key: Key::new(key), value }
    }

    pub fn write(key: impl Into<String>, value: i64) -> Operation {
        Operation { kind: OpKind::Write, key: Key::new(key), value: Value::Int(value) }
    }

    pub fn is_read(&self) -> bool {
        self.kind == OpKind::Read
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            OpKind::Read => "R",
            OpKind::Write => "W",
        };
        write!(f, "{}({}, {})", tag, self.key, self.value)
    }
}

impl Serialize for Operation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let tag = match self.kind {
            OpKind::Read => "r",
            OpKind::Write => "w",
        };
        (tag, &self.key, &self.value).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Operation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (tag, key, value) = <(String, String, Value)>::deserialize(d)?;
        let kind = match tag.as_str() {
            "r" => OpKind::Read,
            "w" => OpKind::Write,
            other => return Err(D::Error::custom(format!("unknown op tag {other:?}"))),
        };
        if key.is_empty() {
            return Err(D::Error::custom("empty key"));
        }
        Ok(Operation { kind, key: Key(key), value })
    }
}

/// A committed client transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub tid: Tid,
    pub sid: Sid,
    /// In-session sequence number, contiguous from 0.
    pub sno: u64,
    pub start_ts: Timestamp,
    pub commit_ts: Timestamp,
    pub ops: Vec<Operation>,
    /// The set of keys written by `ops`, cached at construction.
    wkey: BTreeSet<Key>,
}

impl Transaction {
    pub fn new(
        tid: Tid,
        sid: Sid,
        sno: u64,
        start_ts: Timestamp,
        commit_ts: Timestamp,
        ops: Vec<Operation>,
    ) -> Transaction {
        let wkey = ops
            .iter()
            .filter(|op| op.kind == OpKind::Write)
            .map(|op| op.key.clone())
            .collect();
        Transaction { tid, sid, sno, start_ts, commit_ts, ops, wkey }
    }

    /// The implicit initial transaction that writes the initial sentinel to
    /// every key at the reserved timestamp.
    pub fn initial() -> Transaction {
        Transaction::new(Tid(0), Sid(0), 0, Timestamp::INITIAL, Timestamp::INITIAL, Vec::new())
    }

    /// Keys written by this transaction.
    pub fn wkey(&self) -> &BTreeSet<Key> {
        &self.wkey
    }

    pub fn is_read_only(&self) -> bool {
        self.wkey.is_empty()
    }

    /// Last value this transaction writes to each of its written keys.
    pub fn final_writes(&self) -> BTreeMap<Key, Value> {
        let mut out = BTreeMap::new();
        for op in &self.ops {
            if op.kind == OpKind::Write {
                out.insert(op.key.clone(), op.value);
            }
        }
        out
    }

    /// Indices of the external reads of this transaction: for each key, the
    /// first operation on it, when that operation is a read.
    pub fn external_reads(&self) -> Vec<(usize, &Operation)> {
        let mut seen: HashSet<&Key> = HashSet::new();
        let mut out = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            if seen.insert(&op.key) && op.kind == OpKind::Read {
                out.push((i, op));
            }
        }
        out
    }
}

/// Timestamp-based arbitration: `a` precedes `b` in execution order.
///
/// Strict and total over the distinct commit timestamps of a validated
/// history; irreflexive by construction.
pub fn ar_less(a: &Transaction, b: &Transaction) -> bool {
    a.commit_ts < b.commit_ts
}

/// Timestamp-based visibility: `a`'s effects are in `b`'s snapshot.
///
/// Inclusive on equality; in a validated history equal timestamps only occur
/// within a single read-only transaction, never across transactions.
pub fn vis(a: &Transaction, b: &Transaction) -> bool {
    a.commit_ts <= b.start_ts
}

/// Wire record; field order fixes the canonical serialization.
#[derive(Serialize, Deserialize)]
struct Record {
    tid: u64,
    sid: u64,
    sno: u64,
    start: u64,
    commit: u64,
    ops: Vec<Operation>,
}

impl From<&Transaction> for Record {
    fn from(t: &Transaction) -> Record {
        Record {
            tid: t.tid.0,
            sid: t.sid.0,
            sno: t.sno,
            start: t.start_ts.0,
            commit: t.commit_ts.0,
            ops: t.ops.clone(),
        }
    }
}

impl From<Record> for Transaction {
    fn from(rec: Record) -> Transaction {
        Transaction::new(
            Tid(rec.tid),
            Sid(rec.sid),
            rec.sno,
            Timestamp(rec.start),
            Timestamp(rec.commit),
            rec.ops,
        )
    }
}

impl Serialize for Transaction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Record::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transaction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Record::deserialize(d)?.into())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate tid {tid}")]
    DuplicateTid { line: usize, tid: Tid },
    #[error("line {line}: write of initial sentinel on key '{key}'")]
    WriteOfInitialSentinel { line: usize, key: Key },
    #[error("i/o error reading history")]
    Io(#[from] std::io::Error),
}

/// A set of committed transactions plus per-session submission order.
///
/// The implicit initial transaction is not stored; it is synthesized by
/// [`Transaction::initial`] and accounted for by [`History::txn_count`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    txns: Vec<Transaction>,
    by_tid: HashMap<Tid, usize>,
    sessions: BTreeMap<Sid, Vec<Tid>>,
}

impl History {
    pub fn from_txns(txns: Vec<Transaction>) -> Result<History, ParseError> {
        let mut h = History::default();
        for t in txns {
            h.push(t, 0)?;
        }
        Ok(h)
    }

    fn push(&mut self, t: Transaction, line: usize) -> Result<(), ParseError> {
        if self.by_tid.contains_key(&t.tid) {
            return Err(ParseError::DuplicateTid { line, tid: t.tid });
        }
        for op in &t.ops {
            if op.kind == OpKind::Write && op.value.is_initial() {
                return Err(ParseError::WriteOfInitialSentinel { line, key: op.key.clone() });
            }
        }
        self.by_tid.insert(t.tid, self.txns.len());
        self.sessions.entry(t.sid).or_default().push(t.tid);
        self.txns.push(t);
        Ok(())
    }

    /// User transactions in file (record) order.
    pub fn txns(&self) -> &[Transaction] {
        &self.txns
    }

    pub fn get(&self, tid: Tid) -> Option<&Transaction> {
        self.by_tid.get(&tid).map(|&i| &self.txns[i])
    }

    /// Session order: tids per session in record order.
    pub fn sessions(&self) -> &BTreeMap<Sid, Vec<Tid>> {
        &self.sessions
    }

    pub fn user_txn_count(&self) -> usize {
        self.txns.len()
    }

    /// Number of transactions including the implicit initial one.
    pub fn txn_count(&self) -> usize {
        self.txns.len() + 1
    }

    pub fn op_count(&self) -> usize {
        self.txns.iter().map(|t| t.ops.len()).sum()
    }

    /// Parse the canonical line-delimited format. Record order per session
    /// becomes session order.
    pub fn parse(reader: impl BufRead) -> Result<History, ParseError> {
        let mut h = History::default();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rec: Record = serde_json::from_str(trimmed)
                .map_err(|source| ParseError::Malformed { line: line_no, source })?;
            let t = Transaction::new(
                Tid(rec.tid),
                Sid(rec.sid),
                rec.sno,
                Timestamp(rec.start),
                Timestamp(rec.commit),
                rec.ops,
            );
            h.push(t, line_no)?;
        }
        Ok(h)
    }

    pub fn parse_str(s: &str) -> Result<History, ParseError> {
        History::parse(s.as_bytes())
    }

    /// Write the canonical format: one compact JSON object per line, fixed
    /// field order, record order preserved. Parsing then re-serializing a
    /// canonically formatted file is byte-identical.
    pub fn write_canonical(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.txns {
            let rec = Record::from(t);
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_canonical_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_canonical(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("canonical form is UTF-8")
    }

    /// Run structural validation; an empty result means the history is
    /// well-formed and may be fed to the checkers.
    pub fn validate(self) -> Result<ValidatedHistory, Vec<StructuralError>> {
        let errors = validate_history(&self);
        if errors.is_empty() {
            let mut session_pred = HashMap::new();
            for tids in self.sessions.values() {
                for pair in tids.windows(2) {
                    session_pred.insert(pair[1], pair[0]);
                }
            }
            Ok(ValidatedHistory { inner: self, session_pred })
        } else {
            Err(errors)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StructuralError {
    #[error("timestamp {ts} is used by both {a} and {b}")]
    TimestampCollision { ts: Timestamp, a: Tid, b: Tid },
    #[error("{tid}: start timestamp {start} exceeds commit timestamp {commit}")]
    StartAfterCommit { tid: Tid, start: Timestamp, commit: Timestamp },
    #[error("{tid}: start and commit timestamps are equal but the transaction writes keys")]
    EqualTimestampsWithWrites { tid: Tid },
    #[error("{tid}: timestamp 0 is reserved for the initial transaction")]
    ReservedTimestamp { tid: Tid },
    #[error("session {sid:?}: expected sno {expected} but {tid} has sno {actual}")]
    SessionSnoMismatch { sid: Sid, tid: Tid, expected: u64, actual: u64 },
}

/// All structural defects of a history: cross-transaction timestamp
/// collisions, inverted or improperly equal start/commit pairs, uses of the
/// reserved tick, and session sequence numbers that are out of order,
/// duplicated, or gapped relative to record order.
pub fn validate_history(h: &History) -> Vec<StructuralError> {
    let mut errors = Vec::new();
    let mut owner: HashMap<Timestamp, Tid> = HashMap::new();
    for t in h.txns() {
        for ts in [t.start_ts, t.commit_ts] {
            if ts == Timestamp::INITIAL {
                errors.push(StructuralError::ReservedTimestamp { tid: t.tid });
                continue;
            }
            if let Some(&prev) = owner.get(&ts) {
                if prev != t.tid {
                    errors.push(StructuralError::TimestampCollision { ts, a: prev, b: t.tid });
                }
            } else {
                owner.insert(ts, t.tid);
            }
        }
        if t.start_ts > t.commit_ts {
            errors.push(StructuralError::StartAfterCommit {
                tid: t.tid,
                start: t.start_ts,
                commit: t.commit_ts,
            });
        } else if t.start_ts == t.commit_ts && !t.is_read_only() {
            errors.push(StructuralError::EqualTimestampsWithWrites { tid: t.tid });
        }
    }
    for (&sid, tids) in h.sessions() {
        for (expected, &tid) in tids.iter().enumerate() {
            let actual = h.get(tid).expect("session index is consistent").sno;
            if actual != expected as u64 {
                errors.push(StructuralError::SessionSnoMismatch {
                    sid,
                    tid,
                    expected: expected as u64,
                    actual,
                });
            }
        }
    }
    errors
}

/// A history that passed [`validate_history`]. All checkers require this as
/// their input type, so unvalidated histories cannot reach them.
#[derive(Debug, Clone)]
pub struct ValidatedHistory {
    inner: History,
    session_pred: HashMap<Tid, Tid>,
}

impl std::ops::Deref for ValidatedHistory {
    type Target = History;

    fn deref(&self) -> &History {
        &self.inner
    }
}

impl ValidatedHistory {
    /// The session predecessor of `tid`: the transaction immediately before
    /// it in its session, if any.
    pub fn session_pred(&self, tid: Tid) -> Option<&Transaction> {
        self.session_pred.get(&tid).map(|&p| self.inner.get(p).expect("predecessor exists"))
    }

    pub fn history(&self) -> &History {
        &self.inner
    }

    pub fn into_inner(self) -> History {
        self.inner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Start events order before commit events at an equal tick, which only
    /// happens for a read-only transaction with start = commit.
    Start,
    Commit,
}

/// One start or commit event of the history's event sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub ts: Timestamp,
    pub kind: EventKind,
    pub tid: Tid,
}

/// All start/commit events sorted ascending by timestamp, start before
/// commit on the (single-transaction) ties allowed by validation.
pub fn event_sequence(h: &ValidatedHistory) -> Vec<Event> {
    let mut events = Vec::with_capacity(h.user_txn_count() * 2);
    for t in h.txns() {
        events.push(Event { ts: t.start_ts, kind: EventKind::Start, tid: t.tid });
        events.push(Event { ts: t.commit_ts, kind: EventKind::Commit, tid: t.tid });
    }
    events.sort_by_key(|e| (e.ts, e.kind, e.tid));
    events
}
