//! Violation reports shared by every checker.
//!
//! All engines (the brute-force oracle, the offline sweep, and the online
//! checker) produce the same [`Report`] type in the same canonical order, so
//! equivalence tests and downstream tooling can compare them directly.

use std::collections::BTreeSet;
use std::fmt;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::history::{Key, Tid, Timestamp};

/// Which checked condition a violation breaks.
///
/// The variant order is the canonical tie-break order inside a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A transaction starts before its session predecessor commits.
    Session,
    /// An internal read disagrees with the transaction's own last access.
    Int,
    /// An external read disagrees with the committed snapshot it must observe.
    Ext,
    /// Two concurrent transactions write the same key.
    NoConflict,
    /// A start timestamp exceeds its commit timestamp.
    TsOrder,
}

impl ViolationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationKind::Session => "session",
            ViolationKind::Int => "int",
            ViolationKind::Ext => "ext",
            ViolationKind::NoConflict => "no_conflict",
            ViolationKind::TsOrder => "ts_order",
        }
    }
}

/// A single typed violation.
///
/// `Ext` and `Int` carry the offending key and operation index; `NoConflict`
/// carries the key and the non-empty set of conflicting peers, attributed to
/// the pair member with the smaller commit timestamp; `Session` and
/// `TsOrder` carry neither.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subject: Tid,
    /// Commit timestamp of the subject; first canonical sort key.
    pub subject_commit: Timestamp,
    pub key: Option<Key>,
    pub op_index: Option<usize>,
    pub peers: BTreeSet<Tid>,
}

impl Violation {
    pub fn session(subject: Tid, subject_commit: Timestamp) -> Violation {
        Violation {
            kind: ViolationKind::Session,
            subject,
            subject_commit,
            key: None,
            op_index: None,
            peers: BTreeSet::new(),
        }
    }

    pub fn ts_order(subject: Tid, subject_commit: Timestamp) -> Violation {
        Violation {
            kind: ViolationKind::TsOrder,
            subject,
            subject_commit,
            key: None,
            op_index: None,
            peers: BTreeSet::new(),
        }
    }

    pub fn int(subject: Tid, subject_commit: Timestamp, key: Key, op_index: usize) -> Violation {
        Violation {
            kind: ViolationKind::Int,
            subject,
            subject_commit,
            key: Some(key),
            op_index: Some(op_index),
            peers: BTreeSet::new(),
        }
    }

    pub fn ext(subject: Tid, subject_commit: Timestamp, key: Key, op_index: usize) -> Violation {
        Violation {
            kind: ViolationKind::Ext,
            subject,
            subject_commit,
            key: Some(key),
            op_index: Some(op_index),
            peers: BTreeSet::new(),
        }
    }

    pub fn no_conflict(
        subject: Tid,
        subject_commit: Timestamp,
        key: Key,
        peers: BTreeSet<Tid>,
    ) -> Violation {
        debug_assert!(!peers.is_empty(), "NoConflict requires at least one peer");
        Violation {
            kind: ViolationKind::NoConflict,
            subject,
            subject_commit,
            key: Some(key),
            op_index: None,
            peers,
        }
    }

    /// Human-readable description derived from the semantic fields, so every
    /// engine renders an identical string for the same violation.
    pub fn detail(&self) -> String {
        match self.kind {
            ViolationKind::Session => {
                format!("{} starts before its session predecessor commits", self.subject)
            }
            ViolationKind::Int => format!(
                "{}: internal read of '{}' at op {} disagrees with the transaction's last access",
                self.subject,
                self.key.as_ref().expect("Int carries a key"),
                self.op_index.expect("Int carries an op index"),
            ),
            ViolationKind::Ext => format!(
                "{}: external read of '{}' at op {} does not match the visible snapshot",
                self.subject,
                self.key.as_ref().expect("Ext carries a key"),
                self.op_index.expect("Ext carries an op index"),
            ),
            ViolationKind::NoConflict => {
                let peers: Vec<String> = self.peers.iter().map(|p| p.to_string()).collect();
                format!(
                    "{} writes '{}' concurrently with [{}]",
                    self.subject,
                    self.key.as_ref().expect("NoConflict carries a key"),
                    peers.join(", "),
                )
            }
            ViolationKind::TsOrder => {
                format!("{}: start timestamp exceeds commit timestamp", self.subject)
            }
        }
    }

    fn sort_key(&self) -> (Timestamp, ViolationKind, Option<&Key>, Option<usize>, &BTreeSet<Tid>, Tid) {
        (self.subject_commit, self.kind, self.key.as_ref(), self.op_index, &self.peers, self.subject)
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.kind.as_str(), self.detail())
    }
}

impl Serialize for Violation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Violation", 7)?;
        st.serialize_field("kind", &self.kind)?;
        st.serialize_field("subject", &self.subject)?;
        st.serialize_field("subject_commit", &self.subject_commit)?;
        st.serialize_field("key", &self.key)?;
        st.serialize_field("op_index", &self.op_index)?;
        st.serialize_field("peers", &self.peers)?;
        st.serialize_field("detail", &self.detail())?;
        st.end()
    }
}

/// A canonically ordered multiset of violations.
///
/// Ordering is by subject commit timestamp, then kind, then key, then the
/// remaining fields, which makes reports from different engines directly
/// comparable and their serializations byte-identical.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct Report {
    violations: Vec<Violation>,
}

impl Report {
    pub fn from_unsorted(mut violations: Vec<Violation>) -> Report {
        violations.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Report { violations }
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count_of(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn of_kind(&self, kind: ViolationKind) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(move |v| v.kind == kind)
    }

    /// Counts per kind plus total, in report-summary shape.
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            session: self.count_of(ViolationKind::Session),
            int: self.count_of(ViolationKind::Int),
            ext: self.count_of(ViolationKind::Ext),
            no_conflict: self.count_of(ViolationKind::NoConflict),
            ts_order: self.count_of(ViolationKind::TsOrder),
            total: self.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReportSummary {
    pub session: usize,
    pub int: usize,
    pub ext: usize,
    pub no_conflict: usize,
    pub ts_order: usize,
    pub total: usize,
}
