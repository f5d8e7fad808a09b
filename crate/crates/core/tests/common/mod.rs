//! Shared fixtures and generators for the integration suites.

use isoguard_core::history::{History, ValidatedHistory};
use isoguard_core::workload::{self, FaultKind, FaultSpec, KeyDist, WorkloadParams};

/// The five-transaction history used throughout the checker examples:
/// T2 overwrites x; T3 reads that x and writes y concurrently with T5's
/// write of y; T4 starts after T5 commits and reads T5's y.
///
/// Expected verdict: exactly one write-write conflict, attributed to T5
/// (the smaller-commit member) with peer T3 on key y, and no external-read
/// violations.
pub const FIG2: &str = r#"
{"tid":1,"sid":1,"sno":0,"start":1,"commit":2,"ops":[["w","x",1]]}
{"tid":2,"sid":2,"sno":0,"start":3,"commit":5,"ops":[["w","x",2]]}
{"tid":3,"sid":3,"sno":0,"start":6,"commit":9,"ops":[["r","x",2],["w","y",3]]}
{"tid":4,"sid":4,"sno":0,"start":8,"commit":10,"ops":[["r","y",1]]}
{"tid":5,"sid":5,"sno":0,"start":4,"commit":7,"ops":[["w","y",1]]}
"#;

/// Three sequentially committed transactions where T3's read of x misses
/// T2's committed write and returns T1's value instead. Timestamp-based
/// checking pins the snapshot of T3 above T2's commit, so this is exactly
/// one external-read violation on T3 (a black-box checker could instead
/// order T3 before T2 and accept the history).
pub const FIG14: &str = r#"
{"tid":1,"sid":1,"sno":0,"start":1,"commit":2,"ops":[["w","x",1]]}
{"tid":2,"sid":2,"sno":0,"start":3,"commit":5,"ops":[["w","x",2]]}
{"tid":3,"sid":3,"sno":0,"start":6,"commit":7,"ops":[["r","x",1]]}
"#;

pub fn fig2() -> ValidatedHistory {
    History::parse_str(FIG2).expect("fixture parses").validate().expect("fixture validates")
}

pub fn fig14() -> ValidatedHistory {
    History::parse_str(FIG14).expect("fixture parses").validate().expect("fixture validates")
}

/// A seeded small history: generated clean, then (for four of five seeds)
/// perturbed by one fault family, so equivalence suites exercise clean and
/// violating histories of every kind.
pub fn random_history(seed: u64) -> ValidatedHistory {
    let params = WorkloadParams {
        sessions: 1 + seed % 5,
        txns: 10 + (seed * 7) % 41,
        ops_per_txn: 1 + (seed % 9) as u32,
        read_ratio: 0.3 + 0.4 * ((seed % 3) as f64 / 2.0),
        keys: 1 + seed % 10,
        dist: match seed % 3 {
            0 => KeyDist::Uniform,
            1 => KeyDist::Zipfian { theta: KeyDist::DEFAULT_THETA },
            _ => KeyDist::Hotspot,
        },
        seed,
    };
    let (clean, _) = workload::generate(&params).expect("params valid");
    let kind = match seed % 5 {
        0 => return clean,
        1 => FaultKind::CorruptReadValue,
        2 => FaultKind::PerturbStartTs,
        3 => FaultKind::PerturbCommitTs,
        _ => FaultKind::ForceWriteConflict,
    };
    let spec = FaultSpec { kind, rate: 0.25, magnitude: 6 + seed % 20, seed: seed ^ 0x9e37 };
    workload::inject_faults(&clean, &spec).expect("rate valid").0
}
