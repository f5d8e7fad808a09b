//! The two canonical example histories, checked end to end through every
//! engine.

mod common;

use std::collections::BTreeSet;

use common::{fig14, fig2};
use isoguard_core::aion::{CheckMode, CheckerEvent, OnlineChecker, OnlineConfig};
use isoguard_core::chronos::{self, GcPolicy};
use isoguard_core::history::{Key, Tid};
use isoguard_core::oracle;
use isoguard_core::report::ViolationKind;

#[test]
fn fig2_oracle_reports_exactly_one_conflict() {
    let h = fig2();
    let r = oracle::check_si(&h);
    assert_eq!(r.len(), 1, "{:?}", r.violations());
    let v = &r.violations()[0];
    assert_eq!(v.kind, ViolationKind::NoConflict);
    assert_eq!(v.subject, Tid(5));
    assert_eq!(v.peers, BTreeSet::from([Tid(3)]));
    assert_eq!(v.key.as_ref().unwrap(), &Key::new("y"));
    assert_eq!(r.count_of(ViolationKind::Ext), 0);
}

#[test]
fn fig2_offline_sweep_matches_the_oracle() {
    let h = fig2();
    for gc in [GcPolicy::Never, GcPolicy::EveryNTxns(1), GcPolicy::EveryNTxns(2)] {
        assert_eq!(chronos::check_si(&h, gc), oracle::check_si(&h));
    }
}

#[test]
fn fig2_online_arrival_order_rechecks_as_described() {
    // Deliver T1..T5 in id order. After T4 arrives its read of y is
    // unjustified (nobody wrote y=1 yet); T5's arrival re-checks the
    // conflict window (finding T3) and re-justifies T4.
    let h = fig2();
    let mut c = OnlineChecker::new(OnlineConfig::new(CheckMode::Si));
    for (i, tid) in (1..=4).enumerate() {
        let evs = c.on_transaction(h.get(Tid(tid)).unwrap().clone(), i as u64).unwrap();
        if tid == 4 {
            assert!(evs.iter().any(|e| matches!(
                e,
                CheckerEvent::InterimExtVerdict { tid: Tid(4), ok: false, .. }
            )));
        } else {
            assert!(evs.is_empty(), "unexpected events for T{tid}: {evs:?}");
        }
    }
    assert_eq!(c.ext_flag(Tid(4)), Some(false));

    let evs = c.on_transaction(h.get(Tid(5)).unwrap().clone(), 4).unwrap();
    assert!(evs.iter().any(|e| matches!(
        e,
        CheckerEvent::NoConflictViolation { subject: Tid(5), ref peers, .. }
            if peers == &BTreeSet::from([Tid(3)])
    )));
    assert!(evs.iter().any(|e| matches!(
        e,
        CheckerEvent::FlipFlop { tid: Tid(4), from: false, to: true, .. }
    )));
    assert_eq!(c.ext_flag(Tid(4)), Some(true));

    let finals = c.finalize_all(10);
    assert!(finals.is_empty());
    assert_eq!(c.final_report(), oracle::check_si(&h));
}

#[test]
fn fig14_yields_exactly_one_ext_violation_on_t3() {
    let h = fig14();
    let r = oracle::check_si(&h);
    assert_eq!(r.len(), 1, "{:?}", r.violations());
    let v = &r.violations()[0];
    assert_eq!(v.kind, ViolationKind::Ext);
    assert_eq!(v.subject, Tid(3));
    assert_eq!(v.key.as_ref().unwrap(), &Key::new("x"));
    assert_eq!(chronos::check_si(&h, GcPolicy::Never), r);

    let mut c = OnlineChecker::new(OnlineConfig::new(CheckMode::Si));
    for (i, tid) in (1..=3).enumerate() {
        c.on_transaction(h.get(Tid(tid)).unwrap().clone(), i as u64).unwrap();
    }
    c.finalize_all(10);
    assert_eq!(c.final_report(), r);
}
