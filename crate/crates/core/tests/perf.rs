//! Scaling-trend tests. These measure wall time, so they live in their own
//! binary (cargo runs test binaries one after another) and serialize on a
//! mutex to keep the box to themselves while measuring.

use std::sync::{Mutex, PoisonError};
use std::time::Instant;

use isoguard_core::aion::{CheckMode, OnlineChecker, OnlineConfig};
use isoguard_core::chronos::{self, GcPolicy};
use isoguard_core::harness::DeliverySchedule;
use isoguard_core::workload::{self, KeyDist, WorkloadParams};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(PoisonError::into_inner)
}

fn default_like(txns: u64, ops: u32, seed: u64) -> WorkloadParams {
    WorkloadParams {
        sessions: 50,
        txns,
        ops_per_txn: ops,
        read_ratio: 0.5,
        keys: 1_000,
        dist: KeyDist::Zipfian { theta: KeyDist::DEFAULT_THETA },
        seed,
    }
}

#[test]
fn sweep_runtime_grows_linearithmically() {
    let _guard = serial();
    // Doubling the transaction count at fixed ops per transaction must not
    // much more than double the runtime. Rounds are interleaved across
    // sizes and the per-size minimum taken, so machine-load drift hits all
    // sizes alike instead of biasing one step.
    let sizes = [10_000u64, 20_000, 40_000, 80_000];
    let hists: Vec<_> = sizes
        .iter()
        .map(|&txns| workload::generate(&default_like(txns, 8, 7)).unwrap().0)
        .collect();
    let _ = chronos::check_si(&hists[sizes.len() - 1], GcPolicy::Never); // warm pass
    let mut best = [f64::INFINITY; 4];
    for _round in 0..7 {
        for (i, h) in hists.iter().enumerate() {
            let t0 = Instant::now();
            let r = chronos::check_si(h, GcPolicy::EveryNTxns(10_000));
            assert!(r.is_clean());
            best[i] = best[i].min(t0.elapsed().as_secs_f64());
        }
    }
    for i in 1..sizes.len() {
        let ratio = best[i] / best[i - 1];
        assert!(ratio < 2.5, "doubling to {} txns scaled runtime by {ratio:.2}", sizes[i]);
    }
}

#[test]
fn periodic_gc_lowers_the_sweeps_live_footprint_on_a_million_events() {
    let _guard = serial();
    // 500K transactions = one million start/commit events.
    let (h, _) = workload::generate(&default_like(500_000, 3, 9)).unwrap();
    let (r1, never) = chronos::check_si_with_stats(&h, GcPolicy::Never);
    let (r2, periodic) = chronos::check_si_with_stats(&h, GcPolicy::EveryNTxns(10_000));
    assert_eq!(r1, r2);
    assert!(
        periodic.peak_live_units < never.peak_live_units,
        "periodic {periodic:?} vs never {never:?}"
    );
}

#[test]
fn online_per_arrival_cost_grows_sublinearly() {
    let _guard = serial();
    let mut costs = Vec::new();
    for txns in [10_000u64, 40_000] {
        let (h, _) = workload::generate(&default_like(txns, 8, 11)).unwrap();
        let s = DeliverySchedule::in_order(&h);
        let mut best = f64::INFINITY;
        for _round in 0..3 {
            let mut c = OnlineChecker::new(OnlineConfig::new(CheckMode::Si));
            let t0 = Instant::now();
            for &(tid, at) in s.entries() {
                c.on_transaction(h.get(tid).unwrap().clone(), at).unwrap();
            }
            best = best.min(t0.elapsed().as_secs_f64() / txns as f64);
        }
        costs.push(best);
    }
    let ratio = costs[1] / costs[0];
    assert!(ratio < 2.5, "4x the history scaled per-arrival cost by {ratio:.2}");
}
