use isoguard_core::aion::{CheckMode, GcTrigger, OnlineConfig};
use isoguard_core::harness::*;
use isoguard_core::workload::{self, KeyDist, WorkloadParams};

fn main() {
    let p = WorkloadParams {
        sessions: 24, txns: 100_000, ops_per_txn: 8, read_ratio: 0.5, keys: 1_000,
        dist: KeyDist::Zipfian { theta: 0.99 }, seed: 5,
    };
    let (h, _) = workload::generate(&p).unwrap();
    let s = DeliverySchedule::in_order(&h);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { time: TimeMode::WallClock, ..RunOptions::default() };
    for (name, gc) in [
        ("never", GcTrigger::Never),
        ("threshold:20000", GcTrigger::Threshold { resident_max: 20_000 }),
        ("hardcap:2000", GcTrigger::HardCap { resident_max: 2_000 }),
    ] {
        let mut cfg = OnlineConfig::new(CheckMode::Ser);
        cfg.gc = gc;
        cfg.spill_dir = Some(dir.path().join(name.replace(':', "-")));
        let run = run_online(&h, &s, cfg, &opts).unwrap();
        println!("{:>16}: {:>9.0} tps ({} ms)", name, run.tps, run.duration_us / 1000);
        assert!(run.report == isoguard_core::chronos::check_ser(&h, isoguard_core::chronos::GcPolicy::Never));
    }
}
