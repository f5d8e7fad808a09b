//! Collector-pipeline simulation for driving the online checker.
//!
//! A [`DeliverySchedule`] assigns every transaction a delivery time:
//! transactions complete in commit order, are dispatched in wire batches at
//! a configurable per-transaction interval, and each one additionally
//! samples a normally distributed delay. The resulting reordering mimics
//! the asynchrony of real history collection while per-session FIFO (the
//! online checker's arrival precondition) is enforced by construction.
//!
//! [`run_online`] feeds a schedule to a checker on a virtual clock (fast,
//! deterministic, used by tests) or in wall-clock mode (a producer thread
//! and a consumer joined by a bounded queue, used for throughput
//! measurement), collects the emitted events, and derives the final report,
//! flip-flop statistics, and a per-second throughput trace.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::aion::{CheckerEvent, OnlineChecker, OnlineConfig, OnlineError};
use crate::history::{Key, Tid, ValidatedHistory};
use crate::report::Report;

#[derive(Debug, Clone)]
pub struct ScheduleParams {
    /// Mean of the injected delay, in milliseconds.
    pub mu_ms: f64,
    /// Standard deviation of the injected delay, in milliseconds; negative
    /// samples clamp to zero.
    pub sigma_ms: f64,
    /// Collector batch size: a batch is dispatched once fully collected.
    pub batch: usize,
    /// Wire interval between consecutive transactions, in microseconds.
    pub inter_us: u64,
    pub seed: u64,
}

impl Default for ScheduleParams {
    fn default() -> ScheduleParams {
        ScheduleParams { mu_ms: 100.0, sigma_ms: 10.0, batch: 500, inter_us: 2_000, seed: 0 }
    }
}

/// A delivery plan: every transaction with its virtual delivery time, in
/// delivery order. Within a session, delivery order equals session order.
#[derive(Debug, Clone)]
pub struct DeliverySchedule {
    entries: Vec<(Tid, u64)>,
}

impl DeliverySchedule {
    /// Build a randomized schedule. Deterministic for a seed.
    pub fn build(h: &ValidatedHistory, p: &ScheduleParams) -> DeliverySchedule {
        let normal = Normal::new(p.mu_ms * 1_000.0, p.sigma_ms * 1_000.0)
            .expect("finite delay parameters");
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut order: Vec<Tid> = h.txns().iter().map(|t| t.tid).collect();
        order.sort_by_key(|&tid| h.get(tid).expect("indexed").commit_ts);

        let batch = p.batch.max(1);
        let mut release: HashMap<Tid, u64> = HashMap::new();
        for (i, &tid) in order.iter().enumerate() {
            // The whole batch is dispatched after it is collected, paced at
            // the wire interval within the batch.
            let batch_end = ((i / batch + 1) * batch) as u64 * p.inter_us;
            let base = batch_end + (i % batch) as u64 * p.inter_us;
            let delay = normal.sample(&mut rng).max(0.0).round() as u64;
            release.insert(tid, base + delay);
        }

        // Per-session FIFO: successors may not be delivered before their
        // predecessors; bump by one microsecond to keep the order strict.
        for tids in h.sessions().values() {
            let mut floor = 0u64;
            for tid in tids {
                let at = release.get_mut(tid).expect("scheduled");
                *at = (*at).max(floor);
                floor = *at + 1;
            }
        }

        let mut entries: Vec<(Tid, u64)> =
            order.into_iter().map(|tid| (tid, release[&tid])).collect();
        entries.sort_by_key(|&(tid, at)| (at, h.get(tid).expect("indexed").commit_ts, tid));
        DeliverySchedule { entries }
    }

    /// Delivery in commit order with no delays: the in-order baseline.
    ///
    /// Session FIFO binds harder than commit order: when a history orders
    /// commits against session order (possible in fault-injected inputs),
    /// the affected transactions are released at their session's pace.
    pub fn in_order(h: &ValidatedHistory) -> DeliverySchedule {
        let mut queues: Vec<std::collections::VecDeque<Tid>> =
            h.sessions().values().map(|tids| tids.iter().copied().collect()).collect();
        // Merge session streams by the commit timestamp of each head.
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<(u64, usize)>> =
            std::collections::BinaryHeap::new();
        for (i, q) in queues.iter().enumerate() {
            if let Some(&tid) = q.front() {
                ready.push(std::cmp::Reverse((h.get(tid).expect("indexed").commit_ts.0, i)));
            }
        }
        let mut entries = Vec::with_capacity(h.user_txn_count());
        let mut at = 0u64;
        while let Some(std::cmp::Reverse((_, i))) = ready.pop() {
            let tid = queues[i].pop_front().expect("queued");
            entries.push((tid, at));
            at += 1;
            if let Some(&next) = queues[i].front() {
                ready.push(std::cmp::Reverse((h.get(next).expect("indexed").commit_ts.0, i)));
            }
        }
        DeliverySchedule { entries }
    }

    /// A seeded random delivery permutation that preserves session order:
    /// repeatedly deliver the next transaction of a randomly picked session.
    pub fn session_permutation(h: &ValidatedHistory, seed: u64) -> DeliverySchedule {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut queues: Vec<std::collections::VecDeque<Tid>> =
            h.sessions().values().map(|tids| tids.iter().copied().collect()).collect();
        let mut entries = Vec::with_capacity(h.user_txn_count());
        let mut at = 0u64;
        while !queues.is_empty() {
            let i = rng.random_range(0..queues.len());
            let tid = queues[i].pop_front().expect("non-empty queues retained");
            if queues[i].is_empty() {
                queues.swap_remove(i);
            }
            entries.push((tid, at));
            at += 1;
        }
        DeliverySchedule { entries }
    }

    pub fn entries(&self) -> &[(Tid, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of delivery pairs arriving out of commit order.
    pub fn inversions(&self, h: &ValidatedHistory) -> u64 {
        let ranks: Vec<u64> =
            self.entries.iter().map(|&(tid, _)| h.get(tid).expect("indexed").commit_ts.0).collect();
        count_inversions(&ranks)
    }
}

fn count_inversions(xs: &[u64]) -> u64 {
    fn merge_count(xs: &mut Vec<u64>) -> u64 {
        if xs.len() < 2 {
            return 0;
        }
        let mid = xs.len() / 2;
        let mut right = xs.split_off(mid);
        let mut inv = merge_count(xs) + merge_count(&mut right);
        let (mut out, mut i, mut j) = (Vec::with_capacity(xs.len() + right.len()), 0, 0);
        while i < xs.len() && j < right.len() {
            if xs[i] <= right[j] {
                out.push(xs[i]);
                i += 1;
            } else {
                inv += (xs.len() - i) as u64;
                out.push(right[j]);
                j += 1;
            }
        }
        out.extend_from_slice(&xs[i..]);
        out.extend_from_slice(&right[j..]);
        *xs = out;
        inv
    }
    let mut v = xs.to_vec();
    merge_count(&mut v)
}

/// Per-(transaction, key) interim-verdict history, derived purely from the
/// checker's event stream, so it can be recomputed offline from a log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlipFlopStats {
    /// Transactions with at least one verdict flip.
    pub flipped_txns: usize,
    /// (transaction, key) pairs with at least one flip.
    pub flipped_pairs: usize,
    pub total_flips: u64,
    /// flip count -> number of (txn, key) pairs with that many flips.
    pub histogram: BTreeMap<u32, usize>,
    /// Time from a wrong interim verdict to its correction, microseconds.
    pub rectification_latencies_us: Vec<u64>,
    /// Delay between a correcting arrival and the flip it causes,
    /// microseconds; in-process re-checks make this zero by construction.
    pub correction_lag_us: Vec<u64>,
    /// Pairs whose verdict was still wrong when the run ended (their final
    /// violations are real, not transient).
    pub unrectified_pairs: usize,
}

#[derive(Default)]
struct PairTrack {
    ok: bool,
    wrong_since: Option<u64>,
    flips: u32,
}

/// Streaming builder for [`FlipFlopStats`].
#[derive(Default)]
pub struct FlipFlopBuilder {
    pairs: HashMap<(Tid, Key), PairTrack>,
    latencies: Vec<u64>,
    lags: Vec<u64>,
}

impl FlipFlopBuilder {
    pub fn ingest(&mut self, ev: &CheckerEvent) {
        match ev {
            CheckerEvent::InterimExtVerdict { tid, ok: false, failing, at_us } => {
                for (k, _) in failing {
                    let p = self.pairs.entry((*tid, k.clone())).or_default();
                    p.ok = false;
                    p.wrong_since = Some(*at_us);
                }
            }
            CheckerEvent::FlipFlop { tid, key, to, at_us, .. } => {
                let p = self.pairs.entry((*tid, key.clone())).or_default();
                p.flips += 1;
                p.ok = *to;
                if *to {
                    // Rectification: measure from the wrong-verdict onset.
                    if let Some(since) = p.wrong_since.take() {
                        self.latencies.push(at_us.saturating_sub(since));
                    }
                    self.lags.push(0);
                } else {
                    p.wrong_since = Some(*at_us);
                }
            }
            _ => {}
        }
    }

    pub fn finish(self) -> FlipFlopStats {
        let mut stats = FlipFlopStats {
            rectification_latencies_us: self.latencies,
            correction_lag_us: self.lags,
            ..FlipFlopStats::default()
        };
        let mut txns: std::collections::HashSet<Tid> = std::collections::HashSet::new();
        for ((tid, _), p) in &self.pairs {
            if p.flips > 0 {
                stats.flipped_pairs += 1;
                stats.total_flips += p.flips as u64;
                *stats.histogram.entry(p.flips).or_default() += 1;
                txns.insert(*tid);
            }
            if !p.ok {
                stats.unrectified_pairs += 1;
            }
        }
        stats.flipped_txns = txns.len();
        stats.rectification_latencies_us.sort_unstable();
        stats
    }
}

impl FlipFlopStats {
    /// Recompute the statistics from a recorded event stream.
    pub fn from_events(events: &[CheckerEvent]) -> FlipFlopStats {
        let mut b = FlipFlopBuilder::default();
        for ev in events {
            b.ingest(ev);
        }
        b.finish()
    }

    pub fn latency_percentile_us(&self, pct: f64) -> Option<u64> {
        if self.rectification_latencies_us.is_empty() {
            return None;
        }
        let idx = ((self.rectification_latencies_us.len() as f64 - 1.0) * pct / 100.0).round();
        Some(self.rectification_latencies_us[idx as usize])
    }

    /// Fraction of corrections applied within `bound_us` of the arrival
    /// that caused them.
    pub fn corrections_within(&self, bound_us: u64) -> f64 {
        if self.correction_lag_us.is_empty() {
            return 1.0;
        }
        self.correction_lag_us.iter().filter(|&&l| l <= bound_us).count() as f64
            / self.correction_lag_us.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// The clock is the schedule's delivery times: fast and deterministic.
    Virtual,
    /// Producer/consumer pipeline over a bounded queue, timed with the real
    /// clock; used for throughput measurement.
    WallClock,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub time: TimeMode,
    /// Retain the raw event log in the run report.
    pub keep_events: bool,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions { time: TimeMode::Virtual, keep_events: false }
    }
}

#[derive(Debug)]
pub struct RunReport {
    /// Post-timeout final report over the whole stream.
    pub report: Report,
    pub flips: FlipFlopStats,
    /// Transactions processed per (virtual or wall) second.
    pub trace: Vec<(u64, u64)>,
    pub duration_us: u64,
    pub tps: f64,
    pub events: Option<Vec<CheckerEvent>>,
}

/// Feed a schedule to a fresh online checker, firing timers as the clock
/// passes their deadlines and finalizing all verdicts at end of stream.
pub fn run_online(
    h: &ValidatedHistory,
    schedule: &DeliverySchedule,
    config: OnlineConfig,
    opts: &RunOptions,
) -> Result<RunReport, OnlineError> {
    match opts.time {
        TimeMode::Virtual => run_virtual(h, schedule, config, opts),
        TimeMode::WallClock => run_wall_clock(h, schedule, config, opts),
    }
}

fn run_virtual(
    h: &ValidatedHistory,
    schedule: &DeliverySchedule,
    config: OnlineConfig,
    opts: &RunOptions,
) -> Result<RunReport, OnlineError> {
    let mut checker = OnlineChecker::new(config);
    let mut flips = FlipFlopBuilder::default();
    let mut log = Vec::new();
    let mut trace: BTreeMap<u64, u64> = BTreeMap::new();
    let mut now = 0u64;
    for &(tid, at) in schedule.entries() {
        now = now.max(at);
        let fired = checker.fire_due(now);
        let txn = h.get(tid).expect("schedule refers to history").clone();
        let arrived = checker.on_transaction(txn, now)?;
        *trace.entry(now / 1_000_000).or_default() += 1;
        for ev in fired.iter().chain(arrived.iter()) {
            flips.ingest(ev);
        }
        if opts.keep_events {
            log.extend(fired);
            log.extend(arrived);
        }
    }
    let finals = checker.finalize_all(now);
    for ev in &finals {
        flips.ingest(ev);
    }
    if opts.keep_events {
        log.extend(finals);
    }
    let duration_us = now.max(1);
    Ok(RunReport {
        report: checker.final_report(),
        flips: flips.finish(),
        trace: trace.into_iter().collect(),
        duration_us,
        tps: schedule.len() as f64 / (duration_us as f64 / 1e6),
        events: opts.keep_events.then_some(log),
    })
}

fn run_wall_clock(
    h: &ValidatedHistory,
    schedule: &DeliverySchedule,
    config: OnlineConfig,
    opts: &RunOptions,
) -> Result<RunReport, OnlineError> {
    let txns: Vec<_> = schedule
        .entries()
        .iter()
        .map(|&(tid, _)| h.get(tid).expect("schedule refers to history").clone())
        .collect();
    let (tx, rx) = mpsc::sync_channel(1024);
    let producer = std::thread::spawn(move || {
        for t in txns {
            if tx.send(t).is_err() {
                return;
            }
        }
    });

    let mut checker = OnlineChecker::new(config);
    let mut flips = FlipFlopBuilder::default();
    let mut log = Vec::new();
    let mut trace: BTreeMap<u64, u64> = BTreeMap::new();
    let clock = Instant::now();
    let mut processed = 0u64;
    let mut result = Ok(());
    while let Ok(txn) = rx.recv() {
        let now = clock.elapsed().as_micros() as u64;
        let fired = checker.fire_due(now);
        match checker.on_transaction(txn, now) {
            Ok(arrived) => {
                processed += 1;
                *trace.entry(now / 1_000_000).or_default() += 1;
                for ev in fired.iter().chain(arrived.iter()) {
                    flips.ingest(ev);
                }
                if opts.keep_events {
                    log.extend(fired);
                    log.extend(arrived);
                }
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    drop(rx);
    producer.join().expect("producer thread");
    result?;

    let now = clock.elapsed().as_micros() as u64;
    let finals = checker.finalize_all(now);
    for ev in &finals {
        flips.ingest(ev);
    }
    if opts.keep_events {
        log.extend(finals);
    }
    let duration_us = clock.elapsed().as_micros().max(1) as u64;
    Ok(RunReport {
        report: checker.final_report(),
        flips: flips.finish(),
        trace: trace.into_iter().collect(),
        duration_us,
        tps: processed as f64 / (duration_us as f64 / 1e6),
        events: opts.keep_events.then_some(log),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aion::CheckMode;
    use crate::chronos::{self, GcPolicy};
    use crate::workload::{self, FaultKind, FaultSpec, KeyDist, WorkloadParams};

    fn small_history(seed: u64) -> ValidatedHistory {
        let p = WorkloadParams {
            sessions: 6,
            txns: 200,
            ops_per_txn: 6,
            read_ratio: 0.5,
            keys: 12,
            dist: KeyDist::Zipfian { theta: KeyDist::DEFAULT_THETA },
            seed,
        };
        workload::generate(&p).unwrap().0
    }

    #[test]
    fn schedules_are_deterministic() {
        let h = small_history(1);
        let p = ScheduleParams::default();
        let a = DeliverySchedule::build(&h, &p);
        let b = DeliverySchedule::build(&h, &p);
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn zero_sigma_preserves_commit_order() {
        let h = small_history(2);
        let p = ScheduleParams { sigma_ms: 0.0, ..ScheduleParams::default() };
        let s = DeliverySchedule::build(&h, &p);
        assert_eq!(s.inversions(&h), 0);
        let run = run_online(&h, &s, OnlineConfig::new(CheckMode::Si), &RunOptions::default())
            .unwrap();
        assert_eq!(run.flips.total_flips, 0);
        assert!(run.report.is_clean());
    }

    #[test]
    fn session_fifo_is_enforced() {
        let h = small_history(3);
        let p = ScheduleParams { sigma_ms: 500.0, inter_us: 10, ..ScheduleParams::default() };
        let s = DeliverySchedule::build(&h, &p);
        let mut seen: HashMap<crate::history::Sid, u64> = HashMap::new();
        for &(tid, _) in s.entries() {
            let t = h.get(tid).unwrap();
            let next = seen.entry(t.sid).or_default();
            assert_eq!(t.sno, *next, "session order broken for {tid}");
            *next += 1;
        }
    }

    #[test]
    fn higher_sigma_does_not_reduce_aggregate_inversions() {
        let h = small_history(4);
        let mut prev = 0u64;
        for sigma in [0.0, 5.0, 20.0, 80.0] {
            let total: u64 = (0..5)
                .map(|seed| {
                    let p = ScheduleParams {
                        sigma_ms: sigma,
                        seed,
                        inter_us: 1_000,
                        ..ScheduleParams::default()
                    };
                    DeliverySchedule::build(&h, &p).inversions(&h)
                })
                .sum();
            assert!(total >= prev, "sigma {sigma}: {total} < {prev}");
            prev = total;
        }
    }

    #[test]
    fn delayed_clean_run_rectifies_everything_before_timeout() {
        let h = small_history(5);
        let p = ScheduleParams { inter_us: 200, ..ScheduleParams::default() };
        let s = DeliverySchedule::build(&h, &p);
        let run = run_online(&h, &s, OnlineConfig::new(CheckMode::Si), &RunOptions::default())
            .unwrap();
        // Timeout (5s) far exceeds the maximum injected delay, so every
        // wrong interim verdict is corrected before finalization.
        assert!(run.report.is_clean(), "{:?}", run.report.violations().first());
        assert_eq!(run.flips.unrectified_pairs, 0);
    }

    #[test]
    fn fault_injected_run_matches_the_offline_report() {
        let h = small_history(6);
        let spec = FaultSpec { kind: FaultKind::CorruptReadValue, rate: 0.1, magnitude: 1, seed: 1 };
        let (bad, stats) = workload::inject_faults(&h, &spec).unwrap();
        assert!(stats.applied > 0);
        let p = ScheduleParams { inter_us: 200, ..ScheduleParams::default() };
        let s = DeliverySchedule::build(&bad, &p);
        let run = run_online(&bad, &s, OnlineConfig::new(CheckMode::Si), &RunOptions::default())
            .unwrap();
        assert_eq!(run.report, chronos::check_si(&bad, GcPolicy::Never));
    }

    #[test]
    fn statistics_are_a_pure_function_of_the_event_stream() {
        let h = small_history(7);
        let p = ScheduleParams { inter_us: 100, ..ScheduleParams::default() };
        let s = DeliverySchedule::build(&h, &p);
        let opts = RunOptions { keep_events: true, ..RunOptions::default() };
        let run = run_online(&h, &s, OnlineConfig::new(CheckMode::Si), &opts).unwrap();
        let recomputed = FlipFlopStats::from_events(run.events.as_ref().unwrap());
        assert_eq!(run.flips, recomputed);
    }

    #[test]
    fn wall_clock_mode_reports_throughput() {
        let h = small_history(8);
        let s = DeliverySchedule::in_order(&h);
        let opts = RunOptions { time: TimeMode::WallClock, ..RunOptions::default() };
        let run = run_online(&h, &s, OnlineConfig::new(CheckMode::Ser), &opts).unwrap();
        // Snapshot-level histories may legitimately fail commit-order
        // replay; the online result must match the offline one either way.
        assert_eq!(run.report, chronos::check_ser(&h, GcPolicy::Never));
        assert!(run.tps > 0.0);
        assert_eq!(run.trace.iter().map(|&(_, n)| n).sum::<u64>(), h.user_txn_count() as u64);
    }
}
