//! Timestamp-based checking of transactional isolation for key-value
//! histories.
//!
//! The crate provides, over one shared [`history`] model:
//!
//! * [`oracle`] — a deliberately naive reference checker evaluating the
//!   snapshot-isolation conditions (and commit-order serializability)
//!   straight from their definitions;
//! * [`chronos`] — the offline checker: one ascending sweep over start and
//!   commit events with optional garbage collection;
//! * [`aion`] — the online checker: transactions arrive out of order, each
//!   arrival re-checks exactly the verdicts it can affect, and external-read
//!   verdicts become final on a timeout;
//! * [`vstore`] — the timestamp-versioned maps with strict-floor lookup and
//!   spill-to-disk that make online re-checking possible;
//! * [`workload`] — a snapshot-isolation workload generator and fault
//!   injector;
//! * [`harness`] — delivery scheduling with injected delays, virtual or
//!   wall-clock driving, and flip-flop statistics.

pub mod aion;
pub mod chronos;
pub mod harness;
pub mod history;
pub mod oracle;
pub mod report;
pub mod vstore;
pub mod workload;
