//! Timestamp-versioned maps with strict-floor lookup and disk spill.
//!
//! A [`VersionedMap`] keeps, per key, a chain of versions ordered by strictly
//! increasing timestamps. `floor_lookup(k, t)` returns the value of the
//! greatest version of `k` strictly below `t`, or the type's initial element
//! when no such version exists. Versions may be inserted at arbitrary, also
//! past, timestamps; re-inserting at an existing timestamp replaces that
//! version, which makes sweep re-computation idempotent.
//!
//! `spill_below(t)` moves every version at or below `t` to an append-only
//! segment file and evicts it from memory. Lookups that reach below the spill
//! threshold reload segments on demand, so spilling never changes any lookup
//! result.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::history::{Key, Tid, Timestamp, Value};

/// Values storable in a [`VersionedMap`]: they must have a distinguished
/// initial element returned by lookups below every version.
pub trait VersionValue: Clone + PartialEq + Serialize + DeserializeOwned {
    fn initial() -> Self;
}

impl VersionValue for Value {
    fn initial() -> Value {
        Value::Initial
    }
}

impl VersionValue for BTreeSet<Tid> {
    fn initial() -> BTreeSet<Tid> {
        BTreeSet::new()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpillError {
    #[error("versioned map has no spill directory configured")]
    NoSpillDir,
    #[error("spill i/o failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt spill segment {path}")]
    Corrupt { path: PathBuf },
}

struct Segment {
    path: PathBuf,
    low: Timestamp,
    loaded: bool,
}

pub struct VersionedMap<V> {
    chains: HashMap<Key, BTreeMap<Timestamp, V>>,
    spill_dir: Option<PathBuf>,
    spill_threshold: Timestamp,
    segments: Vec<Segment>,
    /// Versions reloaded from segments, tagged with the creation index of
    /// the segment they came from: a later segment's record wins at an
    /// equal (key, timestamp) even when segments load lazily out of order.
    reloaded: HashMap<Key, BTreeMap<Timestamp, (usize, V)>>,
}

impl<V: VersionValue> Default for VersionedMap<V> {
    fn default() -> Self {
        VersionedMap::in_memory()
    }
}

impl<V: VersionValue> VersionedMap<V> {
    /// A map that never spills; [`VersionedMap::spill_below`] will fail.
    pub fn in_memory() -> VersionedMap<V> {
        VersionedMap {
            chains: HashMap::new(),
            spill_dir: None,
            spill_threshold: Timestamp::INITIAL,
            segments: Vec::new(),
            reloaded: HashMap::new(),
        }
    }

    /// A map spilling into `dir`. Each map needs its own directory; segment
    /// files are named `spill-<low_ts>-<high_ts>.seg`.
    pub fn spillable(dir: impl Into<PathBuf>) -> VersionedMap<V> {
        VersionedMap { spill_dir: Some(dir.into()), ..VersionedMap::in_memory() }
    }

    pub fn spill_threshold(&self) -> Timestamp {
        self.spill_threshold
    }

    /// In-memory (non-spilled) version count, across all keys.
    pub fn resident_versions(&self) -> usize {
        self.chains.values().map(|c| c.len()).sum()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// The value of the greatest version of `k` strictly before `t`, or the
    /// initial element. Transparently reloads spilled segments when the
    /// answer may live below the spill threshold.
    pub fn floor_lookup(&mut self, k: &Key, t: Timestamp) -> Result<V, SpillError> {
        let mem = self
            .chains
            .get(k)
            .and_then(|c| c.range(..t).next_back())
            .map(|(&ts, v)| (ts, v.clone()));
        if let Some((ts, v)) = &mem {
            // Nothing on disk can sit above the spill threshold.
            if *ts > self.spill_threshold {
                return Ok(v.clone());
            }
        }
        if self.segments.iter().any(|s| !s.loaded) && t > Timestamp::INITIAL {
            self.load_segments_below(t)?;
        }
        let disk = self
            .reloaded
            .get(k)
            .and_then(|c| c.range(..t).next_back())
            .map(|(&ts, (_, v))| (ts, v.clone()));
        // In-memory versions shadow reloaded ones at equal timestamps: a
        // re-insert after a spill is the newer truth.
        Ok(match (mem, disk) {
            (Some((mts, mv)), Some((dts, _))) if mts >= dts => mv,
            (_, Some((_, dv))) => dv,
            (Some((_, mv)), None) => mv,
            (None, None) => V::initial(),
        })
    }

    /// Insert (or idempotently replace) the version of `k` at exactly `t`.
    pub fn insert_version(&mut self, k: &Key, t: Timestamp, v: V) {
        self.chains.entry(k.clone()).or_default().insert(t, v);
    }

    /// Serialize all in-memory versions at or below `t` to a new segment and
    /// evict them. A bound at or below the current threshold is a no-op for
    /// the threshold; lookups are unaffected either way.
    pub fn spill_below(&mut self, t: Timestamp) -> Result<(), SpillError> {
        let dir = self.spill_dir.clone().ok_or(SpillError::NoSpillDir)?;
        let mut records: Vec<(Key, Timestamp, V)> = Vec::new();
        let cut = Timestamp(t.0.saturating_add(1));
        for (k, chain) in self.chains.iter_mut() {
            let keep = chain.split_off(&cut);
            let spilled = std::mem::replace(chain, keep);
            for (ts, v) in spilled {
                records.push((k.clone(), ts, v));
            }
        }
        self.chains.retain(|_, c| !c.is_empty());
        self.spill_threshold = self.spill_threshold.max(t);
        if records.is_empty() {
            return Ok(());
        }
        let low = records.iter().map(|(_, ts, _)| *ts).min().expect("non-empty");
        fs::create_dir_all(&dir).map_err(|source| SpillError::Io { path: dir.clone(), source })?;
        // One file per spill: a repeated spill over the same bounds (only
        // possible when versions were re-inserted below the threshold) gets
        // a disambiguating suffix, keeping segment creation order the sole
        // merge authority.
        let mut path = dir.join(format!("spill-{}-{}.seg", low.0, t.0));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = dir.join(format!("spill-{}-{}.{}.seg", low.0, t.0, n));
        }
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|source| SpillError::Io { path: path.clone(), source })?;
        for rec in &records {
            write_record(&mut file, rec, &path)?;
        }
        file.sync_data().ok();
        self.segments.push(Segment { path, low, loaded: false });
        Ok(())
    }

    fn load_segments_below(&mut self, t: Timestamp) -> Result<(), SpillError> {
        let mut any = false;
        for (seq, seg) in self.segments.iter_mut().enumerate() {
            if seg.loaded || seg.low >= t {
                continue;
            }
            any = true;
            seg.loaded = true;
            let data = read_segment::<V>(&seg.path)?;
            for (k, ts, v) in data {
                let chain = self.reloaded.entry(k).or_default();
                match chain.get(&ts) {
                    Some(&(prev_seq, _)) if prev_seq > seq => {}
                    _ => {
                        chain.insert(ts, (seq, v));
                    }
                }
            }
        }
        if any {
            log::debug!("reloaded spill segments for lookups below {}", t.0);
        }
        Ok(())
    }
}

fn write_record<V: Serialize>(
    file: &mut File,
    rec: &(Key, Timestamp, V),
    path: &Path,
) -> Result<(), SpillError> {
    let bytes =
        serde_json::to_vec(rec).map_err(|_| SpillError::Corrupt { path: path.to_path_buf() })?;
    let len = (bytes.len() as u32).to_le_bytes();
    file.write_all(&len)
        .and_then(|()| file.write_all(&bytes))
        .map_err(|source| SpillError::Io { path: path.to_path_buf(), source })
}

fn read_segment<V: DeserializeOwned>(path: &Path) -> Result<Vec<(Key, Timestamp, V)>, SpillError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| SpillError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    let mut at = 0usize;
    while at < buf.len() {
        if at + 4 > buf.len() {
            return Err(SpillError::Corrupt { path: path.to_path_buf() });
        }
        let len = u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes")) as usize;
        at += 4;
        if at + len > buf.len() {
            return Err(SpillError::Corrupt { path: path.to_path_buf() });
        }
        let rec = serde_json::from_slice(&buf[at..at + len])
            .map_err(|_| SpillError::Corrupt { path: path.to_path_buf() })?;
        out.push(rec);
        at += len;
    }
    Ok(out)
}
