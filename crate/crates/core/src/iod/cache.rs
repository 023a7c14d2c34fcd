//! Page-level write-back cache model on a virtual clock.
//!
//! The model tracks which pages are resident, dirty or under writeback and
//! how long each request occupies the daemon. It holds no data; the daemon
//! keeps dirty page contents itself and learns from [`CacheModel::take_written`]
//! which pages reached the backing store.
//!
//! Timing follows two rules:
//!
//! * a flusher with queue depth one starts a cycle whenever
//!   `dirty_bytes >= threshold * capacity` and writes the oldest dirty pages
//!   until the limit is clear and at least `flush_batch` bytes went out;
//! * a writer that would dirty another page blocks while the dirty bytes
//!   not yet under writeback are at or above that same limit.
//!
//! Once the limit is reached each newly dirtied page therefore waits for one
//! page writeback, and sustained write speed falls to the disk rate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `(file handle, page index)`.
pub type PageKey = (u64, u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("invalid cache parameters: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheParams {
    pub capacity: u64,
    pub page_size: u64,
    pub dirty_threshold: f64,
    /// Bytes a flush cycle writes at least once it has started; 0 stops
    /// the flusher as soon as the dirty bytes drop below the limit.
    #[serde(default)]
    pub flush_batch: u64,
}

/// Flush cycle length: about what the kernel flusher of the era wrote per
/// wake-up (500 buffers of 4 KiB).
pub const DEFAULT_FLUSH_BATCH: u64 = 2 << 20;

impl Default for CacheParams {
    fn default() -> Self {
        CacheParams {
            capacity: 256 << 20,
            page_size: 64 << 10,
            dirty_threshold: 0.40,
            flush_batch: DEFAULT_FLUSH_BATCH,
        }
    }
}

impl CacheParams {
    pub fn validate(&self) -> Result<(), CacheError> {
        if self.page_size == 0 {
            return Err(CacheError::Invalid("page size must be positive".into()));
        }
        if self.capacity < self.page_size {
            return Err(CacheError::Invalid("capacity must hold at least one page".into()));
        }
        if !(self.dirty_threshold > 0.0 && self.dirty_threshold <= 1.0) {
            return Err(CacheError::Invalid(format!("dirty threshold {} outside (0, 1]", self.dirty_threshold)));
        }
        Ok(())
    }

    /// Dirty bytes at which flushing starts.
    pub fn flush_limit(&self) -> f64 {
        self.dirty_threshold * self.capacity as f64
    }
}

/// Service rates of one daemon, bytes per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThrottleModel {
    pub enabled: bool,
    pub disk_write_bps: f64,
    pub disk_read_bps: f64,
    pub cache_read_bps: f64,
    pub cache_write_bps: f64,
    /// Factor applied to `disk_read_bps` while more than one reader stream
    /// hits the daemon.
    pub concurrent_read_penalty: f64,
}

impl Default for ThrottleModel {
    fn default() -> Self {
        ThrottleModel {
            enabled: true,
            disk_write_bps: 19e6,
            disk_read_bps: 24e6,
            cache_read_bps: 280e6,
            cache_write_bps: 60e6,
            concurrent_read_penalty: 1.0,
        }
    }
}

impl ThrottleModel {
    pub fn disabled() -> Self {
        ThrottleModel { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        if !self.enabled {
            return Ok(());
        }
        let rates = [self.disk_write_bps, self.disk_read_bps, self.cache_read_bps, self.cache_write_bps];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(CacheError::Invalid("throttle rates must be positive".into()));
        }
        if !(self.concurrent_read_penalty > 0.0 && self.concurrent_read_penalty <= 1.0) {
            return Err(CacheError::Invalid("concurrent read penalty outside (0, 1]".into()));
        }
        Ok(())
    }

    fn time(&self, bytes: u64, rate: f64) -> f64 {
        if self.enabled {
            bytes as f64 / rate
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum State {
    Clean(u64),
    Dirty(u64),
    Writeback,
}

#[derive(Clone, Copy, Debug)]
struct Page {
    state: State,
    /// rewritten while its writeback was in flight
    redirty: bool,
    /// which 1/64ths of the page hold valid data
    loaded: u64,
}

#[derive(Clone, Copy, Debug)]
struct Inflight {
    key: PageKey,
    done: f64,
    /// the page was removed while on its way to disk
    orphan: bool,
}

/// Start and end of a request on the daemon's storage stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Span {
    pub start: f64,
    pub done: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReadSpan {
    pub start: f64,
    pub done: f64,
    pub hit_bytes: u64,
    pub miss_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hit_bytes: u64,
    pub miss_bytes: u64,
    pub flushed_bytes: u64,
    /// dirty bytes at the moment the first writeback started
    pub flush_onset: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct CacheModel {
    params: CacheParams,
    throttle: ThrottleModel,
    cap_pages: usize,
    pages: HashMap<PageKey, Page>,
    clean: BTreeMap<u64, PageKey>,
    dirty: BTreeMap<u64, PageKey>,
    inflight: Option<Inflight>,
    seq: u64,
    stage_free: f64,
    disk_free: f64,
    written: Vec<PageKey>,
    /// pages the current flush cycle still owes
    cycle_left: u64,
    stats: CacheStats,
}

impl CacheModel {
    pub fn new(params: CacheParams, throttle: ThrottleModel) -> Result<Self, CacheError> {
        params.validate()?;
        throttle.validate()?;
        Ok(CacheModel {
            params,
            throttle,
            cap_pages: (params.capacity / params.page_size) as usize,
            pages: HashMap::new(),
            clean: BTreeMap::new(),
            dirty: BTreeMap::new(),
            inflight: None,
            seq: 0,
            stage_free: 0.0,
            disk_free: 0.0,
            written: Vec::new(),
            cycle_left: 0,
            stats: CacheStats::default(),
        })
    }

    pub fn params(&self) -> CacheParams {
        self.params
    }

    pub fn throttle(&self) -> ThrottleModel {
        self.throttle
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = CacheStats { flush_onset: self.stats.flush_onset, ..CacheStats::default() };
    }

    /// Bytes whose cached content differs from the backing store.
    pub fn dirty_bytes(&self) -> u64 {
        let live = self.inflight.is_some_and(|w| !w.orphan);
        (self.dirty.len() as u64 + u64::from(live)) * self.params.page_size
    }

    pub fn resident_bytes(&self) -> u64 {
        self.pages.len() as u64 * self.params.page_size
    }

    pub fn is_resident(&self, key: PageKey) -> bool {
        self.pages.contains_key(&key)
    }

    pub fn is_dirty(&self, key: PageKey) -> bool {
        self.pages.get(&key).is_some_and(|p| !matches!(p.state, State::Clean(_)))
    }

    /// Time at which the storage stage is next idle.
    pub fn busy_until(&self) -> f64 {
        self.stage_free.max(self.inflight.map_or(0.0, |w| w.done))
    }

    /// Pages whose writeback completed since the last call.
    pub fn take_written(&mut self) -> Vec<PageKey> {
        std::mem::take(&mut self.written)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn over_limit(&self) -> bool {
        self.dirty_bytes() as f64 >= self.params.flush_limit()
    }

    fn pending_over_limit(&self) -> bool {
        (self.dirty.len() as u64 * self.params.page_size) as f64 >= self.params.flush_limit()
    }

    fn start_writeback(&mut self, key: PageKey, t: f64) {
        if self.stats.flush_onset.is_none() {
            // callers have already taken `key` off the dirty list
            self.stats.flush_onset = Some(self.dirty_bytes() + self.params.page_size);
        }
        let start = t.max(self.disk_free);
        let done = start + self.throttle.time(self.params.page_size, self.throttle.disk_write_bps);
        self.disk_free = done;
        if let Some(p) = self.pages.get_mut(&key) {
            p.state = State::Writeback;
        }
        self.inflight = Some(Inflight { key, done, orphan: false });
    }

    fn maybe_start(&mut self, t: f64) {
        if self.inflight.is_none() && (self.over_limit() || self.cycle_left > 0) {
            match self.dirty.pop_first() {
                Some((_, key)) => self.cycle_page(key, t),
                None => self.cycle_left = 0,
            }
        }
    }

    /// Starts a writeback on behalf of the threshold flusher.
    fn cycle_page(&mut self, key: PageKey, t: f64) {
        if self.cycle_left == 0 {
            self.cycle_left = self.params.flush_batch.div_ceil(self.params.page_size).max(1);
        }
        self.cycle_left -= 1;
        self.start_writeback(key, t);
    }

    fn finish_writeback(&mut self, w: Inflight) {
        self.inflight = None;
        let seq = self.next_seq();
        if let Some(p) = self.pages.get_mut(&w.key).filter(|_| !w.orphan) {
            self.stats.flushed_bytes += self.params.page_size;
            self.written.push(w.key);
            if p.redirty {
                p.redirty = false;
                p.state = State::Dirty(seq);
                self.dirty.insert(seq, w.key);
            } else {
                p.state = State::Clean(seq);
                self.clean.insert(seq, w.key);
            }
        }
        self.maybe_start(w.done);
    }

    /// Retires every writeback finished by `now`.
    pub fn settle(&mut self, now: f64) {
        while let Some(w) = self.inflight {
            if w.done > now {
                break;
            }
            self.finish_writeback(w);
        }
    }

    /// Lets the flusher run until it stops on its own; returns the time it
    /// went idle.
    pub fn settle_all(&mut self) -> f64 {
        let mut t = self.busy_until();
        while let Some(w) = self.inflight {
            t = t.max(w.done);
            self.finish_writeback(w);
        }
        t
    }

    fn wait_inflight(&mut self, t: f64) -> f64 {
        match self.inflight {
            Some(w) => {
                self.finish_writeback(w);
                t.max(w.done)
            }
            None => t,
        }
    }

    /// Frees one slot for a new page, evicting the least recently used clean
    /// page or waiting for a writeback.
    fn make_room(&mut self, mut t: f64) -> f64 {
        while self.pages.len() >= self.cap_pages {
            if let Some((_, key)) = self.clean.pop_first() {
                self.pages.remove(&key);
            } else if self.inflight.is_some() {
                t = self.wait_inflight(t);
            } else {
                let (_, key) = self.dirty.pop_first().expect("a full cache holds some page");
                self.start_writeback(key, t);
            }
        }
        t
    }

    /// `(page, offset within the page, bytes)` for each page touched.
    fn page_spans(&self, offset: u64, len: u64) -> impl Iterator<Item = (u64, u64, u64)> {
        let ps = self.params.page_size;
        let end = offset.saturating_add(len);
        let first = offset / ps;
        let last = if len == 0 { first } else { (end - 1) / ps + 1 };
        (first..last).map(move |p| {
            let lo = offset.max(p * ps);
            let hi = end.min((p + 1) * ps);
            (p, lo - p * ps, hi - lo)
        })
    }

    fn block(&self) -> u64 {
        self.params.page_size.div_ceil(64)
    }

    /// Blocks of a page covered by `[lo, lo + len)`.
    fn mask(&self, lo: u64, len: u64) -> u64 {
        if len == 0 {
            return 0;
        }
        let b = self.block();
        let (first, last) = (lo / b, (lo + len - 1) / b);
        let upto = if last >= 63 { u64::MAX } else { (1u64 << (last + 1)) - 1 };
        upto & !((1u64 << first) - 1)
    }

    /// Bytes of `[lo, lo + len)` that fall in the blocks of `missing`.
    fn bytes_in(&self, missing: u64, lo: u64, len: u64) -> u64 {
        let b = self.block();
        (0..64u64)
            .filter(|i| missing & (1 << i) != 0)
            .map(|i| (lo + len).min((i + 1) * b).saturating_sub(lo.max(i * b)))
            .sum()
    }

    /// Accepts `len` bytes at `offset` of `handle`, arriving at time `at`.
    pub fn write(&mut self, at: f64, handle: u64, offset: u64, len: u64) -> Span {
        let mut t = at.max(self.stage_free);
        self.settle(t);
        let start = t;
        let spans: Vec<_> = self.page_spans(offset, len).collect();
        for (page, lo, bytes) in spans {
            let key = (handle, page);
            let mask = self.mask(lo, bytes);
            if let Some(p) = self.pages.get_mut(&key) {
                p.loaded |= mask;
            }
            match self.pages.get(&key).map(|p| p.state) {
                Some(State::Dirty(_)) => {}
                Some(State::Writeback) => self.pages.get_mut(&key).unwrap().redirty = true,
                prior => {
                    while self.pending_over_limit() {
                        if self.inflight.is_some() {
                            t = self.wait_inflight(t);
                        } else {
                            let (_, k) = self.dirty.pop_first().expect("over the limit implies dirty pages");
                            self.cycle_page(k, t);
                        }
                    }
                    match prior {
                        Some(State::Clean(seq)) => {
                            self.clean.remove(&seq);
                        }
                        _ => {
                            t = self.make_room(t);
                            self.pages.insert(key, Page { state: State::Writeback, redirty: false, loaded: mask });
                        }
                    }
                    let seq = self.next_seq();
                    self.pages.get_mut(&key).unwrap().state = State::Dirty(seq);
                    self.dirty.insert(seq, key);
                    self.maybe_start(t);
                }
            }
            t += self.throttle.time(bytes, self.throttle.cache_write_bps);
            self.settle(t);
        }
        self.stage_free = t;
        Span { start, done: t }
    }

    /// Serves `len` bytes at `offset`; `streams` is the number of reader
    /// streams currently hitting this daemon.
    pub fn read(&mut self, at: f64, handle: u64, offset: u64, len: u64, streams: usize) -> ReadSpan {
        let mut t = at.max(self.stage_free);
        self.settle(t);
        let start = t;
        let mut out = ReadSpan { start, ..ReadSpan::default() };
        let disk_rate = if streams > 1 {
            self.throttle.disk_read_bps * self.throttle.concurrent_read_penalty
        } else {
            self.throttle.disk_read_bps
        };
        let spans: Vec<_> = self.page_spans(offset, len).collect();
        for (page, lo, bytes) in spans {
            let key = (handle, page);
            let mask = self.mask(lo, bytes);
            match self.pages.get(&key).map(|p| (p.state, p.loaded)) {
                Some((state, loaded)) => {
                    if let State::Clean(seq) = state {
                        self.clean.remove(&seq);
                        let seq = self.next_seq();
                        self.pages.get_mut(&key).unwrap().state = State::Clean(seq);
                        self.clean.insert(seq, key);
                    }
                    // parts of a resident page never loaded come from disk
                    let miss = self.bytes_in(mask & !loaded, lo, bytes);
                    t += self.throttle.time(bytes - miss, self.throttle.cache_read_bps);
                    if miss > 0 {
                        let begin = t.max(self.disk_free);
                        t = begin + self.throttle.time(miss, disk_rate);
                        self.disk_free = t;
                        self.pages.get_mut(&key).unwrap().loaded |= mask;
                    }
                    out.hit_bytes += bytes - miss;
                    out.miss_bytes += miss;
                }
                None => {
                    t = self.make_room(t);
                    let begin = t.max(self.disk_free);
                    t = begin + self.throttle.time(bytes, disk_rate);
                    self.disk_free = t;
                    let seq = self.next_seq();
                    self.pages.insert(key, Page { state: State::Clean(seq), redirty: false, loaded: mask });
                    self.clean.insert(seq, key);
                    out.miss_bytes += bytes;
                }
            }
            self.settle(t);
        }
        self.stage_free = t;
        self.stats.hit_bytes += out.hit_bytes;
        self.stats.miss_bytes += out.miss_bytes;
        out.done = t;
        out
    }

    /// Writes back every dirty page of `handle` (all handles for `None`).
    /// Pages stay resident and clean. Returns the completion time and the
    /// number of bytes written.
    pub fn flush(&mut self, at: f64, handle: Option<u64>) -> (f64, u64) {
        let mut t = at.max(self.stage_free);
        self.settle(t);
        t = self.wait_inflight(t);
        let in_scope = |k: &PageKey| handle.is_none_or(|h| k.0 == h);
        let mut bytes = 0;
        loop {
            if self.inflight.is_some() {
                t = self.wait_inflight(t);
                continue;
            }
            let Some((&seq, &key)) = self.dirty.iter().find(|(_, k)| in_scope(k)) else {
                break;
            };
            self.dirty.remove(&seq);
            self.start_writeback(key, t);
            t = self.wait_inflight(t);
            bytes += self.params.page_size;
        }
        self.stage_free = t;
        (t, bytes)
    }

    /// Forgets every page of `handle`. A writeback in flight for it still
    /// finishes but is not reported by [`take_written`](Self::take_written).
    pub fn remove(&mut self, handle: u64) {
        let keys: Vec<PageKey> = self.pages.keys().filter(|k| k.0 == handle).copied().collect();
        for key in keys {
            match self.pages.remove(&key).map(|p| p.state) {
                Some(State::Clean(seq)) => {
                    self.clean.remove(&seq);
                }
                Some(State::Dirty(seq)) => {
                    self.dirty.remove(&seq);
                }
                _ => {}
            }
        }
        self.written.retain(|k| k.0 != handle);
        if let Some(w) = self.inflight.as_mut().filter(|w| w.key.0 == handle) {
            w.orphan = true;
        }
    }

    /// Dirty pages of one handle, in no particular order.
    pub fn dirty_pages(&self, handle: Option<u64>) -> Vec<PageKey> {
        self.pages
            .iter()
            .filter(|(k, p)| handle.is_none_or(|h| k.0 == h) && !matches!(p.state, State::Clean(_)))
            .map(|(k, _)| *k)
            .collect()
    }
}
