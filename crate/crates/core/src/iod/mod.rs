//! I/O daemon: sparse sub-files behind a write-back page cache.

pub mod cache;
pub mod store;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheError, CacheModel, CacheParams, CacheStats, PageKey, ThrottleModel};
pub use store::{DirStore, MemStore, SubFileStore};

use crate::layout::{coalesce, Extent};
use crate::rpc::Service;
use crate::transport::NodeId;
use crate::wire::{self, Direction, GatherEntry, IodOp, IodRequest, Response, Status};

/// Largest single read a daemon will materialize.
pub const MAX_READ: u64 = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IodError {
    #[error("no sub-file for handle {0}")]
    NoFile(u64),
    #[error("sub-file {0} already exists")]
    Exists(u64),
    #[error("bad range: {0}")]
    Range(String),
    #[error("storage failure after {accepted} bytes: {msg}")]
    Storage { accepted: u64, msg: String },
    #[error("sub-file {0} is in use")]
    Busy(u64),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl IodError {
    pub fn status(&self) -> Status {
        match self {
            IodError::NoFile(_) => Status::NoFile,
            IodError::Exists(_) => Status::Exists,
            IodError::Range(_) | IodError::Cache(_) => Status::Range,
            IodError::Storage { .. } => Status::Storage,
            IodError::Busy(_) => Status::Busy,
        }
    }
}

fn storage(accepted: u64, e: std::io::Error) -> IodError {
    IodError::Storage { accepted, msg: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IodConfig {
    /// `None` keeps sub-files in memory.
    pub storage_dir: Option<PathBuf>,
    pub cache_capacity: u64,
    pub dirty_threshold: f64,
    pub page_size: u64,
    pub flush_batch: u64,
    pub throttle: ThrottleModel,
    /// Sleep so that wall time honours the throttle rates.
    pub wall_clock: bool,
}

impl Default for IodConfig {
    fn default() -> Self {
        let c = CacheParams::default();
        IodConfig {
            storage_dir: None,
            cache_capacity: c.capacity,
            dirty_threshold: c.dirty_threshold,
            page_size: c.page_size,
            flush_batch: c.flush_batch,
            throttle: ThrottleModel::disabled(),
            wall_clock: false,
        }
    }
}

impl IodConfig {
    pub fn cache_params(&self) -> CacheParams {
        CacheParams {
            capacity: self.cache_capacity,
            page_size: self.page_size,
            dirty_threshold: self.dirty_threshold,
            flush_batch: self.flush_batch,
        }
    }
}

/// Answer to STAT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SubFileStat {
    pub size: u64,
    pub resident_bytes: u64,
    pub dirty_bytes: u64,
    /// daemon-wide counters since start
    pub hit_bytes: u64,
    pub miss_bytes: u64,
}

impl SubFileStat {
    pub fn encode(&self) -> Vec<u8> {
        [self.size, self.resident_bytes, self.dirty_bytes, self.hit_bytes, self.miss_bytes]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, wire::WireError> {
        let mut r = wire::Reader::new(buf);
        let s = SubFileStat {
            size: r.u64()?,
            resident_bytes: r.u64()?,
            dirty_bytes: r.u64()?,
            hit_bytes: r.u64()?,
            miss_bytes: r.u64()?,
        };
        r.finish()?;
        Ok(s)
    }
}

/// Where the bytes of a read came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadResult {
    pub data: Vec<u8>,
    pub hit_bytes: u64,
    pub miss_bytes: u64,
}

impl ReadResult {
    pub fn from_cache(&self) -> bool {
        self.miss_bytes == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherResult {
    /// Write requests overlapped; later entries won.
    pub overlap: bool,
    /// Read data, entries concatenated in request order.
    pub data: Vec<u8>,
}

struct State {
    store: Box<dyn SubFileStore>,
    model: CacheModel,
    sizes: HashMap<u64, u64>,
    /// contents of pages the model reports dirty
    dirty_data: HashMap<PageKey, Vec<u8>>,
    pins: HashMap<u64, usize>,
}

/// One I/O daemon. All state sits behind a single lock.
pub struct IoDaemon {
    state: Mutex<State>,
    page_size: u64,
    wall_clock: bool,
    epoch: Instant,
}

impl IoDaemon {
    pub fn new(cfg: &IodConfig) -> Result<Self, IodError> {
        let store: Box<dyn SubFileStore> = match &cfg.storage_dir {
            Some(dir) => Box::new(DirStore::open(dir).map_err(|e| storage(0, e))?),
            None => Box::new(MemStore::new()),
        };
        Self::with_store(cfg, store)
    }

    pub fn with_store(cfg: &IodConfig, mut store: Box<dyn SubFileStore>) -> Result<Self, IodError> {
        let model = CacheModel::new(cfg.cache_params(), cfg.throttle)?;
        let mut sizes = HashMap::new();
        for h in store.handles().map_err(|e| storage(0, e))? {
            sizes.insert(h, store.len(h).map_err(|e| storage(0, e))?);
        }
        Ok(IoDaemon {
            state: Mutex::new(State { store, model, sizes, dirty_data: HashMap::new(), pins: HashMap::new() }),
            page_size: cfg.page_size,
            wall_clock: cfg.wall_clock && cfg.throttle.enabled,
            epoch: Instant::now(),
        })
    }

    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn pace(&self, done: f64) {
        if self.wall_clock {
            let wait = done - self.now();
            if wait > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
        }
    }

    pub fn create(&self, handle: u64) -> Result<(), IodError> {
        if handle == 0 {
            return Err(IodError::Range("handle 0 is reserved".into()));
        }
        let mut st = self.state.lock().unwrap();
        if st.sizes.contains_key(&handle) {
            return Err(IodError::Exists(handle));
        }
        st.store.create(handle).map_err(|e| storage(0, e))?;
        st.sizes.insert(handle, 0);
        Ok(())
    }

    pub fn remove(&self, handle: u64) -> Result<(), IodError> {
        let mut st = self.state.lock().unwrap();
        if !st.sizes.contains_key(&handle) {
            return Err(IodError::NoFile(handle));
        }
        if st.pins.get(&handle).copied().unwrap_or(0) > 0 {
            return Err(IodError::Busy(handle));
        }
        st.model.remove(handle);
        st.dirty_data.retain(|k, _| k.0 != handle);
        st.sizes.remove(&handle);
        st.store.remove(handle).map_err(|e| storage(0, e))
    }

    /// Marks `handle` in use; removal fails with busy until unpinned.
    pub fn pin(&self, handle: u64) -> Result<(), IodError> {
        let mut st = self.state.lock().unwrap();
        if !st.sizes.contains_key(&handle) {
            return Err(IodError::NoFile(handle));
        }
        *st.pins.entry(handle).or_default() += 1;
        Ok(())
    }

    pub fn unpin(&self, handle: u64) {
        let mut st = self.state.lock().unwrap();
        if let Some(n) = st.pins.get_mut(&handle) {
            *n -= 1;
            if *n == 0 {
                st.pins.remove(&handle);
            }
        }
    }

    pub fn write(&self, handle: u64, offset: u64, data: &[u8]) -> Result<u64, IodError> {
        let done = {
            let mut st = self.state.lock().unwrap();
            let st = &mut *st;
            if !st.sizes.contains_key(&handle) {
                return Err(IodError::NoFile(handle));
            }
            let end = offset
                .checked_add(data.len() as u64)
                .ok_or_else(|| IodError::Range(format!("write at {offset} overflows")))?;
            if data.is_empty() {
                return Ok(0);
            }
            let ps = self.page_size;
            let mut pos = offset;
            while pos < end {
                let page = pos / ps;
                let within = (pos - page * ps) as usize;
                let take = (ps - within as u64).min(end - pos) as usize;
                let buf = match st.dirty_data.entry((handle, page)) {
                    std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
                    std::collections::hash_map::Entry::Vacant(v) => {
                        let mut b = vec![0u8; ps as usize];
                        st.store.read_at(handle, page * ps, &mut b).map_err(|e| storage(pos - offset, e))?;
                        v.insert(b)
                    }
                };
                let src = (pos - offset) as usize;
                buf[within..within + take].copy_from_slice(&data[src..src + take]);
                pos += take as u64;
            }
            let size = st.sizes.get_mut(&handle).unwrap();
            *size = (*size).max(end);
            let span = st.model.write(self.now(), handle, offset, data.len() as u64);
            Self::drain(st, ps).map_err(|e| storage(data.len() as u64, e))?;
            span.done
        };
        self.pace(done);
        Ok(data.len() as u64)
    }

    /// Writes back pages the model has finished flushing.
    fn drain(st: &mut State, ps: u64) -> std::io::Result<()> {
        for key in st.model.take_written() {
            let size = st.sizes.get(&key.0).copied().unwrap_or(0);
            let start = key.1 * ps;
            let keep = st.model.is_dirty(key);
            let data = if keep { st.dirty_data.get(&key).cloned() } else { st.dirty_data.remove(&key) };
            if let Some(data) = data {
                let n = size.saturating_sub(start).min(ps) as usize;
                st.store.write_at(key.0, start, &data[..n])?;
            }
        }
        Ok(())
    }

    pub fn read(&self, handle: u64, offset: u64, len: u64) -> Result<ReadResult, IodError> {
        self.read_streams(handle, offset, len, 1)
    }

    /// Read accounting as if `streams` readers were active.
    pub fn read_streams(&self, handle: u64, offset: u64, len: u64, streams: usize) -> Result<ReadResult, IodError> {
        if len > MAX_READ {
            return Err(IodError::Range(format!("read of {len} bytes exceeds {MAX_READ}")));
        }
        offset.checked_add(len).ok_or_else(|| IodError::Range(format!("read at {offset} overflows")))?;
        let (result, done) = {
            let mut st = self.state.lock().unwrap();
            let st = &mut *st;
            if !st.sizes.contains_key(&handle) {
                return Err(IodError::NoFile(handle));
            }
            let span = st.model.read(self.now(), handle, offset, len, streams);
            let mut data = vec![0u8; len as usize];
            let ps = self.page_size;
            let mut pos = offset;
            let end = offset + len;
            while pos < end {
                let page = pos / ps;
                let within = (pos - page * ps) as usize;
                let take = (ps - within as u64).min(end - pos) as usize;
                let dst = &mut data[(pos - offset) as usize..(pos - offset) as usize + take];
                match st.dirty_data.get(&(handle, page)) {
                    Some(buf) => dst.copy_from_slice(&buf[within..within + take]),
                    None => st.store.read_at(handle, pos, dst).map_err(|e| storage(0, e))?,
                }
                pos += take as u64;
            }
            Self::drain(st, ps).map_err(|e| storage(0, e))?;
            (ReadResult { data, hit_bytes: span.hit_bytes, miss_bytes: span.miss_bytes }, span.done)
        };
        self.pace(done);
        Ok(result)
    }

    /// Writes dirty pages of `handle` (every handle for `None`) to the
    /// backing store; returns the bytes flushed.
    pub fn flush(&self, handle: Option<u64>) -> Result<u64, IodError> {
        let (bytes, done) = {
            let mut st = self.state.lock().unwrap();
            if let Some(h) = handle {
                if !st.sizes.contains_key(&h) {
                    return Err(IodError::NoFile(h));
                }
            }
            let (done, bytes) = st.model.flush(self.now(), handle);
            Self::drain(&mut st, self.page_size).map_err(|e| storage(0, e))?;
            (bytes, done)
        };
        self.pace(done);
        Ok(bytes)
    }

    /// Lets background writebacks run to completion.
    pub fn settle(&self) -> Result<(), IodError> {
        let mut st = self.state.lock().unwrap();
        st.model.settle_all();
        Self::drain(&mut st, self.page_size).map_err(|e| storage(0, e))
    }

    pub fn stat(&self, handle: u64) -> Result<SubFileStat, IodError> {
        let st = self.state.lock().unwrap();
        let size = *st.sizes.get(&handle).ok_or(IodError::NoFile(handle))?;
        let ps = self.page_size;
        let pages = size.div_ceil(ps);
        let resident = (0..pages).filter(|&p| st.model.is_resident((handle, p))).count() as u64;
        let dirty = st.model.dirty_pages(Some(handle)).len() as u64;
        let stats = st.model.stats();
        Ok(SubFileStat {
            size,
            resident_bytes: resident * ps,
            dirty_bytes: dirty * ps,
            hit_bytes: stats.hit_bytes,
            miss_bytes: stats.miss_bytes,
        })
    }

    pub fn dirty_bytes(&self) -> u64 {
        self.state.lock().unwrap().model.dirty_bytes()
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.state.lock().unwrap().model.stats()
    }

    /// Serves a whole list of requests against one sub-file in a single
    /// sorted pass. Writes are applied in list order, so on overlap the
    /// later entry wins.
    pub fn gather(
        &self,
        handle: u64,
        dir: Direction,
        entries: &[GatherEntry],
        data: &[u8],
    ) -> Result<GatherResult, IodError> {
        let total: u64 = entries.iter().map(|e| e.length).sum();
        let extents: Vec<Extent> = entries.iter().map(|e| Extent::on(0, e.sub_offset, e.length)).collect();
        let plan = coalesce(&extents);
        let overlap = !plan.overlaps.is_empty();
        self.pin(handle)?;
        let result = (|| match dir {
            Direction::Write => {
                if data.len() as u64 != total {
                    return Err(IodError::Range(format!("gather carries {} bytes for {total}", data.len())));
                }
                if overlap {
                    debug!("gather on {handle}: overlapping writes, later requests win");
                }
                let mut bufs: Vec<Vec<u8>> = plan.extents.iter().map(|x| vec![0u8; x.length as usize]).collect();
                let mut pos = 0usize;
                for e in entries {
                    let i = plan.extents.partition_point(|x| x.end() <= e.sub_offset);
                    let rel = (e.sub_offset - plan.extents[i].offset) as usize;
                    bufs[i][rel..rel + e.length as usize].copy_from_slice(&data[pos..pos + e.length as usize]);
                    pos += e.length as usize;
                }
                for (x, buf) in plan.extents.iter().zip(&bufs) {
                    self.write(handle, x.offset, buf)?;
                }
                Ok(GatherResult { overlap, data: Vec::new() })
            }
            Direction::Read => {
                if total > MAX_READ {
                    return Err(IodError::Range(format!("gather of {total} bytes exceeds {MAX_READ}")));
                }
                let streams = {
                    let mut r: Vec<u32> = entries.iter().map(|e| e.requester).collect();
                    r.sort_unstable();
                    r.dedup();
                    r.len()
                };
                let reads = plan
                    .extents
                    .iter()
                    .map(|x| self.read_streams(handle, x.offset, x.length, streams).map(|r| r.data))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut out = Vec::with_capacity(total as usize);
                for e in entries {
                    let i = plan.extents.partition_point(|x| x.end() <= e.sub_offset);
                    let rel = (e.sub_offset - plan.extents[i].offset) as usize;
                    out.extend_from_slice(&reads[i][rel..rel + e.length as usize]);
                }
                Ok(GatherResult { overlap, data: out })
            }
        })();
        self.unpin(handle);
        result
    }

    /// Decodes one request and produces the encoded response.
    pub fn handle_request(&self, request: &[u8], max_payload: usize) -> Vec<u8> {
        let req = match IodRequest::decode(request) {
            Ok(r) => r,
            Err(e) => return Response::error(Status::Range, 0, e.to_string()).encode(),
        };
        self.serve(&req, max_payload)
            .unwrap_or_else(|e| {
                let accepted = match &e {
                    IodError::Storage { accepted, .. } => *accepted,
                    _ => 0,
                };
                Response::error(e.status(), accepted, e.to_string())
            })
            .encode()
    }

    fn serve(&self, req: &IodRequest, max_payload: usize) -> Result<Response, IodError> {
        let room = max_payload.saturating_sub(wire::RESPONSE_HEADER_LEN) as u64;
        match req.op {
            IodOp::Create => self.create(req.handle).map(|_| Response::ok(0, Vec::new())),
            IodOp::Remove => self.remove(req.handle).map(|_| Response::ok(0, Vec::new())),
            IodOp::Write => {
                if req.payload.len() as u64 != req.length {
                    return Err(IodError::Range(format!(
                        "length {} but {} payload bytes",
                        req.length,
                        req.payload.len()
                    )));
                }
                self.write(req.handle, req.offset, &req.payload).map(|n| Response::ok(n, Vec::new()))
            }
            IodOp::Read => {
                if req.length > room {
                    return Err(IodError::Range(format!("read of {} exceeds a datagram", req.length)));
                }
                self.read(req.handle, req.offset, req.length).map(|r| Response::ok(r.data.len() as u64, r.data))
            }
            IodOp::Flush => {
                let scope = if req.handle == 0 { None } else { Some(req.handle) };
                self.flush(scope).map(|n| Response::ok(n, Vec::new()))
            }
            IodOp::Stat => self.stat(req.handle).map(|s| {
                let p = s.encode();
                Response::ok(p.len() as u64, p)
            }),
            IodOp::Gather => {
                let (dir, entries, data) = wire::decode_gather(req).map_err(|e| IodError::Range(e.to_string()))?;
                let total: u64 = entries.iter().map(|e| e.length).sum();
                if dir == Direction::Read && total + 1 > room {
                    return Err(IodError::Range(format!("gather of {total} bytes exceeds a datagram")));
                }
                let r = self.gather(req.handle, dir, &entries, data)?;
                let mut payload = Vec::with_capacity(1 + r.data.len());
                payload.push(u8::from(r.overlap));
                payload.extend_from_slice(&r.data);
                Ok(Response::ok(r.data.len() as u64, payload))
            }
        }
    }
}

/// Adapter that serves daemon requests over the transport.
pub struct IodService {
    pub daemon: Arc<IoDaemon>,
    pub max_payload: usize,
}

impl Service for IodService {
    fn handle(&mut self, src: NodeId, request: &[u8]) -> Vec<u8> {
        let resp = self.daemon.handle_request(request, self.max_payload);
        if resp.first().is_some_and(|&s| s != Status::Ok as u8) {
            warn!("iod request from {src} failed with status {}", resp[0]);
        }
        resp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KIB: u64 = 1024;
    const MIB: u64 = 1024 * KIB;

    fn daemon(capacity: u64, page: u64, thr: f64) -> IoDaemon {
        IoDaemon::new(&IodConfig {
            cache_capacity: capacity,
            page_size: page,
            dirty_threshold: thr,
            flush_batch: 0,
            ..IodConfig::default()
        })
        .unwrap()
    }

    fn pattern(n: usize, seed: u8) -> Vec<u8> {
        (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
    }

    #[test]
    fn admin_lifecycle() {
        let d = daemon(MIB, 4 * KIB, 0.4);
        d.create(5).unwrap();
        assert_eq!(d.create(5), Err(IodError::Exists(5)));
        assert_eq!(d.stat(5).unwrap().size, 0);
        d.write(5, 0, &vec![1u8; MIB as usize]).unwrap();
        assert_eq!(d.stat(5).unwrap().size, MIB);
        d.pin(5).unwrap();
        assert_eq!(d.remove(5), Err(IodError::Busy(5)));
        d.unpin(5);
        d.remove(5).unwrap();
        assert_eq!(d.read(5, 0, 1), Err(IodError::NoFile(5)));
        assert_eq!(d.remove(5), Err(IodError::NoFile(5)));
    }

    #[test]
    fn holes_read_as_zero() {
        let d = daemon(MIB, 4 * KIB, 0.4);
        d.create(1).unwrap();
        d.write(1, 10_000, b"abc").unwrap();
        let r = d.read(1, 9_998, 8).unwrap();
        assert_eq!(r.data, b"\0\0abc\0\0\0");
        assert_eq!(d.read(1, 1 << 40, 16).unwrap().data, vec![0; 16]);
    }

    #[test]
    fn read_after_write_comes_from_cache() {
        let d = daemon(MIB, 4 * KIB, 0.4);
        d.create(1).unwrap();
        d.write(1, 0, &pattern(20_000, 3)).unwrap();
        let r = d.read(1, 0, 20_000).unwrap();
        assert!(r.from_cache());
        assert_eq!(r.data, pattern(20_000, 3));
    }

    #[test]
    fn flush_makes_store_match_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = IodConfig {
            storage_dir: Some(dir.path().to_path_buf()),
            cache_capacity: 64 * MIB,
            page_size: 4 * KIB,
            ..IodConfig::default()
        };
        let d = IoDaemon::new(&cfg).unwrap();
        d.create(7).unwrap();
        assert_eq!(d.flush(None).unwrap(), 0);
        let data = pattern(100 * 4096, 1);
        d.write(7, 0, &data).unwrap();
        assert_eq!(d.dirty_bytes(), 100 * 4096);
        assert_eq!(d.flush(Some(7)).unwrap(), 100 * 4096);
        assert_eq!(d.dirty_bytes(), 0);
        assert_eq!(std::fs::read(dir.path().join("0000000000000007.sub")).unwrap(), data);
        let st = d.stat(7).unwrap();
        assert_eq!((st.resident_bytes, st.dirty_bytes), (100 * 4096, 0));
    }

    #[test]
    fn restart_finds_flushed_subfiles() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = IodConfig { storage_dir: Some(dir.path().to_path_buf()), ..IodConfig::default() };
        {
            let d = IoDaemon::new(&cfg).unwrap();
            d.create(3).unwrap();
            d.write(3, 5, b"xyz").unwrap();
            d.flush(None).unwrap();
        }
        let d = IoDaemon::new(&cfg).unwrap();
        assert_eq!(d.stat(3).unwrap().size, 8);
        assert_eq!(d.read(3, 5, 3).unwrap().data, b"xyz");
    }

    #[test]
    fn adjacent_gather_reads_are_one_pass() {
        let d = daemon(MIB, 64 * KIB, 0.4);
        d.create(1).unwrap();
        let data = pattern(64 * 1024, 9);
        d.write(1, 0, &data).unwrap();
        let entries: Vec<GatherEntry> = (0..4u32)
            .rev()
            .map(|r| GatherEntry { requester: r, sub_offset: u64::from(r) * 16 * KIB, length: 16 * KIB })
            .collect();
        let extents: Vec<Extent> = entries.iter().map(|e| Extent::on(0, e.sub_offset, e.length)).collect();
        assert_eq!(coalesce(&extents).extents, vec![Extent::on(0, 0, 64 * KIB)]);
        let g = d.gather(1, Direction::Read, &entries, &[]).unwrap();
        assert!(!g.overlap);
        let mut expect = Vec::new();
        for r in (0..4usize).rev() {
            expect.extend_from_slice(&data[r * 16384..(r + 1) * 16384]);
        }
        assert_eq!(g.data, expect);
    }

    #[test]
    fn overlapping_gather_writes_later_wins() {
        let d = daemon(MIB, 4 * KIB, 0.4);
        d.create(1).unwrap();
        let entries = [
            GatherEntry { requester: 0, sub_offset: 0, length: 4 },
            GatherEntry { requester: 1, sub_offset: 2, length: 4 },
        ];
        let g = d.gather(1, Direction::Write, &entries, b"aaaabbbb").unwrap();
        assert!(g.overlap);
        assert_eq!(d.read(1, 0, 6).unwrap().data, b"aabbbb");
    }

    #[test]
    fn wire_requests() {
        let d = daemon(MIB, 4 * KIB, 0.4);
        let call = |req: Vec<u8>| Response::decode(&d.handle_request(&req, 65536)).unwrap();
        assert_eq!(call(wire::encode_iod(IodOp::Create, 2, 0, 0, &[])).status, Status::Ok);
        assert_eq!(call(wire::encode_iod(IodOp::Create, 2, 0, 0, &[])).status, Status::Exists);
        let w = call(wire::encode_iod(IodOp::Write, 2, 100, 3, b"xyz"));
        assert_eq!((w.status, w.length), (Status::Ok, 3));
        assert_eq!(call(wire::encode_iod(IodOp::Write, 2, 100, 4, b"xyz")).status, Status::Range);
        let r = call(wire::encode_iod(IodOp::Read, 2, 99, 5, &[]));
        assert_eq!(r.payload, b"\0xyz\0");
        assert_eq!(call(wire::encode_iod(IodOp::Read, 2, 0, 65536, &[])).status, Status::Range);
        let s = call(wire::encode_iod(IodOp::Stat, 2, 0, 0, &[]));
        assert_eq!(SubFileStat::decode(&s.payload).unwrap().size, 103);
        let f = call(wire::encode_iod(IodOp::Flush, 0, 0, 0, &[]));
        assert_eq!((f.status, f.length), (Status::Ok, 4096));
        assert_eq!(call(wire::encode_iod(IodOp::Read, 9, 0, 1, &[])).status, Status::NoFile);
        assert_eq!(call(vec![99]).status, Status::Range);
        let g = call(wire::encode_gather(
            2,
            Direction::Read,
            &[GatherEntry { requester: 0, sub_offset: 100, length: 2 }],
            &[],
        ));
        assert_eq!(g.payload, b"\0xy");
        assert_eq!(call(wire::encode_iod(IodOp::Remove, 2, 0, 0, &[])).status, Status::Ok);
    }

    #[derive(Clone, Debug)]
    enum Op {
        Write(u64, u64, u8),
        Read(u64, u64),
        Flush,
        Settle,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            5 => (0..40_000u64, 1..9000u64, any::<u8>()).prop_map(|(o, l, s)| Op::Write(o, l, s)),
            3 => (0..45_000u64, 0..9000u64).prop_map(|(o, l)| Op::Read(o, l)),
            1 => Just(Op::Flush),
            1 => Just(Op::Settle),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn read_your_writes_against_reference(ops in prop::collection::vec(op(), 1..60), thr in 0.05..1.0f64) {
            // a tiny cache forces flushing and eviction between operations
            let d = daemon(16 * KIB, KIB, thr);
            d.create(1).unwrap();
            let mut reference: Vec<u8> = Vec::new();
            for o in ops {
                match o {
                    Op::Write(off, len, seed) => {
                        let data = pattern(len as usize, seed);
                        d.write(1, off, &data).unwrap();
                        let end = (off + len) as usize;
                        if reference.len() < end { reference.resize(end, 0); }
                        reference[off as usize..end].copy_from_slice(&data);
                    }
                    Op::Read(off, len) => {
                        let got = d.read(1, off, len).unwrap().data;
                        let mut expect = vec![0u8; len as usize];
                        for (i, b) in expect.iter_mut().enumerate() {
                            *b = reference.get(off as usize + i).copied().unwrap_or(0);
                        }
                        prop_assert_eq!(got, expect);
                    }
                    Op::Flush => { d.flush(None).unwrap(); }
                    Op::Settle => d.settle().unwrap(),
                }
                // dirty accounting: exactly the pages held apart from the store
                let st = d.state.lock().unwrap();
                let mut held: Vec<PageKey> = st.dirty_data.keys().copied().collect();
                let mut dirty = st.model.dirty_pages(None);
                held.sort();
                dirty.sort();
                prop_assert_eq!(held, dirty);
                for (&(h, p), buf) in &st.dirty_data {
                    prop_assert_eq!(h, 1);
                    let lo = (p * KIB) as usize;
                    for (i, b) in buf.iter().enumerate() {
                        prop_assert_eq!(*b, reference.get(lo + i).copied().unwrap_or(0));
                    }
                }
            }
            prop_assert_eq!(d.stat(1).unwrap().size, reference.len() as u64);
        }

        #[test]
        fn gather_equals_one_by_one(
            reqs in prop::collection::vec((0..64u32, 0..20_000u64, 1..3000u64), 1..24),
            write in any::<bool>(),
        ) {
            let a = daemon(MIB, 4 * KIB, 0.4);
            let b = daemon(MIB, 4 * KIB, 0.4);
            for d in [&a, &b] {
                d.create(1).unwrap();
                d.write(1, 0, &pattern(25_000, 77)).unwrap();
            }
            let entries: Vec<GatherEntry> = reqs.iter().map(|&(r, o, l)| GatherEntry { requester: r, sub_offset: o, length: l }).collect();
            if write {
                let mut data = Vec::new();
                for (i, e) in entries.iter().enumerate() {
                    data.extend(pattern(e.length as usize, i as u8));
                }
                a.gather(1, Direction::Write, &entries, &data).unwrap();
                let mut pos = 0;
                for e in &entries {
                    b.write(1, e.sub_offset, &data[pos..pos + e.length as usize]).unwrap();
                    pos += e.length as usize;
                }
                prop_assert_eq!(a.read(1, 0, 30_000).unwrap().data, b.read(1, 0, 30_000).unwrap().data);
            } else {
                let g = a.gather(1, Direction::Read, &entries, &[]).unwrap();
                let mut expect = Vec::new();
                for e in &entries {
                    expect.extend(b.read(1, e.sub_offset, e.length).unwrap().data);
                }
                prop_assert_eq!(g.data, expect);
            }
        }
    }
}
