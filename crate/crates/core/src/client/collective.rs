//! Collective reads and writes across a fixed group of ranks.
//!
//! Every rank of the group calls the same operation with its own offset and
//! buffer. The outcome equals running each rank's independent call in rank
//! order: where requests overlap, the higher rank's bytes win. Either every
//! rank sees success or every rank sees an error.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc::{channel, Receiver};
use std::sync::Arc;
use std::time::Duration;

use super::{Client, ClientError, FileHandle};
use crate::layout::{logical_to_physical, view_to_file, Extent, PhysExtent};
use crate::rpc::DEFAULT_TIMEOUT;
use crate::transport::{Datagram, NodeId, Registration, Transport};
use crate::wire::{self, Direction, GatherEntry, Reader, IOD_HEADER_LEN, RESPONSE_HEADER_LEN};

/// How aggregator file domains are cut in two-phase I/O.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Align {
    /// Domain boundaries fall on stripe boundaries.
    Stripe,
    /// The accessed range is split evenly, ignoring the stripe.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollectiveMode {
    TwoPhase(Align),
    DiskDirected,
}

const FRAME: usize = 5;

/// One rank's end of a group; owns the rank's exchange endpoint.
pub struct GroupMember {
    rank: usize,
    peers: Arc<Vec<NodeId>>,
    index: Arc<HashMap<NodeId, usize>>,
    transport: Arc<dyn Transport>,
    rx: Receiver<Datagram>,
    step: u32,
    partial: HashMap<usize, Vec<u8>>,
    done: HashMap<(u32, usize), Vec<u8>>,
    timeout: Duration,
    _reg: Registration,
}

/// Registers an exchange endpoint for every id in `ids`; member `k` is rank `k`.
pub fn form_group(transport: Arc<dyn Transport>, ids: Vec<NodeId>) -> Result<Vec<GroupMember>, ClientError> {
    let peers = Arc::new(ids);
    let index: Arc<HashMap<NodeId, usize>> = Arc::new(peers.iter().enumerate().map(|(r, &id)| (id, r)).collect());
    if index.len() != peers.len() {
        return Err(ClientError::Collective("duplicate ids in group".into()));
    }
    let mut out = Vec::with_capacity(peers.len());
    for (rank, &id) in peers.iter().enumerate() {
        let (tx, rx) = channel();
        let reg = transport.register(
            id,
            Arc::new(move |d: Datagram| {
                let _ = tx.send(d);
            }),
        )?;
        out.push(GroupMember {
            rank,
            peers: peers.clone(),
            index: index.clone(),
            transport: transport.clone(),
            rx,
            step: 0,
            partial: HashMap::new(),
            done: HashMap::new(),
            timeout: DEFAULT_TIMEOUT,
            _reg: reg,
        });
    }
    Ok(out)
}

impl GroupMember {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.peers.len()
    }

    /// Sends `out[k]` to rank `k` and returns what every rank sent here.
    pub fn alltoall(&mut self, mut out: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, ClientError> {
        assert_eq!(out.len(), self.size(), "one message per rank");
        let step = self.step;
        self.step += 1;
        let me = self.peers[self.rank];
        let room = self.transport.mtu() - FRAME;
        for (r, msg) in out.iter().enumerate() {
            if r == self.rank {
                continue;
            }
            let mut chunks = msg.chunks(room).peekable();
            if chunks.peek().is_none() {
                self.transport.send(me, self.peers[r], &frame(step, true, &[]))?;
            }
            while let Some(c) = chunks.next() {
                self.transport.send(me, self.peers[r], &frame(step, chunks.peek().is_none(), c))?;
            }
        }
        let mut got: Vec<Option<Vec<u8>>> = vec![None; self.size()];
        got[self.rank] = Some(std::mem::take(&mut out[self.rank]));
        for (r, slot) in got.iter_mut().enumerate() {
            if let Some(m) = self.done.remove(&(step, r)) {
                *slot = Some(m);
            }
        }
        while got.iter().any(Option::is_none) {
            let d = self
                .rx
                .recv_timeout(self.timeout)
                .map_err(|_| ClientError::Collective(format!("rank {} timed out in exchange {step}", self.rank)))?;
            let Some(&src) = self.index.get(&d.src) else {
                continue;
            };
            if d.payload.len() < FRAME {
                continue;
            }
            let s = u32::from_le_bytes(d.payload[..4].try_into().unwrap());
            let last = d.payload[4] != 0;
            let buf = self.partial.entry(src).or_default();
            buf.extend_from_slice(&d.payload[FRAME..]);
            if last {
                let msg = self.partial.remove(&src).unwrap_or_default();
                if s == step {
                    got[src] = Some(msg);
                } else {
                    self.done.insert((s, src), msg);
                }
            }
        }
        Ok(got.into_iter().map(Option::unwrap_or_default).collect())
    }

    /// Same message to everyone.
    pub fn allgather(&mut self, msg: Vec<u8>) -> Result<Vec<Vec<u8>>, ClientError> {
        self.alltoall(vec![msg; self.size()])
    }

    pub fn barrier(&mut self) -> Result<(), ClientError> {
        self.allgather(Vec::new()).map(|_| ())
    }

    /// Shares each rank's outcome; fails everywhere if any rank failed.
    fn agree<T>(&mut self, local: Result<T, ClientError>) -> Result<T, ClientError> {
        let msg = match &local {
            Ok(_) => vec![1],
            Err(e) => {
                let mut m = vec![0];
                m.extend_from_slice(e.to_string().as_bytes());
                m
            }
        };
        let all = self.allgather(msg)?;
        for (r, m) in all.iter().enumerate() {
            if m.first() != Some(&1) {
                if r == self.rank {
                    return local;
                }
                let why = String::from_utf8_lossy(m.get(1..).unwrap_or_default());
                return Err(ClientError::Collective(format!("rank {r}: {why}")));
            }
        }
        local
    }
}

fn frame(step: u32, last: bool, chunk: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(FRAME + chunk.len());
    f.extend_from_slice(&step.to_le_bytes());
    f.push(u8::from(last));
    f.extend_from_slice(chunk);
    f
}

fn put64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_extents(w: &mut Vec<u8>, ext: &[(u64, u64)]) {
    w.extend_from_slice(&(ext.len() as u32).to_le_bytes());
    for &(o, l) in ext {
        put64(w, o);
        put64(w, l);
    }
}

fn get_extents(r: &mut Reader) -> Result<Vec<(u64, u64)>, ClientError> {
    let n = r.u32()?;
    (0..n).map(|_| Ok((r.u64()?, r.u64()?))).collect()
}

/// File extents of a view range, each with its position in the caller's buffer.
fn located(extents: &[Extent]) -> Vec<(u64, u64, u64)> {
    let mut pos = 0;
    extents
        .iter()
        .map(|e| {
            let r = (e.offset, e.length, pos);
            pos += e.length;
            r
        })
        .collect()
}

/// Merges intervals into sorted, disjoint runs.
fn union(mut ivs: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    ivs.retain(|&(_, l)| l > 0);
    ivs.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (o, l) in ivs {
        match out.last_mut() {
            Some((lo, ll)) if o <= *lo + *ll => *ll = (*ll).max(o + l - *lo),
            _ => out.push((o, l)),
        }
    }
    out
}

/// Aggregator file domains: `p` consecutive ranges covering `[lo, hi)`.
fn domains(lo: u64, hi: u64, p: usize, unit: u64) -> Vec<(u64, u64)> {
    let base = lo - lo % unit;
    let span = hi.saturating_sub(base);
    let per = span.div_ceil(p as u64).div_ceil(unit).max(1) * unit;
    (0..p as u64)
        .map(|a| {
            let s = (base + a * per).clamp(lo, hi);
            let e = (base + (a + 1) * per).clamp(lo, hi);
            (s, e)
        })
        .collect()
}

/// Global accessed range, or None when no rank touches the file.
fn bounds(g: &mut GroupMember, mine: &[(u64, u64, u64)]) -> Result<Option<(u64, u64)>, ClientError> {
    let lo = mine.iter().map(|e| e.0).min().unwrap_or(u64::MAX);
    let hi = mine.iter().map(|e| e.0 + e.1).max().unwrap_or(0);
    let mut m = Vec::with_capacity(16);
    put64(&mut m, lo);
    put64(&mut m, hi);
    let (mut glo, mut ghi) = (u64::MAX, 0);
    for b in g.allgather(m)? {
        let mut r = Reader::new(&b);
        glo = glo.min(r.u64()?);
        ghi = ghi.max(r.u64()?);
    }
    Ok((glo < ghi).then_some((glo, ghi)))
}

fn plan_extents(h: &FileHandle, offset: u64, len: u64) -> Result<Vec<(u64, u64, u64)>, ClientError> {
    if len == 0 {
        return Ok(Vec::new());
    }
    Ok(located(&view_to_file(&h.view, offset, len)?))
}

/// Collective write of `data` at view offset `offset`; returns bytes written.
pub fn collective_write(
    client: &Client,
    g: &mut GroupMember,
    h: &mut FileHandle,
    offset: u64,
    data: &[u8],
    mode: CollectiveMode,
) -> Result<u64, ClientError> {
    let mine = g.agree(h.check().and_then(|_| plan_extents(h, offset, data.len() as u64)))?;
    let high = match mode {
        CollectiveMode::TwoPhase(align) => two_phase_write(client, g, h, &mine, data, align)?,
        CollectiveMode::DiskDirected => disk_directed_write(client, g, h, &mine, data)?,
    };
    client.note_size(h, high)?;
    Ok(data.len() as u64)
}

/// Collective read of up to `len` bytes at view offset `offset`.
pub fn collective_read(
    client: &Client,
    g: &mut GroupMember,
    h: &mut FileHandle,
    offset: u64,
    len: u64,
    mode: CollectiveMode,
) -> Result<Vec<u8>, ClientError> {
    let planned = h.check().and_then(|_| {
        let n = client.readable(h, offset, len)?;
        Ok((n, plan_extents(h, offset, n)?))
    });
    let (n, mine) = g.agree(planned)?;
    let mut out = vec![0u8; n as usize];
    match mode {
        CollectiveMode::TwoPhase(align) => two_phase_read(client, g, h, &mine, &mut out, align)?,
        CollectiveMode::DiskDirected => disk_directed_read(client, g, h, &mine, &mut out)?,
    }
    Ok(out)
}

fn unit_for(h: &FileHandle, align: Align) -> u64 {
    match align {
        Align::Stripe => h.meta.dist.stripe_unit().unwrap_or(1),
        Align::Naive => 1,
    }
}

/// Pieces of `mine` that fall inside `[s, e)`, as (file offset, len, buf pos).
fn clip(mine: &[(u64, u64, u64)], s: u64, e: u64) -> Vec<(u64, u64, u64)> {
    mine.iter()
        .filter_map(|&(o, l, p)| {
            let a = o.max(s);
            let b = (o + l).min(e);
            (a < b).then(|| (a, b - a, p + (a - o)))
        })
        .collect()
}

fn two_phase_write(
    client: &Client,
    g: &mut GroupMember,
    h: &FileHandle,
    mine: &[(u64, u64, u64)],
    data: &[u8],
    align: Align,
) -> Result<u64, ClientError> {
    let Some((lo, hi)) = bounds(g, mine)? else {
        return Ok(0);
    };
    let doms = domains(lo, hi, g.size(), unit_for(h, align));
    let msgs = doms
        .iter()
        .map(|&(s, e)| {
            let part = clip(mine, s, e);
            let mut m = Vec::new();
            put_extents(&mut m, &part.iter().map(|&(o, l, _)| (o, l)).collect::<Vec<_>>());
            for &(_, l, p) in &part {
                m.extend_from_slice(&data[p as usize..(p + l) as usize]);
            }
            m
        })
        .collect();
    let got = g.alltoall(msgs)?;

    // aggregator: apply in rank order, then write the merged runs
    let local = (|| {
        let mut pieces = Vec::new();
        for m in &got {
            let mut r = Reader::new(m);
            let ext = get_extents(&mut r)?;
            let mut body = r.rest();
            for (o, l) in ext {
                let (chunk, rest) = body.split_at(l as usize);
                pieces.push((o, chunk));
                body = rest;
            }
        }
        let runs = union(pieces.iter().map(|&(o, c)| (o, c.len() as u64)).collect());
        let mut starts = Vec::with_capacity(runs.len());
        let mut total = 0u64;
        for &(_, l) in &runs {
            starts.push(total);
            total += l;
        }
        let mut buf = vec![0u8; total as usize];
        for (o, c) in pieces {
            let k = runs.partition_point(|&(ro, _)| ro <= o) - 1;
            let at = (starts[k] + o - runs[k].0) as usize;
            buf[at..at + c.len()].copy_from_slice(c);
        }
        let extents: Vec<Extent> = runs.iter().map(|&(o, l)| Extent::file(o, l)).collect();
        client.write_pieces(&h.meta, &client.pieces(&h.meta.dist, &extents), &buf)
    })();
    g.agree(local)?;
    Ok(hi)
}

fn two_phase_read(
    client: &Client,
    g: &mut GroupMember,
    h: &FileHandle,
    mine: &[(u64, u64, u64)],
    out: &mut [u8],
    align: Align,
) -> Result<(), ClientError> {
    let Some((lo, hi)) = bounds(g, mine)? else {
        return Ok(());
    };
    let doms = domains(lo, hi, g.size(), unit_for(h, align));
    let parts: Vec<Vec<(u64, u64, u64)>> = doms.iter().map(|&(s, e)| clip(mine, s, e)).collect();
    let msgs = parts
        .iter()
        .map(|part| {
            let mut m = Vec::new();
            put_extents(&mut m, &part.iter().map(|&(o, l, _)| (o, l)).collect::<Vec<_>>());
            m
        })
        .collect();
    let asks = g.alltoall(msgs)?;

    let served: Result<Vec<Vec<u8>>, ClientError> = (|| {
        let wanted: Vec<Vec<(u64, u64)>> =
            asks.iter().map(|m| get_extents(&mut Reader::new(m))).collect::<Result<_, _>>()?;
        let runs = union(wanted.iter().flatten().copied().collect());
        let extents: Vec<Extent> = runs.iter().map(|&(o, l)| Extent::file(o, l)).collect();
        let mut starts = Vec::with_capacity(runs.len());
        let mut total = 0u64;
        for &(_, l) in &runs {
            starts.push(total);
            total += l;
        }
        let mut buf = vec![0u8; total as usize];
        client.read_pieces(&h.meta, &client.pieces(&h.meta.dist, &extents), &mut buf)?;
        Ok(wanted
            .iter()
            .map(|ext| {
                let mut m = vec![1u8];
                for &(o, l) in ext {
                    let k = runs.partition_point(|&(ro, _)| ro <= o) - 1;
                    let at = (starts[k] + o - runs[k].0) as usize;
                    m.extend_from_slice(&buf[at..at + l as usize]);
                }
                m
            })
            .collect::<Vec<_>>())
    })();
    let replies = match &served {
        Ok(v) => v.clone(),
        Err(e) => vec![[&[0u8][..], e.to_string().as_bytes()].concat(); g.size()],
    };
    let back = g.alltoall(replies)?;
    let local = (|| {
        for (a, m) in back.iter().enumerate() {
            if m.first() != Some(&1) {
                let why = String::from_utf8_lossy(m.get(1..).unwrap_or_default());
                return Err(ClientError::Collective(format!("aggregator {a}: {why}")));
            }
            let mut body = &m[1..];
            for &(_, l, p) in &parts[a] {
                let (chunk, rest) = body.split_at(l as usize);
                out[p as usize..(p + l) as usize].copy_from_slice(chunk);
                body = rest;
            }
        }
        Ok(())
    })();
    g.agree(served.and(local))
}

/// Physical pieces of a rank's extents, in buffer order.
fn phys_of(h: &FileHandle, mine: &[(u64, u64, u64)]) -> Vec<PhysExtent> {
    mine.iter().flat_map(|&(o, l, _)| logical_to_physical(o, l, &h.meta.dist)).collect()
}

fn put_phys(m: &mut Vec<u8>, phys: &[PhysExtent]) {
    m.extend_from_slice(&(phys.len() as u32).to_le_bytes());
    for p in phys {
        m.extend_from_slice(&p.iod.to_le_bytes());
        put64(m, p.sub_offset);
        put64(m, p.length);
    }
}

fn get_phys(r: &mut Reader) -> Result<Vec<(u32, u64, u64)>, ClientError> {
    let n = r.u32()?;
    (0..n).map(|_| Ok((r.u32()?, r.u64()?, r.u64()?))).collect()
}

/// One GATHER request being filled.
#[derive(Default)]
struct Batch {
    entries: Vec<GatherEntry>,
    data: Vec<u8>,
    /// (requester, position in its buffer) per entry
    dest: Vec<(usize, u64)>,
    bytes: u64,
}

/// Cuts per-daemon entry lists into GATHER requests that fit the transport.
/// `items` are (requester, sub offset, length, requester buffer position,
/// write data or empty).
fn batches(mtu: usize, write: bool, items: Vec<(usize, u64, u64, u64, &[u8])>) -> Vec<Batch> {
    let req_room = (mtu - IOD_HEADER_LEN) as u64;
    let resp_room = (mtu - RESPONSE_HEADER_LEN - 1) as u64;
    let entry = wire::GATHER_ENTRY_LEN as u64;
    let mut out = vec![Batch::default()];
    for (rank, mut sub, mut len, mut pos, mut data) in items {
        while len > 0 {
            let cur = out.last_mut().unwrap();
            let used = entry * cur.entries.len() as u64 + if write { cur.bytes } else { 0 };
            let free = if write {
                req_room.saturating_sub(used + entry)
            } else if used + entry > req_room {
                0
            } else {
                resp_room - cur.bytes
            };
            if free == 0 {
                out.push(Batch::default());
                continue;
            }
            let take = free.min(len);
            cur.entries.push(GatherEntry { requester: rank as u32, sub_offset: sub, length: take });
            cur.dest.push((rank, pos));
            if write {
                cur.data.extend_from_slice(&data[..take as usize]);
                data = &data[take as usize..];
            }
            cur.bytes += take;
            sub += take;
            len -= take;
            pos += take;
        }
    }
    out.retain(|b| !b.entries.is_empty());
    out
}

fn disk_directed_write(
    client: &Client,
    g: &mut GroupMember,
    h: &FileHandle,
    mine: &[(u64, u64, u64)],
    data: &[u8],
) -> Result<u64, ClientError> {
    let mut msgs = vec![Vec::new(); g.size()];
    let phys = phys_of(h, mine);
    let m = &mut msgs[0];
    put64(m, mine.iter().map(|e| e.0 + e.1).max().unwrap_or(0));
    put_phys(m, &phys);
    m.extend_from_slice(data);
    let got = g.alltoall(msgs)?;

    let mut high = 0;
    let local = if g.rank() == 0 {
        (|| {
            let mut per_iod: BTreeMap<u32, Vec<(usize, u64, u64, u64, &[u8])>> = BTreeMap::new();
            for (rank, m) in got.iter().enumerate() {
                let mut r = Reader::new(m);
                high = high.max(r.u64()?);
                let ps = get_phys(&mut r)?;
                let mut body = r.rest();
                for (iod, sub, len) in ps {
                    let (chunk, rest) = body.split_at(len as usize);
                    per_iod.entry(iod).or_default().push((rank, sub, len, 0, chunk));
                    body = rest;
                }
            }
            let mtu = client.transport().mtu();
            let mut reqs = Vec::new();
            for (iod, items) in per_iod {
                let node = Client::node_of(&h.meta, iod)?;
                for b in batches(mtu, true, items) {
                    reqs.push((node, wire::encode_gather(h.meta.handle, Direction::Write, &b.entries, &b.data)));
                }
            }
            client.daemon_batch(reqs).into_iter().try_for_each(|r| r.map(|_| ()))
        })()
    } else {
        Ok(())
    };
    let mut verdict = Vec::new();
    put64(&mut verdict, high);
    let all = g.allgather(verdict)?;
    let high = Reader::new(&all[0]).u64()?;
    g.agree(local)?;
    Ok(high)
}

fn disk_directed_read(
    client: &Client,
    g: &mut GroupMember,
    h: &FileHandle,
    mine: &[(u64, u64, u64)],
    out: &mut [u8],
) -> Result<(), ClientError> {
    let mut msgs = vec![Vec::new(); g.size()];
    put_phys(&mut msgs[0], &phys_of(h, mine));
    let got = g.alltoall(msgs)?;

    let served: Result<Vec<Vec<u8>>, ClientError> = if g.rank() == 0 {
        (|| {
            let mut sizes = vec![0u64; got.len()];
            let mut per_iod: BTreeMap<u32, Vec<(usize, u64, u64, u64, &[u8])>> = BTreeMap::new();
            for (rank, m) in got.iter().enumerate() {
                for (iod, sub, len) in get_phys(&mut Reader::new(m))? {
                    per_iod.entry(iod).or_default().push((rank, sub, len, sizes[rank], &[]));
                    sizes[rank] += len;
                }
            }
            let mut bufs: Vec<Vec<u8>> = sizes.iter().map(|&n| vec![0u8; n as usize]).collect();
            let mtu = client.transport().mtu();
            let mut reqs = Vec::new();
            let mut plan = Vec::new();
            for (iod, items) in per_iod {
                let node = Client::node_of(&h.meta, iod)?;
                for b in batches(mtu, false, items) {
                    reqs.push((node, wire::encode_gather(h.meta.handle, Direction::Read, &b.entries, &[])));
                    plan.push(b);
                }
            }
            for (b, resp) in plan.iter().zip(client.daemon_batch(reqs)) {
                let resp = resp?;
                let mut body = resp.payload.get(1..).unwrap_or_default();
                if body.len() as u64 != b.bytes {
                    return Err(ClientError::Collective("short gather response".into()));
                }
                for (e, &(rank, pos)) in b.entries.iter().zip(&b.dest) {
                    let (chunk, rest) = body.split_at(e.length as usize);
                    bufs[rank][pos as usize..(pos + e.length) as usize].copy_from_slice(chunk);
                    body = rest;
                }
            }
            Ok(bufs)
        })()
    } else {
        Ok(Vec::new())
    };
    let replies = match &served {
        Ok(bufs) if g.rank() == 0 => bufs.iter().map(|b| [&[1u8][..], b].concat()).collect(),
        Ok(_) => vec![Vec::new(); g.size()],
        Err(e) => vec![[&[0u8][..], e.to_string().as_bytes()].concat(); g.size()],
    };
    let back = g.alltoall(replies)?;
    let m = &back[0];
    let local = if m.first() == Some(&1) && m.len() - 1 == out.len() {
        out.copy_from_slice(&m[1..]);
        Ok(())
    } else {
        Err(ClientError::Collective(format!(
            "coordinator: {}",
            String::from_utf8_lossy(m.get(1..).unwrap_or_default())
        )))
    };
    g.agree(served.map(|_| ()).and(local))
}
