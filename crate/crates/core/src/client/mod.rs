//! Client library: files, views and striped reads and writes.
//!
//! Data requests go straight to the daemons; the manager is contacted only
//! to create, open, resize and close.

pub mod collective;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::iod::SubFileStat;
use crate::layout::{logical_to_physical, view_to_file, Distribution, Extent, LayoutError, PhysExtent, View};
use crate::metamgr::{partition_of, FileMeta};
use crate::rpc::{Endpoint, PendingCall, RpcError};
use crate::transport::{NodeId, Transport, TransportError};
use crate::wire::{self, IodOp, MgrRequest, Response, Status, WireError};

pub use collective::{form_group, Align, CollectiveMode, GroupMember};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("manager answered {status:?}: {msg}")]
    Manager { status: Status, msg: String },
    #[error("{node} answered {status:?}: {msg}")]
    Daemon { node: NodeId, status: Status, msg: String },
    #[error("write incomplete, {} extents done: {cause}", completed.len())]
    PartialWrite { completed: Vec<PhysExtent>, cause: Box<ClientError> },
    #[error("read incomplete, {} extents done: {cause}", completed.len())]
    PartialRead { completed: Vec<PhysExtent>, cause: Box<ClientError> },
    #[error("file handle is closed")]
    Stale,
    #[error("no manager serves {0}")]
    NoManager(String),
    #[error("collective aborted: {0}")]
    Collective(String),
}

impl From<TransportError> for ClientError {
    fn from(e: TransportError) -> Self {
        ClientError::Rpc(RpcError::Transport(e))
    }
}

/// Physical pieces of a logical range, cut so that no piece crosses a
/// multiple of `frag` in its sub-file.
pub fn fragments(dist: &Distribution, offset: u64, len: u64, frag: u64) -> Vec<PhysExtent> {
    let mut out = Vec::new();
    for p in logical_to_physical(offset, len, dist) {
        let mut done = 0;
        while done < p.length {
            let sub = p.sub_offset + done;
            let take = (frag - sub % frag).min(p.length - done);
            out.push(PhysExtent { iod: p.iod, sub_offset: sub, length: take, logical_offset: p.logical_offset + done });
            done += take;
        }
    }
    out
}

static SESSIONS: AtomicU64 = AtomicU64::new(1);

/// An open file: metadata snapshot plus the installed view.
#[derive(Clone, Debug)]
pub struct FileHandle {
    meta: FileMeta,
    view: View,
    session: u64,
    manager: NodeId,
    open: bool,
}

impl FileHandle {
    pub fn meta(&self) -> &FileMeta {
        &self.meta
    }

    pub fn view(&self) -> &View {
        &self.view
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Installs `view` and returns the previous one.
    pub fn set_view(&mut self, view: View) -> Result<View, ClientError> {
        view.validate()?;
        Ok(std::mem::replace(&mut self.view, view))
    }

    fn check(&self) -> Result<(), ClientError> {
        if self.open {
            Ok(())
        } else {
            Err(ClientError::Stale)
        }
    }
}

/// One daemon request worth of a transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Piece {
    pub phys: PhysExtent,
    /// offset of the piece within the caller's buffer
    pub buf_pos: u64,
}

pub struct Client {
    ep: Endpoint,
    managers: BTreeMap<String, NodeId>,
    frag: u64,
}

impl Client {
    /// `managers` maps partition names to the node serving their manager.
    pub fn new(
        transport: Arc<dyn Transport>,
        id: NodeId,
        managers: BTreeMap<String, NodeId>,
    ) -> Result<Self, ClientError> {
        let mtu = transport.mtu();
        let room = mtu.saturating_sub(wire::IOD_HEADER_LEN).max(1) as u64;
        let frag = 1u64 << (63 - room.leading_zeros());
        Ok(Client { ep: Endpoint::bind(transport, id)?, managers, frag })
    }

    pub fn id(&self) -> NodeId {
        self.ep.id()
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        self.ep.transport()
    }

    /// Largest data payload of one daemon request.
    pub fn fragment_size(&self) -> u64 {
        self.frag
    }

    fn manager_for(&self, path: &str) -> Result<NodeId, ClientError> {
        partition_of(path)
            .and_then(|p| self.managers.get(p).copied())
            .ok_or_else(|| ClientError::NoManager(path.into()))
    }

    fn mgr_call(&self, node: NodeId, req: &MgrRequest) -> Result<Response, ClientError> {
        let resp = Response::decode(&self.ep.call(node, &req.encode())?)?;
        if resp.status != Status::Ok {
            return Err(ClientError::Manager { status: resp.status, msg: resp.message() });
        }
        Ok(resp)
    }

    fn handle_for(&self, meta: FileMeta, manager: NodeId) -> FileHandle {
        FileHandle { meta, view: View::Full, session: SESSIONS.fetch_add(1, Ordering::Relaxed), manager, open: true }
    }

    pub fn create(&self, path: &str, dist: Distribution) -> Result<FileHandle, ClientError> {
        let node = self.manager_for(path)?;
        let resp = self.mgr_call(node, &MgrRequest::Create { path: path.into(), dist })?;
        Ok(self.handle_for(wire::decode_meta(&resp.payload)?, node))
    }

    pub fn open(&self, path: &str) -> Result<FileHandle, ClientError> {
        let node = self.manager_for(path)?;
        Ok(self.handle_for(self.lookup(node, path)?, node))
    }

    fn lookup(&self, node: NodeId, path: &str) -> Result<FileMeta, ClientError> {
        let resp = self.mgr_call(node, &MgrRequest::Open { path: path.into() })?;
        Ok(wire::decode_meta(&resp.payload)?)
    }

    pub fn remove(&self, path: &str) -> Result<(), ClientError> {
        let node = self.manager_for(path)?;
        self.mgr_call(node, &MgrRequest::Remove { path: path.into() }).map(|_| ())
    }

    /// Every file known to the manager of `partition`.
    pub fn list(&self, partition: &str) -> Result<Vec<FileMeta>, ClientError> {
        let node = *self.managers.get(partition).ok_or_else(|| ClientError::NoManager(partition.into()))?;
        let mut out = Vec::new();
        loop {
            let resp = self.mgr_call(node, &MgrRequest::List { start: out.len() as u64 })?;
            let mut r = wire::Reader::new(&resp.payload);
            for _ in 0..r.u32()? {
                out.push(r.meta()?);
            }
            if out.len() as u64 >= resp.length {
                return Ok(out);
            }
        }
    }

    /// Raises the manager's logical size to at least `high_water`.
    pub(crate) fn note_size(&self, h: &mut FileHandle, high_water: u64) -> Result<(), ClientError> {
        if high_water > h.meta.logical_size {
            let resp = self.mgr_call(h.manager, &MgrRequest::Size { handle: h.meta.handle, high_water })?;
            h.meta.logical_size = resp.length;
        }
        Ok(())
    }

    /// Splits file-space extents into daemon-sized pieces.
    pub(crate) fn pieces(&self, dist: &Distribution, extents: &[Extent]) -> Vec<Piece> {
        let mut out = Vec::new();
        let mut buf_pos = 0;
        for e in extents {
            for phys in fragments(dist, e.offset, e.length, self.frag) {
                out.push(Piece { phys, buf_pos: buf_pos + phys.logical_offset - e.offset });
            }
            buf_pos += e.length;
        }
        out
    }

    fn node_of(meta: &FileMeta, iod: u32) -> Result<NodeId, ClientError> {
        meta.iod_list.get(iod as usize).copied().ok_or_else(|| {
            ClientError::Layout(LayoutError::InvalidDistribution(format!("iod {iod} beyond the file's daemon list")))
        })
    }

    fn daemon_response(node: NodeId, raw: Result<Vec<u8>, RpcError>) -> Result<Response, ClientError> {
        let resp = Response::decode(&raw?)?;
        if resp.status != Status::Ok {
            return Err(ClientError::Daemon { node, status: resp.status, msg: resp.message() });
        }
        Ok(resp)
    }

    /// Sends every piece, then collects the answers. On failure the error
    /// lists the pieces that did complete.
    pub(crate) fn write_pieces(&self, meta: &FileMeta, pieces: &[Piece], data: &[u8]) -> Result<(), ClientError> {
        let mut calls: Vec<(Piece, NodeId, Result<PendingCall, RpcError>)> = Vec::with_capacity(pieces.len());
        for &p in pieces {
            let node = Self::node_of(meta, p.phys.iod)?;
            let chunk = &data[p.buf_pos as usize..(p.buf_pos + p.phys.length) as usize];
            let req = wire::encode_iod(IodOp::Write, meta.handle, p.phys.sub_offset, p.phys.length, chunk);
            calls.push((p, node, self.ep.start(node, &req)));
        }
        let mut completed = Vec::new();
        let mut first_err = None;
        for (p, node, call) in calls {
            match call.map_err(ClientError::from).and_then(|c| Self::daemon_response(node, c.wait())) {
                Ok(_) => completed.push(p.phys),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            None => Ok(()),
            Some(cause) => Err(ClientError::PartialWrite { completed, cause: Box::new(cause) }),
        }
    }

    pub(crate) fn read_pieces(&self, meta: &FileMeta, pieces: &[Piece], out: &mut [u8]) -> Result<(), ClientError> {
        let mut calls = Vec::with_capacity(pieces.len());
        for &p in pieces {
            let node = Self::node_of(meta, p.phys.iod)?;
            let req = wire::encode_iod(IodOp::Read, meta.handle, p.phys.sub_offset, p.phys.length, &[]);
            calls.push((p, node, self.ep.start(node, &req)));
        }
        let mut completed = Vec::new();
        let mut first_err = None;
        for (p, node, call) in calls {
            let got =
                call.map_err(ClientError::from).and_then(|c| Self::daemon_response(node, c.wait())).and_then(|r| {
                    if r.payload.len() as u64 == p.phys.length {
                        Ok(r.payload)
                    } else {
                        Err(ClientError::Daemon { node, status: Status::Range, msg: "short read".into() })
                    }
                });
            match got {
                Ok(bytes) => {
                    out[p.buf_pos as usize..(p.buf_pos + p.phys.length) as usize].copy_from_slice(&bytes);
                    completed.push(p.phys);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            None => Ok(()),
            Some(cause) => Err(ClientError::PartialRead { completed, cause: Box::new(cause) }),
        }
    }

    /// Writes `data` at view offset `offset`; returns the bytes written.
    pub fn write_at(&self, h: &mut FileHandle, offset: u64, data: &[u8]) -> Result<u64, ClientError> {
        h.check()?;
        if data.is_empty() {
            return Ok(0);
        }
        let extents = view_to_file(&h.view, offset, data.len() as u64)?;
        let pieces = self.pieces(&h.meta.dist, &extents);
        self.write_pieces(&h.meta, &pieces, data)?;
        let high = extents.iter().map(Extent::end).max().unwrap_or(0);
        self.note_size(h, high)?;
        Ok(data.len() as u64)
    }

    /// View bytes readable from `offset`, at most `len`. Asks the manager
    /// for a fresh size when the snapshot looks too short.
    pub(crate) fn readable(&self, h: &mut FileHandle, offset: u64, len: u64) -> Result<u64, ClientError> {
        let fits = |h: &FileHandle| h.view.size_within_file(h.meta.logical_size).saturating_sub(offset).min(len);
        if fits(h) < len {
            let fresh = self.lookup(h.manager, &h.meta.path)?;
            h.meta.logical_size = h.meta.logical_size.max(fresh.logical_size);
        }
        Ok(fits(h))
    }

    /// Reads up to `len` bytes at view offset `offset`. The result is
    /// shorter only when the view or the file ends first.
    pub fn read_at(&self, h: &mut FileHandle, offset: u64, len: u64) -> Result<Vec<u8>, ClientError> {
        h.check()?;
        let n = self.readable(h, offset, len)?;
        let mut out = vec![0u8; n as usize];
        if n > 0 {
            let extents = view_to_file(&h.view, offset, n)?;
            let pieces = self.pieces(&h.meta.dist, &extents);
            self.read_pieces(&h.meta, &pieces, &mut out)?;
        }
        Ok(out)
    }

    /// Finalizes the size and invalidates the handle; returns the size.
    pub fn close(&self, h: &mut FileHandle) -> Result<u64, ClientError> {
        h.check()?;
        let resp =
            self.mgr_call(h.manager, &MgrRequest::Size { handle: h.meta.handle, high_water: h.meta.logical_size })?;
        h.open = false;
        h.meta.logical_size = resp.length;
        Ok(resp.length)
    }

    /// Asks every daemon of the file to write its dirty pages to disk.
    pub fn flush(&self, h: &FileHandle) -> Result<u64, ClientError> {
        let mut total = 0;
        for &node in &h.meta.iod_list {
            let req = wire::encode_iod(IodOp::Flush, h.meta.handle, 0, 0, &[]);
            total += Self::daemon_response(node, self.ep.call(node, &req))?.length;
        }
        Ok(total)
    }

    /// Per-daemon statistics of the file's sub-files.
    pub fn stat(&self, h: &FileHandle) -> Result<Vec<SubFileStat>, ClientError> {
        h.meta
            .iod_list
            .iter()
            .map(|&node| {
                let req = wire::encode_iod(IodOp::Stat, h.meta.handle, 0, 0, &[]);
                let resp = Self::daemon_response(node, self.ep.call(node, &req))?;
                Ok(SubFileStat::decode(&resp.payload)?)
            })
            .collect()
    }

    /// Sends raw daemon requests and returns their responses in order.
    pub(crate) fn daemon_batch(&self, reqs: Vec<(NodeId, Vec<u8>)>) -> Vec<Result<Response, ClientError>> {
        let calls: Vec<_> = reqs.into_iter().map(|(node, r)| (node, self.ep.start(node, &r))).collect();
        calls
            .into_iter()
            .map(|(node, c)| c.map_err(ClientError::from).and_then(|c| Self::daemon_response(node, c.wait())))
            .collect()
    }
}
