//! Metadata manager: namespace, handles, distributions and logical sizes.
//!
//! Data never passes through the manager. Clients talk to it at create,
//! open, close and resize time only.

pub mod journal;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iod::{IoDaemon, IodError};
use crate::layout::{Distribution, LayoutError};
use crate::rpc::{Endpoint, Service};
use crate::transport::NodeId;
use crate::wire::{self, IodOp, MgrRequest, Response, Status};

pub use journal::{Journal, Record};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub path: String,
    pub handle: u64,
    pub dist: Distribution,
    pub iod_list: Vec<NodeId>,
    pub logical_size: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MgrError {
    #[error("{0} already exists")]
    Exists(String),
    #[error("no such file {0}")]
    NoFile(String),
    #[error("unknown handle {0}")]
    UnknownHandle(u64),
    #[error("distribution needs {need} iods but the partition has {have}")]
    Capacity { need: u32, have: usize },
    #[error("daemon create failed: {0}")]
    CreateFailed(String),
    #[error("{0} is busy")]
    Busy(String),
    #[error("invalid path {0}")]
    InvalidPath(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

impl MgrError {
    pub fn status(&self) -> Status {
        match self {
            MgrError::Exists(_) => Status::Exists,
            MgrError::NoFile(_) | MgrError::UnknownHandle(_) => Status::NoFile,
            MgrError::Capacity { .. } => Status::Capacity,
            MgrError::CreateFailed(_) => Status::CreateFailed,
            MgrError::Busy(_) => Status::Busy,
            MgrError::Journal(_) => Status::Storage,
            MgrError::InvalidPath(_) | MgrError::Config(_) | MgrError::Layout(_) => Status::Invalid,
        }
    }
}

/// Partition as written in the configuration file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub name: String,
    pub nodes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub nodes: Vec<NodeId>,
    /// Always the last node of `nodes`.
    pub mgmt_node: NodeId,
}

/// Validates partitions and places each manager on its partition's last node.
pub fn partition_setup(cfg: &[PartitionConfig]) -> Result<Vec<Partition>, MgrError> {
    let mut seen_nodes = BTreeSet::new();
    let mut seen_names = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.len());
    for p in cfg {
        if p.name.is_empty() || p.name.contains('/') {
            return Err(MgrError::Config(format!("bad partition name {:?}", p.name)));
        }
        if !seen_names.insert(p.name.clone()) {
            return Err(MgrError::Config(format!("partition {} listed twice", p.name)));
        }
        let Some(&last) = p.nodes.last() else {
            return Err(MgrError::Config(format!("partition {} has no nodes", p.name)));
        };
        for &n in &p.nodes {
            if !seen_nodes.insert(n) {
                return Err(MgrError::Config(format!("node {n} appears in more than one place")));
            }
        }
        out.push(Partition {
            name: p.name.clone(),
            nodes: p.nodes.iter().map(|&n| NodeId(n)).collect(),
            mgmt_node: NodeId(last),
        });
    }
    Ok(out)
}

/// Splits `/name/rest` into the partition name.
pub fn partition_of(path: &str) -> Option<&str> {
    let rest = path.strip_prefix('/')?;
    let (name, file) = rest.split_once('/')?;
    (!name.is_empty() && !file.is_empty()).then_some(name)
}

/// How the manager reaches daemons for sub-file creation and removal.
pub trait DaemonAdmin: Send + Sync {
    fn create(&self, node: NodeId, handle: u64) -> Result<(), IodError>;
    fn remove(&self, node: NodeId, handle: u64) -> Result<(), IodError>;
}

/// Daemons living in the same process.
#[derive(Default, Clone)]
pub struct LocalDaemons(pub HashMap<NodeId, Arc<IoDaemon>>);

impl DaemonAdmin for LocalDaemons {
    fn create(&self, node: NodeId, handle: u64) -> Result<(), IodError> {
        self.0.get(&node).ok_or_else(|| IodError::Range(format!("no daemon on {node}")))?.create(handle)
    }

    fn remove(&self, node: NodeId, handle: u64) -> Result<(), IodError> {
        self.0.get(&node).ok_or_else(|| IodError::Range(format!("no daemon on {node}")))?.remove(handle)
    }
}

/// Daemons reached over the transport.
pub struct RemoteDaemons {
    endpoint: Mutex<Endpoint>,
}

impl RemoteDaemons {
    pub fn new(endpoint: Endpoint) -> Self {
        RemoteDaemons { endpoint: Mutex::new(endpoint) }
    }

    fn call(&self, node: NodeId, op: IodOp, handle: u64) -> Result<(), IodError> {
        let req = wire::encode_iod(op, handle, 0, 0, &[]);
        let raw = self
            .endpoint
            .lock()
            .unwrap()
            .call(node, &req)
            .map_err(|e| IodError::Storage { accepted: 0, msg: e.to_string() })?;
        let resp = Response::decode(&raw).map_err(|e| IodError::Range(e.to_string()))?;
        match resp.status {
            Status::Ok => Ok(()),
            Status::NoFile => Err(IodError::NoFile(handle)),
            Status::Exists => Err(IodError::Exists(handle)),
            Status::Busy => Err(IodError::Busy(handle)),
            Status::Storage => Err(IodError::Storage { accepted: resp.length, msg: resp.message() }),
            _ => Err(IodError::Range(resp.message())),
        }
    }
}

impl DaemonAdmin for RemoteDaemons {
    fn create(&self, node: NodeId, handle: u64) -> Result<(), IodError> {
        self.call(node, IodOp::Create, handle)
    }

    fn remove(&self, node: NodeId, handle: u64) -> Result<(), IodError> {
        self.call(node, IodOp::Remove, handle)
    }
}

/// Accepts every request; for tests of pure namespace logic.
pub struct NoDaemons;

impl DaemonAdmin for NoDaemons {
    fn create(&self, _: NodeId, _: u64) -> Result<(), IodError> {
        Ok(())
    }
    fn remove(&self, _: NodeId, _: u64) -> Result<(), IodError> {
        Ok(())
    }
}

#[derive(Default)]
struct Namespace {
    files: BTreeMap<String, FileMeta>,
    by_handle: HashMap<u64, String>,
    next_handle: u64,
}

impl Namespace {
    fn apply(&mut self, r: &Record) {
        match r {
            Record::Create { meta } => {
                self.next_handle = self.next_handle.max(meta.handle + 1);
                self.by_handle.insert(meta.handle, meta.path.clone());
                self.files.insert(meta.path.clone(), meta.clone());
            }
            Record::Remove { path } => {
                if let Some(m) = self.files.remove(path) {
                    self.by_handle.remove(&m.handle);
                }
            }
            Record::Size { handle, size } => {
                if let Some(m) = self.by_handle.get(handle).and_then(|p| self.files.get_mut(p)) {
                    m.logical_size = m.logical_size.max(*size);
                }
            }
        }
    }
}

pub struct Manager {
    partitions: Vec<Partition>,
    ns: RwLock<Namespace>,
    journal: Mutex<Option<Journal>>,
    daemons: Box<dyn DaemonAdmin>,
}

impl Manager {
    /// Replays `journal_path` if given; without one metadata lives in memory.
    pub fn new(
        partitions: Vec<Partition>,
        journal_path: Option<PathBuf>,
        daemons: Box<dyn DaemonAdmin>,
    ) -> Result<Self, MgrError> {
        let mut ns = Namespace { next_handle: 1, ..Namespace::default() };
        let journal = match journal_path {
            Some(p) => {
                let (j, records) = Journal::open(&p).map_err(|e| MgrError::Journal(e.to_string()))?;
                for r in &records {
                    ns.apply(r);
                }
                Some(j)
            }
            None => None,
        };
        Ok(Manager { partitions, ns: RwLock::new(ns), journal: Mutex::new(journal), daemons })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    fn log(&self, r: &Record) -> Result<(), MgrError> {
        if let Some(j) = self.journal.lock().unwrap().as_mut() {
            j.append(r).map_err(|e| MgrError::Journal(e.to_string()))?;
        }
        Ok(())
    }

    pub fn create_file(&self, path: &str, dist: Distribution) -> Result<FileMeta, MgrError> {
        dist.validate()?;
        let pname = partition_of(path).ok_or_else(|| MgrError::InvalidPath(path.into()))?;
        let part = self
            .partitions
            .iter()
            .find(|p| p.name == pname)
            .ok_or_else(|| MgrError::InvalidPath(format!("{path}: no partition {pname}")))?;
        let need = dist.n_iods();
        if need as usize > part.nodes.len() {
            return Err(MgrError::Capacity { need, have: part.nodes.len() });
        }
        let mut ns = self.ns.write().unwrap();
        if ns.files.contains_key(path) {
            return Err(MgrError::Exists(path.into()));
        }
        let handle = ns.next_handle;
        let iod_list: Vec<NodeId> = part.nodes[..need as usize].to_vec();
        for (i, &node) in iod_list.iter().enumerate() {
            if let Err(e) = self.daemons.create(node, handle) {
                for &done in &iod_list[..i] {
                    if let Err(e2) = self.daemons.remove(done, handle) {
                        warn!("rollback of handle {handle} on {done} failed: {e2}");
                    }
                }
                return Err(MgrError::CreateFailed(format!("{node}: {e}")));
            }
        }
        let meta = FileMeta { path: path.into(), handle, dist, iod_list, logical_size: 0 };
        let rec = Record::Create { meta: meta.clone() };
        self.log(&rec)?;
        ns.apply(&rec);
        Ok(meta)
    }

    pub fn open(&self, path: &str) -> Result<FileMeta, MgrError> {
        self.ns.read().unwrap().files.get(path).cloned().ok_or_else(|| MgrError::NoFile(path.into()))
    }

    pub fn remove(&self, path: &str) -> Result<(), MgrError> {
        let mut ns = self.ns.write().unwrap();
        let meta = ns.files.get(path).cloned().ok_or_else(|| MgrError::NoFile(path.into()))?;
        for &node in &meta.iod_list {
            match self.daemons.remove(node, meta.handle) {
                Ok(()) | Err(IodError::NoFile(_)) => {}
                Err(IodError::Busy(_)) => return Err(MgrError::Busy(path.into())),
                Err(e) => warn!("removing handle {} on {node}: {e}", meta.handle),
            }
        }
        let rec = Record::Remove { path: path.into() };
        self.log(&rec)?;
        ns.apply(&rec);
        Ok(())
    }

    /// Raises the logical size to at least `high_water`; returns the new size.
    pub fn update_size(&self, handle: u64, high_water: u64) -> Result<u64, MgrError> {
        let mut ns = self.ns.write().unwrap();
        let path = ns.by_handle.get(&handle).ok_or(MgrError::UnknownHandle(handle))?;
        let current = ns.files[path].logical_size;
        if high_water > current {
            let rec = Record::Size { handle, size: high_water };
            self.log(&rec)?;
            ns.apply(&rec);
        }
        Ok(current.max(high_water))
    }

    pub fn list(&self) -> Vec<FileMeta> {
        self.ns.read().unwrap().files.values().cloned().collect()
    }

    /// Canonical text of the whole namespace; equal dumps mean equal metadata.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(&self.ns.read().unwrap().files).expect("metadata serializes")
    }

    pub fn handle_request(&self, request: &[u8], max_payload: usize) -> Vec<u8> {
        let resp = match MgrRequest::decode(request) {
            Err(e) => Response::error(Status::Invalid, 0, e.to_string()),
            Ok(req) => self.serve(req, max_payload).unwrap_or_else(|e| Response::error(e.status(), 0, e.to_string())),
        };
        resp.encode()
    }

    fn serve(&self, req: MgrRequest, max_payload: usize) -> Result<Response, MgrError> {
        Ok(match req {
            MgrRequest::Create { path, dist } => {
                let p = wire::encode_meta(&self.create_file(&path, dist)?);
                Response::ok(p.len() as u64, p)
            }
            MgrRequest::Open { path } => {
                let p = wire::encode_meta(&self.open(&path)?);
                Response::ok(p.len() as u64, p)
            }
            MgrRequest::Remove { path } => {
                self.remove(&path)?;
                Response::ok(0, Vec::new())
            }
            MgrRequest::Size { handle, high_water } => Response::ok(self.update_size(handle, high_water)?, Vec::new()),
            MgrRequest::List { start } => {
                let all = self.list();
                let room = max_payload.saturating_sub(wire::RESPONSE_HEADER_LEN + 4);
                let mut body = Vec::new();
                let mut count = 0u32;
                for m in all.iter().skip(start as usize) {
                    let e = wire::encode_meta(m);
                    if body.len() + e.len() > room {
                        break;
                    }
                    body.extend_from_slice(&e);
                    count += 1;
                }
                if count == 0 && (start as usize) < all.len() {
                    return Err(MgrError::Config("file record exceeds a datagram".into()));
                }
                let mut payload = count.to_le_bytes().to_vec();
                payload.extend_from_slice(&body);
                Response::ok(all.len() as u64, payload)
            }
        })
    }
}

/// Adapter that serves manager requests over the transport.
pub struct MgrService {
    pub manager: Arc<Manager>,
    pub max_payload: usize,
}

impl Service for MgrService {
    fn handle(&mut self, _src: NodeId, request: &[u8]) -> Vec<u8> {
        self.manager.handle_request(request, self.max_payload)
    }
}
