//! Request/response on top of the datagram transport.
//!
//! Messages carry no request id. Correlation relies on the transport's
//! per-pair ordering plus the server answering each peer in arrival order:
//! the n-th response from a peer belongs to the n-th request sent to it.

use std::collections::{HashMap, VecDeque};
use std::ops::RangeInclusive;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::warn;
use thiserror::Error;

use crate::transport::{Datagram, NodeId, Registration, Transport, TransportError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RpcError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("no response from {0} within the timeout")]
    Timeout(NodeId),
}

#[derive(Default)]
struct Pending {
    waiters: Mutex<HashMap<NodeId, VecDeque<Sender<Vec<u8>>>>>,
    peers: Mutex<HashMap<NodeId, Arc<Mutex<()>>>>,
}

/// Client side of the request/response exchange, bound to one node id.
pub struct Endpoint {
    id: NodeId,
    transport: Arc<dyn Transport>,
    pending: Arc<Pending>,
    timeout: Duration,
    _reg: Registration,
}

impl Endpoint {
    pub fn bind(transport: Arc<dyn Transport>, id: NodeId) -> Result<Self, TransportError> {
        let pending = Arc::new(Pending::default());
        let p = pending.clone();
        let reg = transport.register(
            id,
            Arc::new(move |d: Datagram| {
                let waiter = p.waiters.lock().unwrap().get_mut(&d.src).and_then(|q| q.pop_front());
                match waiter {
                    Some(tx) => {
                        let _ = tx.send(d.payload);
                    }
                    None => warn!("unsolicited datagram from {}", d.src),
                }
            }),
        )?;
        Ok(Endpoint { id, transport, pending, timeout: DEFAULT_TIMEOUT, _reg: reg })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn call(&self, dst: NodeId, request: &[u8]) -> Result<Vec<u8>, RpcError> {
        self.start(dst, request)?.wait()
    }

    /// Sends a request without waiting, so several can be in flight.
    pub fn start(&self, dst: NodeId, request: &[u8]) -> Result<PendingCall, RpcError> {
        let (tx, rx) = channel();
        let peer = self.pending.peers.lock().unwrap().entry(dst).or_default().clone();
        let _order = peer.lock().unwrap();
        self.pending.waiters.lock().unwrap().entry(dst).or_default().push_back(tx);
        if let Err(e) = self.transport.send(self.id, dst, request) {
            self.pending.waiters.lock().unwrap().get_mut(&dst).and_then(|q| q.pop_back());
            return Err(e.into());
        }
        Ok(PendingCall { dst, rx, timeout: self.timeout })
    }
}

/// A request sent by [`Endpoint::start`].
pub struct PendingCall {
    dst: NodeId,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl PendingCall {
    pub fn wait(self) -> Result<Vec<u8>, RpcError> {
        self.rx.recv_timeout(self.timeout).map_err(|_| RpcError::Timeout(self.dst))
    }
}

/// Something that answers requests; one instance handles its requests
/// strictly one at a time.
pub trait Service: Send + 'static {
    fn handle(&mut self, src: NodeId, request: &[u8]) -> Vec<u8>;
}

impl<F: FnMut(NodeId, &[u8]) -> Vec<u8> + Send + 'static> Service for F {
    fn handle(&mut self, src: NodeId, request: &[u8]) -> Vec<u8> {
        self(src, request)
    }
}

/// A node id serving one or more services, routed by the first request byte.
pub struct Server {
    reg: Option<Registration>,
}

impl Server {
    pub fn start(
        transport: Arc<dyn Transport>,
        id: NodeId,
        routes: Vec<(RangeInclusive<u8>, Box<dyn Service>)>,
    ) -> Result<Self, TransportError> {
        let mut table: Vec<(RangeInclusive<u8>, Mutex<Sender<Datagram>>)> = Vec::new();
        for (ops, mut service) in routes {
            let (tx, rx) = channel::<Datagram>();
            let t = transport.clone();
            thread::Builder::new()
                .name(format!("svc-{}-{}", id.0, ops.start()))
                .spawn(move || {
                    for d in rx {
                        let resp = service.handle(d.src, &d.payload);
                        if let Err(e) = t.send(id, d.src, &resp) {
                            warn!("{id} could not answer {}: {e}", d.src);
                        }
                    }
                })
                .map_err(|e| TransportError::Io(e.to_string()))?;
            table.push((ops, Mutex::new(tx)));
        }
        let t = transport.clone();
        let reg = transport.register(
            id,
            Arc::new(move |d: Datagram| {
                let op = d.payload.first().copied();
                match op.and_then(|op| table.iter().find(|(r, _)| r.contains(&op))) {
                    Some((_, tx)) => {
                        let _ = tx.lock().unwrap().send(d);
                    }
                    None => {
                        warn!("{id}: no service for opcode {op:?} from {}", d.src);
                        // answer so the caller does not hang; status 3 = bad range/request
                        let _ = t.send(id, d.src, &[3, 0, 0, 0, 0, 0, 0, 0, 0]);
                    }
                }
            }),
        )?;
        Ok(Server { reg: Some(reg) })
    }

    pub fn stop(mut self) {
        self.reg.take();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.reg.take();
    }
}
