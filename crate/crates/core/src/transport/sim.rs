use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock, Weak};

use super::mailbox::Mailbox;
use super::{Datagram, Handler, NodeId, Receipt, Registration, SimParams, Transport, TransportError, DEFAULT_MTU};

/// In-process transport with virtual-clock timing.
///
/// Each source node owns a virtual clock: a `B`-byte datagram leaves at the
/// source's current time, occupies the link for `B / bandwidth`, and arrives
/// one latency later.
#[derive(Clone)]
pub struct SimTransport {
    inner: Arc<Inner>,
}

struct Inner {
    params: SimParams,
    mtu: usize,
    boxes: RwLock<HashMap<NodeId, Mailbox>>,
    state: Mutex<LinkState>,
}

#[derive(Default)]
struct LinkState {
    clocks: HashMap<NodeId, f64>,
    seqs: HashMap<(NodeId, NodeId), u64>,
}

impl SimTransport {
    pub fn new(params: SimParams) -> Result<Self, TransportError> {
        Self::with_mtu(params, DEFAULT_MTU)
    }

    pub fn with_mtu(params: SimParams, mtu: usize) -> Result<Self, TransportError> {
        params.validate()?;
        if mtu == 0 {
            return Err(TransportError::InvalidParams("mtu must be positive".into()));
        }
        Ok(SimTransport {
            inner: Arc::new(Inner {
                params,
                mtu,
                boxes: RwLock::new(HashMap::new()),
                state: Mutex::new(LinkState::default()),
            }),
        })
    }

    pub fn params(&self) -> SimParams {
        self.inner.params
    }

    /// Current virtual time of `node`'s outbound link, seconds.
    pub fn clock(&self, node: NodeId) -> f64 {
        self.inner.state.lock().unwrap().clocks.get(&node).copied().unwrap_or(0.0)
    }
}

impl Transport for SimTransport {
    fn register(&self, id: NodeId, handler: Handler) -> Result<Registration, TransportError> {
        let mut boxes = self.inner.boxes.write().unwrap();
        if boxes.contains_key(&id) {
            return Err(TransportError::AlreadyRegistered(id));
        }
        boxes.insert(id, Mailbox::spawn(id, handler));
        let weak: Weak<Inner> = Arc::downgrade(&self.inner);
        Ok(Registration::new(id, move || {
            if let Some(inner) = weak.upgrade() {
                inner.boxes.write().unwrap().remove(&id);
            }
        }))
    }

    fn send(&self, src: NodeId, dst: NodeId, payload: &[u8]) -> Result<Receipt, TransportError> {
        if payload.len() > self.inner.mtu {
            return Err(TransportError::FragmentationRequired { len: payload.len(), mtu: self.inner.mtu });
        }
        let mailbox = self.inner.boxes.read().unwrap().get(&dst).cloned().ok_or(TransportError::Unreachable(dst))?;
        let p = self.inner.params;
        let mut st = self.inner.state.lock().unwrap();
        let clock = st.clocks.entry(src).or_insert(0.0);
        let sent_at = *clock;
        let wire = payload.len() as f64 / p.bandwidth_bps;
        *clock = sent_at + wire;
        let seq_slot = st.seqs.entry((src, dst)).or_insert(0);
        let seq = *seq_slot;
        // posting under the state lock keeps seq order equal to queue order
        if !mailbox.post(Datagram { src, dst, payload: payload.to_vec() }) {
            return Err(TransportError::Unreachable(dst));
        }
        *seq_slot += 1;
        Ok(Receipt { seq, sent_at, delivered_at: sent_at + p.transfer_time(payload.len()) })
    }

    fn mtu(&self) -> usize {
        self.inner.mtu
    }
}
