//! Datagram transport between cluster nodes addressed by integer node id.
//!
//! Two backends share one contract ([`Transport`]):
//!
//! * [`SimTransport`]: in-process mailboxes with a deterministic virtual
//!   clock for message timing.
//! * [`SocketTransport`]: TCP streams carrying the fixed 16-byte frame
//!   header from [`frame`].
//!
//! Both deliver each datagram exactly once, uncorrupted, and in send order
//! per `(src, dst)` pair. Delivery for one node id is serialized; distinct
//! node ids are delivered concurrently. There is no broadcast and no
//! fragmentation: payloads above the MTU are rejected and the caller splits
//! them.

pub mod frame;
mod mailbox;
mod sim;
mod socket;

pub use sim::SimTransport;
pub use socket::SocketTransport;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default maximum payload of one datagram.
pub const DEFAULT_MTU: usize = 64 * 1024;

/// Node number, counted from 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

/// Network address of a node: the final host component plus, for the socket
/// backend, a port.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Address {
    pub host_index: u32,
    pub port: u16,
}

/// Maps a node id to its address: the host component is the id plus one.
pub fn node_id_to_address(id: NodeId) -> Address {
    Address { host_index: id.0 + 1, port: 0 }
}

/// Inverse of [`node_id_to_address`].
pub fn address_to_node_id(addr: Address) -> Result<NodeId, TransportError> {
    match addr.host_index {
        0 => Err(TransportError::InvalidAddress(addr.host_index)),
        h => Ok(NodeId(h - 1)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datagram {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: Vec<u8>,
}

/// Timing parameters of the simulated network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// One-way latency per message, microseconds.
    pub latency_us: f64,
    /// Bytes per second per link.
    pub bandwidth_bps: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams { latency_us: 17.1, bandwidth_bps: 93e6 }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.latency_us >= 0.0) || !(self.bandwidth_bps > 0.0) {
            return Err(TransportError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    /// Virtual seconds a message of `bytes` spends on a link.
    pub fn transfer_time(&self, bytes: usize) -> f64 {
        self.latency_us * 1e-6 + bytes as f64 / self.bandwidth_bps
    }
}

/// Receipt for an accepted datagram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Receipt {
    /// Position of this datagram in its `(src, dst)` stream, from 0.
    pub seq: u64,
    /// Virtual send time on the source's clock, seconds (0 on wall-clock
    /// backends).
    pub sent_at: f64,
    /// Virtual arrival time, seconds.
    pub delivered_at: f64,
}

impl Receipt {
    pub fn elapsed(&self) -> f64 {
        self.delivered_at - self.sent_at
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("host index {0} is not a valid node address")]
    InvalidAddress(u32),
    #[error("{0} is unreachable")]
    Unreachable(NodeId),
    #[error("payload of {len} bytes exceeds the {mtu}-byte MTU; split it")]
    FragmentationRequired { len: usize, mtu: usize },
    #[error("{0} already has a receiver")]
    AlreadyRegistered(NodeId),
    #[error("invalid transport parameters: {0}")]
    InvalidParams(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

/// Delivery callback invoked once per datagram addressed to a registered id.
pub type Handler = Arc<dyn Fn(Datagram) + Send + Sync>;

pub trait Transport: Send + Sync {
    /// Installs `handler` for datagrams addressed to `id`. Delivery stops
    /// when the returned [`Registration`] is dropped.
    fn register(&self, id: NodeId, handler: Handler) -> Result<Registration, TransportError>;

    fn send(&self, src: NodeId, dst: NodeId, payload: &[u8]) -> Result<Receipt, TransportError>;

    fn mtu(&self) -> usize;
}

/// Live receiver registration; dropping it deregisters.
pub struct Registration {
    id: NodeId,
    release: Option<Box<dyn FnOnce() + Send + Sync>>,
}

impl Registration {
    pub(crate) fn new(id: NodeId, release: impl FnOnce() + Send + Sync + 'static) -> Self {
        Registration { id, release: Some(Box::new(release)) }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn deregister(mut self) {
        if let Some(f) = self.release.take() {
            f();
        }
    }
}

impl Drop for Registration {
    fn drop(&mut self) {
        if let Some(f) = self.release.take() {
            f();
        }
    }
}

impl fmt::Debug for Registration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registration").field("id", &self.id).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn address_rule_examples() {
        assert_eq!(node_id_to_address(NodeId(0)).host_index, 1);
        assert_eq!(node_id_to_address(NodeId(4)).host_index, 5);
        assert_eq!(node_id_to_address(NodeId(127)).host_index, 128);
        assert_eq!(address_to_node_id(Address { host_index: 1, port: 0 }).unwrap(), NodeId(0));
        assert_eq!(address_to_node_id(Address { host_index: 33, port: 0 }).unwrap(), NodeId(32));
        assert_eq!(address_to_node_id(Address { host_index: 0, port: 0 }), Err(TransportError::InvalidAddress(0)));
    }

    #[test]
    fn mapping_is_bijective_on_128_nodes() {
        let hosts: std::collections::BTreeSet<u32> =
            (0..128).map(|i| node_id_to_address(NodeId(i)).host_index).collect();
        assert_eq!(hosts, (1..=128).collect());
    }

    proptest! {
        #[test]
        fn mapping_bijection(n in 1u32..=4096) {
            let mut seen = vec![false; n as usize + 1];
            for i in 0..n {
                let a = node_id_to_address(NodeId(i));
                prop_assert!(a.host_index >= 1 && a.host_index <= n);
                prop_assert!(!seen[a.host_index as usize]);
                seen[a.host_index as usize] = true;
                prop_assert_eq!(address_to_node_id(a).unwrap(), NodeId(i));
            }
        }
    }
}
