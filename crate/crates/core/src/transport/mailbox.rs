use std::sync::mpsc::{channel, Sender};
use std::thread;

use super::{Datagram, Handler, NodeId};

/// Serialized delivery for one node id: a queue drained by a dedicated
/// thread. The thread exits once every sender is gone and the queue is empty.
#[derive(Clone)]
pub(crate) struct Mailbox {
    tx: Sender<Datagram>,
}

impl Mailbox {
    pub(crate) fn spawn(id: NodeId, handler: Handler) -> Self {
        let (tx, rx) = channel::<Datagram>();
        thread::Builder::new()
            .name(format!("deliver-{}", id.0))
            .spawn(move || {
                for d in rx {
                    handler(d);
                }
            })
            .expect("spawn delivery thread");
        Mailbox { tx }
    }

    pub(crate) fn post(&self, d: Datagram) -> bool {
        self.tx.send(d).is_ok()
    }
}
