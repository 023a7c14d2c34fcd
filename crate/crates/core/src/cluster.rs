//! Launching daemons and managers, in this process or as `stripefsd` nodes.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::client::{form_group, Client, ClientError, GroupMember};
use crate::config::{Backend, ClusterConfig, ConfigError};
use crate::iod::{IoDaemon, IodConfig, IodError, IodService};
use crate::metamgr::{LocalDaemons, Manager, MgrError, MgrService, Partition, RemoteDaemons};
use crate::rpc::{Endpoint, Server, Service};
use crate::transport::{NodeId, SimTransport, SocketTransport, Transport, TransportError};

/// Manager endpoints used for daemon administration sit at this offset
/// from the manager's node id.
pub const ADMIN_ID_BASE: u32 = 0x4000_0000;
/// Client and group endpoints are allocated from this range upward.
pub const CLIENT_ID_BASE: u32 = 0x2000_0000;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Iod(#[from] IodError),
    #[error(transparent)]
    Mgr(#[from] MgrError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Other(String),
}

/// Which partitions one manager node serves, and its journal.
#[derive(Clone, Debug, PartialEq)]
pub struct ManagerPlan {
    pub node: NodeId,
    pub partitions: Vec<Partition>,
    pub journal: Option<PathBuf>,
}

/// Groups partitions by the node serving their manager.
pub fn manager_plans(cfg: &ClusterConfig) -> Result<Vec<ManagerPlan>, ConfigError> {
    let mut by_node: BTreeMap<NodeId, Vec<Partition>> = BTreeMap::new();
    for p in cfg.partitions()? {
        by_node.entry(cfg.manager_node(&p)).or_default().push(p);
    }
    Ok(by_node
        .into_iter()
        .map(|(node, partitions)| {
            let journal = if partitions.len() == 1 {
                cfg.journal_for(&partitions[0].name)
            } else {
                cfg.metamgr.journal_path.clone()
            };
            ManagerPlan { node, partitions, journal }
        })
        .collect())
}

/// Partition name to manager node.
pub fn manager_routes(cfg: &ClusterConfig) -> Result<BTreeMap<String, NodeId>, ConfigError> {
    Ok(manager_plans(cfg)?.into_iter().flat_map(|m| m.partitions.into_iter().map(move |p| (p.name, m.node))).collect())
}

/// Daemon configuration for `node`; every daemon stores under its own directory.
pub fn iod_config_for(cfg: &ClusterConfig, node: NodeId) -> IodConfig {
    let mut c = cfg.iod.clone();
    if let Some(dir) = &c.storage_dir {
        c.storage_dir = Some(dir.join(format!("iod{}", node.0)));
    }
    c
}

pub fn make_transport(cfg: &ClusterConfig) -> Result<Arc<dyn Transport>, ClusterError> {
    Ok(match cfg.transport.backend {
        Backend::Sim => Arc::new(SimTransport::with_mtu(cfg.transport.sim_params(), cfg.transport.mtu)?),
        Backend::Socket => {
            let mut book = HashMap::new();
            for i in 0..cfg.nodes.len() as u32 {
                book.insert(NodeId(i), cfg.socket_addr(NodeId(i))?);
            }
            Arc::new(SocketTransport::with_mtu(book, cfg.transport.mtu))
        }
    })
}

fn id_base() -> u32 {
    CLIENT_ID_BASE + ((std::process::id() % 0x1000) << 16)
}

/// A whole file system running inside this process.
pub struct Cluster {
    cfg: ClusterConfig,
    transport: Arc<dyn Transport>,
    daemons: BTreeMap<NodeId, Arc<IoDaemon>>,
    plans: Vec<ManagerPlan>,
    managers: Mutex<BTreeMap<NodeId, Arc<Manager>>>,
    servers: Mutex<BTreeMap<NodeId, Server>>,
    routes: BTreeMap<String, NodeId>,
    next_id: AtomicU32,
}

impl Cluster {
    pub fn launch(cfg: ClusterConfig) -> Result<Self, ClusterError> {
        cfg.validate()?;
        let transport = make_transport(&cfg)?;
        let mut daemons = BTreeMap::new();
        for p in cfg.partitions()? {
            for &n in &p.nodes {
                daemons.insert(n, Arc::new(IoDaemon::new(&iod_config_for(&cfg, n))?));
            }
        }
        let plans = manager_plans(&cfg)?;
        let cluster = Cluster {
            routes: manager_routes(&cfg)?,
            cfg,
            transport,
            daemons,
            plans,
            managers: Mutex::new(BTreeMap::new()),
            servers: Mutex::new(BTreeMap::new()),
            next_id: AtomicU32::new(id_base()),
        };
        for &n in cluster.daemons.keys() {
            cluster.serve(n)?;
        }
        for node in cluster.plans.iter().map(|m| m.node).collect::<Vec<_>>() {
            cluster.start_manager(node)?;
        }
        Ok(cluster)
    }

    /// `n` daemons in one partition over the simulated network.
    pub fn sim(n: u32) -> Result<Self, ClusterError> {
        Self::launch(ClusterConfig::single_partition(n))
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn daemon(&self, node: NodeId) -> Option<&Arc<IoDaemon>> {
        self.daemons.get(&node)
    }

    pub fn daemons(&self) -> &BTreeMap<NodeId, Arc<IoDaemon>> {
        &self.daemons
    }

    pub fn manager(&self, node: NodeId) -> Option<Arc<Manager>> {
        self.managers.lock().unwrap().get(&node).cloned()
    }

    /// Manager nodes, one per plan.
    pub fn manager_nodes(&self) -> Vec<NodeId> {
        self.plans.iter().map(|m| m.node).collect()
    }

    pub fn routes(&self) -> &BTreeMap<String, NodeId> {
        &self.routes
    }

    pub fn alloc_id(&self) -> NodeId {
        NodeId(self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    pub fn client(&self) -> Result<Client, ClusterError> {
        Ok(Client::new(self.transport.clone(), self.alloc_id(), self.routes.clone())?)
    }

    /// `p` clients and their group members; element `k` is rank `k`.
    pub fn group(&self, p: usize) -> Result<Vec<(Client, GroupMember)>, ClusterError> {
        let clients = (0..p).map(|_| self.client()).collect::<Result<Vec<_>, _>>()?;
        let members = form_group(self.transport.clone(), (0..p).map(|_| self.alloc_id()).collect())?;
        Ok(clients.into_iter().zip(members).collect())
    }

    /// (Re)builds the server of `node` with whatever services live there.
    fn serve(&self, node: NodeId) -> Result<(), ClusterError> {
        let max_payload = self.transport.mtu();
        let mut routes: Vec<(std::ops::RangeInclusive<u8>, Box<dyn Service>)> = Vec::new();
        if let Some(d) = self.daemons.get(&node) {
            routes.push((1..=7, Box::new(IodService { daemon: d.clone(), max_payload })));
        }
        if let Some(m) = self.managers.lock().unwrap().get(&node) {
            routes.push((10..=14, Box::new(MgrService { manager: m.clone(), max_payload })));
        }
        let mut servers = self.servers.lock().unwrap();
        if let Some(old) = servers.remove(&node) {
            old.stop();
        }
        if !routes.is_empty() {
            servers.insert(node, Server::start(self.transport.clone(), node, routes)?);
        }
        Ok(())
    }

    /// Simulates a manager crash: the service disappears and its in-memory
    /// state is dropped. Daemons on the same node keep running.
    pub fn stop_manager(&self, node: NodeId) -> Result<(), ClusterError> {
        self.managers.lock().unwrap().remove(&node);
        self.serve(node)
    }

    /// Starts the manager of `node`, replaying its journal.
    pub fn start_manager(&self, node: NodeId) -> Result<(), ClusterError> {
        let plan = self
            .plans
            .iter()
            .find(|m| m.node == node)
            .ok_or_else(|| ClusterError::Other(format!("{node} serves no manager")))?;
        let admin = LocalDaemons(self.daemons.iter().map(|(&n, d)| (n, d.clone())).collect());
        let m = Manager::new(plan.partitions.clone(), plan.journal.clone(), Box::new(admin))?;
        self.managers.lock().unwrap().insert(node, Arc::new(m));
        self.serve(node)
    }

    pub fn restart_manager(&self, node: NodeId) -> Result<(), ClusterError> {
        self.stop_manager(node)?;
        self.start_manager(node)
    }

    /// Flushes and settles every daemon.
    pub fn settle(&self) -> Result<(), ClusterError> {
        for d in self.daemons.values() {
            d.flush(None)?;
            d.settle()?;
        }
        Ok(())
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for (_, s) in std::mem::take(&mut *self.servers.lock().unwrap()) {
            s.stop();
        }
    }
}

/// Roles a `stripefsd` process can play.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Iod,
    Mgr,
}

/// Serves the given roles of one node until the returned handle is
/// dropped. A node that is both a daemon and a manager needs both roles in
/// one process, since the node id owns a single address.
pub struct NodeHandle {
    _server: Server,
    pub daemon: Option<Arc<IoDaemon>>,
    pub manager: Option<Arc<Manager>>,
}

pub fn serve_node(
    cfg: &ClusterConfig,
    transport: Arc<dyn Transport>,
    roles: &[Role],
    node: NodeId,
) -> Result<NodeHandle, ClusterError> {
    let max_payload = transport.mtu();
    let mut routes: Vec<(std::ops::RangeInclusive<u8>, Box<dyn Service>)> = Vec::new();
    let (mut daemon, mut manager) = (None, None);
    if roles.contains(&Role::Iod) {
        if !cfg.partitions()?.iter().any(|p| p.nodes.contains(&node)) {
            return Err(ConfigError::Invalid(format!("{node} is not in any partition")).into());
        }
        let d = Arc::new(IoDaemon::new(&iod_config_for(cfg, node))?);
        routes.push((1..=7, Box::new(IodService { daemon: d.clone(), max_payload })));
        daemon = Some(d);
    }
    if roles.contains(&Role::Mgr) {
        let plan = manager_plans(cfg)?
            .into_iter()
            .find(|m| m.node == node)
            .ok_or_else(|| ConfigError::Invalid(format!("{node} serves no manager")))?;
        // daemons, including one on this node, are reached over the network;
        // each service runs on its own thread so that cannot deadlock
        let admin = RemoteDaemons::new(Endpoint::bind(transport.clone(), NodeId(ADMIN_ID_BASE + node.0))?);
        let m = Arc::new(Manager::new(plan.partitions, plan.journal, Box::new(admin))?);
        routes.push((10..=14, Box::new(MgrService { manager: m.clone(), max_payload })));
        manager = Some(m);
    }
    if routes.is_empty() {
        return Err(ConfigError::Invalid("no role to serve".into()).into());
    }
    let server = Server::start(transport, node, routes)?;
    Ok(NodeHandle { _server: server, daemon, manager })
}

/// A client of an externally running cluster.
pub fn remote_client(cfg: &ClusterConfig, transport: Arc<dyn Transport>) -> Result<Client, ClusterError> {
    static NEXT: AtomicU32 = AtomicU32::new(0);
    let id = NodeId(id_base() + 0x8000 + NEXT.fetch_add(1, Ordering::Relaxed));
    Ok(Client::new(transport, id, manager_routes(cfg)?)?)
}
