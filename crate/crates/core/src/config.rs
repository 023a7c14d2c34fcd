//! Cluster configuration file (JSON).

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iod::IodConfig;
use crate::metamgr::{partition_setup, Partition, PartitionConfig};
use crate::transport::{NodeId, SimParams, DEFAULT_MTU};

/// Environment variable naming the cluster configuration file.
pub const CONFIG_ENV: &str = "STRIPEFS_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sim,
    Socket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub backend: Backend,
    pub latency_us: f64,
    pub bandwidth_bps: f64,
    pub mtu: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        let p = SimParams::default();
        TransportConfig {
            backend: Backend::Sim,
            latency_us: p.latency_us,
            bandwidth_bps: p.bandwidth_bps,
            mtu: DEFAULT_MTU,
        }
    }
}

impl TransportConfig {
    pub fn sim_params(&self) -> SimParams {
        SimParams { latency_us: self.latency_us, bandwidth_bps: self.bandwidth_bps }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub host: String,
    pub port: u16,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetamgrConfig {
    pub journal_path: Option<PathBuf>,
    /// Serve the manager from this node instead of the partition's last one.
    pub node: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub transport: TransportConfig,
    /// Socket addresses indexed by node id; only the socket backend uses them.
    pub nodes: Vec<NodeConfig>,
    pub partitions: Vec<PartitionConfig>,
    pub metamgr: MetamgrConfig,
    pub iod: IodConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig::single_partition(4)
    }
}

impl ClusterConfig {
    /// One partition `pvfs1` over nodes `0..n`, simulated transport.
    pub fn single_partition(n: u32) -> Self {
        ClusterConfig {
            transport: TransportConfig::default(),
            nodes: Vec::new(),
            partitions: vec![PartitionConfig { name: "pvfs1".into(), nodes: (0..n).collect() }],
            metamgr: MetamgrConfig::default(),
            iod: IodConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let cfg: ClusterConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the file named by `STRIPEFS_CONFIG`.
    pub fn from_env() -> Result<Self, ConfigError> {
        let path =
            std::env::var_os(CONFIG_ENV).ok_or_else(|| ConfigError::Invalid(format!("{CONFIG_ENV} is not set")))?;
        Self::load(path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.partitions()?;
        self.iod.cache_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.iod.throttle.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.transport.sim_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.transport.mtu < 4096 {
            return Err(ConfigError::Invalid(format!("mtu {} is below 4096", self.transport.mtu)));
        }
        if self.partitions.is_empty() {
            return Err(ConfigError::Invalid("no partitions".into()));
        }
        // an empty address book means every node listens on an ephemeral port
        if self.transport.backend == Backend::Socket && !self.nodes.is_empty() {
            for id in self.partitions.iter().flat_map(|p| p.nodes.iter()).chain(self.metamgr.node.iter()) {
                if *id as usize >= self.nodes.len() {
                    return Err(ConfigError::Invalid(format!("node {id} has no address")));
                }
            }
        }
        Ok(())
    }

    pub fn partitions(&self) -> Result<Vec<Partition>, ConfigError> {
        partition_setup(&self.partitions).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Node that serves the manager of `partition`.
    pub fn manager_node(&self, partition: &Partition) -> NodeId {
        self.metamgr.node.map(NodeId).unwrap_or(partition.mgmt_node)
    }

    /// Journal file for one partition's manager.
    pub fn journal_for(&self, partition: &str) -> Option<PathBuf> {
        let base = self.metamgr.journal_path.as_ref()?;
        if self.partitions.len() == 1 {
            Some(base.clone())
        } else {
            let mut name = base.as_os_str().to_owned();
            name.push(format!(".{partition}"));
            Some(PathBuf::from(name))
        }
    }

    pub fn socket_addr(&self, id: NodeId) -> Result<SocketAddr, ConfigError> {
        let n = self.nodes.get(id.0 as usize).ok_or_else(|| ConfigError::Invalid(format!("{id} has no address")))?;
        (n.host.as_str(), n.port)
            .to_socket_addrs()
            .map_err(|e| ConfigError::Invalid(format!("{}:{}: {e}", n.host, n.port)))?
            .next()
            .ok_or_else(|| ConfigError::Invalid(format!("{}:{} did not resolve", n.host, n.port)))
    }
}
