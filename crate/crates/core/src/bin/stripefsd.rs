use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::info;
use stripefs::cluster::{make_transport, serve_node, ClusterError, Role};
use stripefs::config::{ClusterConfig, ConfigError};
use stripefs::transport::NodeId;

/// Runs the I/O daemon and/or metadata manager of one node.
#[derive(Parser, Debug)]
#[command(name = "stripefsd", version)]
struct Cli {
    /// Roles to serve; a node that is both a daemon and a manager takes `iod,mgr`.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    role: Vec<RoleArg>,
    #[arg(long)]
    node_id: u32,
    /// Cluster configuration (JSON); defaults to $STRIPEFS_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum RoleArg {
    Iod,
    Mgr,
}

fn exit_code(e: &ClusterError) -> u8 {
    match e {
        ClusterError::Config(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), ClusterError> {
    let cfg = match &cli.config {
        Some(p) => ClusterConfig::load(p)?,
        None => ClusterConfig::from_env()?,
    };
    let node = NodeId(cli.node_id);
    if cfg.transport.backend == stripefs::config::Backend::Socket && cfg.nodes.len() <= node.0 as usize {
        return Err(ConfigError::Invalid(format!("{node} has no address")).into());
    }
    let roles: Vec<Role> = cli
        .role
        .iter()
        .map(|r| match r {
            RoleArg::Iod => Role::Iod,
            RoleArg::Mgr => Role::Mgr,
        })
        .collect();
    let transport = make_transport(&cfg)?;
    let _handle = serve_node(&cfg, transport, &roles, node)?;
    info!("{node} serving {roles:?}");
    eprintln!("stripefsd: {node} serving {roles:?}");
    loop {
        std::thread::park();
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stripefsd: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
