//! Distributed execution: master session, worker services, transports.

pub mod cluster;
pub mod rendezvous;
pub mod session;
pub mod transport;
pub mod wire;
pub mod worker;

pub use cluster::{parse_task_id, ClusterConfig};
pub use session::{Cluster, ClusterOptions, MessageCounters, Session};
pub use transport::{InprocTransport, Server, TcpTransport, Transport};
pub use wire::{Message, MsgType};
pub use worker::WorkerService;

use std::net::TcpListener;
use std::sync::Arc;

/// Starts TCP workers on loopback ports, one per task of `jobs`, and
/// returns the matching config. Workers stop when their servers drop.
pub fn start_loopback_workers(jobs: &[(&str, usize)]) -> crate::Result<(ClusterConfig, Vec<Server>)> {
    let mut listeners = Vec::new();
    let mut cfg = ClusterConfig {
        jobs: Default::default(),
    };
    for (job, n) in jobs {
        let addrs = cfg.jobs.entry(job.to_string()).or_default();
        for i in 0..*n {
            let l = TcpListener::bind("127.0.0.1:0")?;
            addrs.push(l.local_addr()?.to_string());
            listeners.push((cluster::task_name(job, i), l));
        }
    }
    let mut servers = Vec::new();
    for (task, l) in listeners {
        let w = WorkerService::new(&task);
        w.connect_peers(Arc::new(TcpTransport::new(cfg.addresses())));
        servers.push(Server::start(l, w)?);
    }
    Ok((cfg, servers))
}
