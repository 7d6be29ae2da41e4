//! `miniflow worker`: serve one task of a TCP cluster.

use std::net::TcpListener;
use std::sync::Arc;

use miniflow::runtime::cluster::{parse_task_id, task_name};
use miniflow::runtime::transport::{Server, TcpTransport};
use miniflow::runtime::{ClusterConfig, WorkerService};
use miniflow::{Error, Result};

/// Binds the task's address and starts serving. `task` is `job:index`.
pub fn start(config: &ClusterConfig, task: &str) -> Result<Server> {
    if config.is_inproc() {
        return Err(Error::InvalidArgument("a worker process needs a cluster file with TCP addresses".into()));
    }
    let (job, index) = parse_task_id(task)?;
    let addr = config
        .address(&job, index)
        .ok_or_else(|| Error::InvalidArgument(format!("task {job}:{index} is not in the cluster file")))?;
    let listener = TcpListener::bind(addr)?;
    let service = WorkerService::new(&task_name(&job, index));
    service.connect_peers(Arc::new(TcpTransport::new(config.addresses())));
    Server::start(listener, service)
}
