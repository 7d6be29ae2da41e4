//! Task-side service: holds registered partitions and runs them per step.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use super::rendezvous::{LocalRendezvous, RecvCallback, Rendezvous, RendezvousKey};
use super::transport::Transport;
use super::wire::{Message, PartitionDef};
use crate::cancel::CancelToken;
use crate::error::{Error, Result};
use crate::executor::{Executor, StepArgs};
use crate::graph::{json, Endpoint};
use crate::kernel::Device;
use crate::placement::DeviceSpec;
use crate::tensor::Tensor;

/// How long a worker waits on a peer to accept a tensor.
pub const CHUNK_TIMEOUT: Duration = Duration::from_secs(30);

/// Routes values for local devices through an in-memory table and pushes
/// values for other tasks to them as TensorChunk messages.
pub struct WorkerRendezvous {
    task: String,
    local: LocalRendezvous,
    peers: OnceLock<Arc<dyn Transport>>,
}

impl WorkerRendezvous {
    fn dst_task(key: &RendezvousKey) -> Result<String> {
        Ok(DeviceSpec::parse(&key.dst)?.task_name())
    }

    pub fn local(&self) -> &LocalRendezvous {
        &self.local
    }
}

impl Rendezvous for WorkerRendezvous {
    fn send(&self, key: &RendezvousKey, value: Option<Tensor>) -> Result<()> {
        let dst = Self::dst_task(key)?;
        if dst == self.task {
            return self.local.send(key, value);
        }
        let peers = self
            .peers
            .get()
            .ok_or_else(|| Error::Unavailable(format!("{} has no transport to reach {dst}", self.task)))?;
        peers
            .call(
                &dst,
                Message::TensorChunk {
                    key: key.to_string(),
                    value,
                },
                CHUNK_TIMEOUT,
            )
            .map(|_| ())
    }

    fn recv_async(&self, key: &RendezvousKey, done: RecvCallback) {
        self.local.recv_async(key, done)
    }

    fn abort_step(&self, step_id: u64, reason: &str) {
        self.local.abort_step(step_id, reason)
    }

    fn cleanup_step(&self, step_id: u64) {
        self.local.cleanup_step(step_id)
    }
}

struct Part {
    exec: Executor,
    /// (position in the registered fetch list, endpoint)
    fetches: Vec<(usize, Endpoint)>,
}

struct Registered {
    parts: Vec<Part>,
    fetches: Vec<String>,
}

/// One task. Devices and their resources outlive sessions, so variables
/// persist across clients.
pub struct WorkerService {
    task: String,
    devices: Mutex<BTreeMap<String, Arc<Device>>>,
    registered: Mutex<HashMap<(String, String), Arc<Registered>>>,
    rendezvous: Arc<WorkerRendezvous>,
    active: Mutex<HashMap<u64, CancelToken>>,
    aborted: Mutex<HashSet<u64>>,
    crashed: AtomicBool,
    /// Per-step deadline applied by this worker, in addition to the master's.
    pub step_timeout: Option<Duration>,
}

impl WorkerService {
    /// `task` is `/job:J/task:T`.
    pub fn new(task: &str) -> Arc<WorkerService> {
        Arc::new(WorkerService {
            task: task.to_string(),
            devices: Mutex::new(BTreeMap::new()),
            registered: Mutex::new(HashMap::new()),
            rendezvous: Arc::new(WorkerRendezvous {
                task: task.to_string(),
                local: LocalRendezvous::new(),
                peers: OnceLock::new(),
            }),
            active: Mutex::new(HashMap::new()),
            aborted: Mutex::new(HashSet::new()),
            crashed: AtomicBool::new(false),
            step_timeout: None,
        })
    }

    /// Sets the transport used to push tensors to other tasks. Only the first
    /// call has an effect.
    pub fn connect_peers(&self, t: Arc<dyn Transport>) {
        let _ = self.rendezvous.peers.set(t);
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn rendezvous(&self) -> &Arc<WorkerRendezvous> {
        &self.rendezvous
    }

    /// The device, created on first use. It must belong to this task.
    pub fn device(&self, name: &str) -> Result<Arc<Device>> {
        let spec = DeviceSpec::parse(name)?;
        if spec.task_name() != self.task {
            return Err(Error::invalid(format!("device {name} does not belong to {}", self.task)));
        }
        let canonical = spec.canonical();
        Ok(self
            .devices
            .lock()
            .unwrap()
            .entry(canonical.clone())
            .or_insert_with(|| Arc::new(Device::cpu(canonical)))
            .clone())
    }

    pub fn active_steps(&self) -> usize {
        self.active.lock().unwrap().len()
    }

    /// Simulates a crash: cancels running steps and refuses further work.
    pub fn crash(&self) {
        self.crashed.store(true, Ordering::Release);
        for (id, c) in self.active.lock().unwrap().iter() {
            c.cancel("task crashed");
            self.rendezvous.abort_step(*id, "task crashed");
        }
    }

    pub fn handle(&self, msg: Message) -> Message {
        if self.crashed.load(Ordering::Acquire) {
            return Message::from_error(&Error::Unavailable(format!("{} has crashed", self.task)));
        }
        let r = match msg {
            Message::CreateSession { .. } => Ok(Message::ack()),
            Message::RegisterSubgraph {
                session,
                handle,
                partitions,
                fetches,
            } => self.register(session, handle, &partitions, fetches).map(|_| Message::ack()),
            Message::RunPartition {
                session,
                handle,
                step_id,
                feeds,
            } => self.run(&session, &handle, step_id, feeds),
            Message::TensorChunk { key, value } => RendezvousKey::parse(&key)
                .and_then(|k| self.rendezvous.local.send(&k, value))
                .map(|_| Message::ack()),
            Message::Heartbeat { seq } => Ok(Message::Heartbeat { seq }),
            Message::AbortStep { step_id, reason } => {
                self.abort(step_id, &reason);
                Ok(Message::ack())
            }
            Message::StepDone { .. } | Message::Error { .. } => {
                Err(Error::Wire("workers do not accept replies as requests".into()))
            }
        };
        r.unwrap_or_else(|e| Message::from_error(&e))
    }

    fn register(&self, session: String, handle: String, parts: &[PartitionDef], fetches: Vec<String>) -> Result<()> {
        let mut built = Vec::with_capacity(parts.len());
        let mut placed = vec![false; fetches.len()];
        let eps: Vec<Endpoint> = fetches.iter().map(|f| f.parse()).collect::<Result<_>>()?;
        for p in parts {
            let g = json::from_json(&p.graph_json)?;
            let exec = Executor::new(&g, self.device(&p.device)?)?;
            let mut mine = Vec::new();
            for (i, e) in eps.iter().enumerate() {
                if !placed[i] && g.contains(&e.node) {
                    placed[i] = true;
                    mine.push((i, e.clone()));
                }
            }
            built.push(Part { exec, fetches: mine });
        }
        if let Some(i) = placed.iter().position(|p| !p) {
            return Err(Error::NotFound(format!("fetch '{}' is not in any partition on {}", fetches[i], self.task)));
        }
        self.registered.lock().unwrap().insert(
            (session, handle),
            Arc::new(Registered {
                parts: built,
                fetches,
            }),
        );
        Ok(())
    }

    fn abort(&self, step_id: u64, reason: &str) {
        self.aborted.lock().unwrap().insert(step_id);
        if let Some(c) = self.active.lock().unwrap().get(&step_id) {
            c.cancel(reason);
        }
        self.rendezvous.abort_step(step_id, reason);
    }

    fn run(&self, session: &str, handle: &str, step_id: u64, feeds: Vec<(String, Tensor)>) -> Result<Message> {
        let reg = self
            .registered
            .lock()
            .unwrap()
            .get(&(session.to_string(), handle.to_string()))
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("subgraph {session}/{handle} is not registered on {}", self.task)))?;
        let cancel = CancelToken::new();
        {
            let mut active = self.active.lock().unwrap();
            if self.aborted.lock().unwrap().remove(&step_id) {
                return Err(Error::Cancelled(format!("step {step_id} was aborted")));
            }
            if active.insert(step_id, cancel.clone()).is_some() {
                return Err(Error::Consistency(format!("step {step_id} is already running on {}", self.task)));
            }
        }
        let feeds: HashMap<String, Tensor> = feeds.into_iter().collect();
        let results: Vec<Result<Vec<Tensor>>> = std::thread::scope(|s| {
            let run_part = |p: &Part| {
                let mut args = StepArgs::new(step_id, self.rendezvous.clone());
                args.feeds = feeds.clone();
                args.cancel = cancel.clone();
                args.timeout = self.step_timeout;
                args.cleanup = false;
                let eps: Vec<Endpoint> = p.fetches.iter().map(|(_, e)| e.clone()).collect();
                let r = p.exec.run(args, &eps);
                if let Err(e) = &r {
                    // unblock sibling partitions waiting on this one
                    cancel.cancel(&e.to_string());
                    self.rendezvous.abort_step(step_id, &e.to_string());
                }
                r
            };
            let (first, rest) = reg.parts.split_first().expect("registered with at least one partition");
            let handles: Vec<_> = rest.iter().map(|p| s.spawn(move || run_part(p))).collect();
            let mut out = vec![run_part(first)];
            out.extend(handles.into_iter().map(|h| h.join().expect("partition thread panicked")));
            out
        });
        self.active.lock().unwrap().remove(&step_id);
        self.rendezvous.cleanup_step(step_id);
        if self.crashed.load(Ordering::Acquire) {
            return Err(Error::Unavailable(format!("{} crashed during step {step_id}", self.task)));
        }
        let mut outputs: Vec<Option<Tensor>> = vec![None; reg.fetches.len()];
        let mut err: Option<Error> = None;
        for (p, r) in reg.parts.iter().zip(results) {
            match r {
                Ok(ts) => {
                    for ((pos, _), t) in p.fetches.iter().zip(ts) {
                        outputs[*pos] = Some(t);
                    }
                }
                Err(e) => {
                    let replace = match &err {
                        None => true,
                        Some(prev) => matches!(prev.root(), Error::Cancelled(_)) && !matches!(e.root(), Error::Cancelled(_)),
                    };
                    if replace {
                        err = Some(e);
                    }
                }
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        Ok(Message::StepDone {
            step_id,
            outputs: reg
                .fetches
                .iter()
                .cloned()
                .zip(outputs.into_iter().map(|t| t.expect("every fetch has a partition")))
                .collect(),
        })
    }
}
