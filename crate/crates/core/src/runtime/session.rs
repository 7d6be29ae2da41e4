//! Client-side master: prunes, places and partitions a graph per step
//! signature, registers the pieces once, then drives steps with one
//! RunPartition per participating task.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::cluster::ClusterConfig;
use super::transport::{InprocTransport, TcpTransport, Transport};
use super::wire::{Message, MsgType, PartitionDef};
use super::worker::WorkerService;
use crate::error::{Error, Result};
use crate::graph::{json, prune, validate, Endpoint, GraphDef, GraphInfo};
use crate::placement::{partition, place, DeviceSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    /// Deadline for one RunPartition reply.
    pub run_timeout: Duration,
    /// Deadline for session setup, registration and abort messages.
    pub control_timeout: Duration,
    /// `None` disables the heartbeat thread.
    pub heartbeat_interval: Option<Duration>,
    /// A task whose last successful heartbeat is older than this is down.
    pub dead_after: Duration,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            run_timeout: Duration::from_secs(60),
            control_timeout: Duration::from_secs(10),
            heartbeat_interval: Some(Duration::from_secs(1)),
            dead_after: Duration::from_secs(5),
        }
    }
}

/// Messages sent by the master, per task and type.
#[derive(Debug, Default)]
pub struct MessageCounters {
    counts: Mutex<BTreeMap<(String, MsgType), u64>>,
}

impl MessageCounters {
    fn bump(&self, task: &str, ty: MsgType) {
        *self.counts.lock().unwrap().entry((task.to_string(), ty)).or_default() += 1;
    }

    pub fn get(&self, task: &str, ty: MsgType) -> u64 {
        self.counts
            .lock()
            .unwrap()
            .get(&(task.to_string(), ty))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, ty: MsgType) -> u64 {
        self.counts
            .lock()
            .unwrap()
            .iter()
            .filter(|((_, t), _)| *t == ty)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<(String, MsgType), u64> {
        self.counts.lock().unwrap().clone()
    }

    pub fn reset(&self) {
        self.counts.lock().unwrap().clear();
    }
}

struct Health {
    last_ok: Mutex<HashMap<String, Instant>>,
    dead_after: Duration,
}

impl Health {
    fn is_down(&self, task: &str) -> bool {
        self.last_ok
            .lock()
            .unwrap()
            .get(task)
            .is_some_and(|t| t.elapsed() > self.dead_after)
    }
}

/// The set of tasks a client talks to. In-process clusters own their
/// workers.
pub struct Cluster {
    config: ClusterConfig,
    opts: ClusterOptions,
    transport: Arc<dyn Transport>,
    inproc: Option<Arc<InprocTransport>>,
    workers: Mutex<BTreeMap<String, Arc<WorkerService>>>,
    counters: MessageCounters,
    health: Arc<Health>,
    stop: Arc<AtomicBool>,
    heartbeat: Mutex<Option<JoinHandle<()>>>,
}

impl Cluster {
    pub fn inproc(n: usize) -> Result<Arc<Cluster>> {
        Cluster::connect(ClusterConfig::inproc(n), ClusterOptions::default())
    }

    /// Starts in-process workers or connects to TCP ones, then checks that
    /// every task answers a heartbeat.
    pub fn connect(config: ClusterConfig, opts: ClusterOptions) -> Result<Arc<Cluster>> {
        let tasks = config.tasks();
        let mut workers = BTreeMap::new();
        let (transport, inproc): (Arc<dyn Transport>, _) = if config.is_inproc() {
            let t = Arc::new(InprocTransport::new());
            for task in &tasks {
                let w = WorkerService::new(task);
                w.connect_peers(t.clone());
                t.register(task, &w);
                workers.insert(task.clone(), w);
            }
            (t.clone(), Some(t))
        } else {
            (Arc::new(TcpTransport::new(config.addresses())), None)
        };
        let now = Instant::now();
        let health = Arc::new(Health {
            last_ok: Mutex::new(tasks.iter().map(|t| (t.clone(), now)).collect()),
            dead_after: opts.dead_after,
        });
        let cluster = Arc::new(Cluster {
            config,
            opts,
            transport,
            inproc,
            workers: Mutex::new(workers),
            counters: MessageCounters::default(),
            health,
            stop: Arc::new(AtomicBool::new(false)),
            heartbeat: Mutex::new(None),
        });
        for t in &tasks {
            cluster.ping(t)?;
        }
        if let Some(every) = cluster.opts.heartbeat_interval {
            let (transport, health, stop) = (cluster.transport.clone(), cluster.health.clone(), cluster.stop.clone());
            let h = std::thread::Builder::new()
                .name("heartbeat".into())
                .spawn(move || heartbeat_loop(transport, health, stop, tasks, every))?;
            *cluster.heartbeat.lock().unwrap() = Some(h);
        }
        Ok(cluster)
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn options(&self) -> &ClusterOptions {
        &self.opts
    }

    pub fn tasks(&self) -> Vec<String> {
        self.config.tasks()
    }

    pub fn devices(&self) -> Vec<DeviceSpec> {
        self.config.devices()
    }

    pub fn counters(&self) -> &MessageCounters {
        &self.counters
    }

    /// Sends a message and counts it.
    pub fn call(&self, task: &str, msg: Message, timeout: Duration) -> Result<Message> {
        self.counters.bump(task, msg.msg_type());
        self.transport.call(task, msg, timeout)
    }

    pub fn ping(&self, task: &str) -> Result<()> {
        match self.transport.call(task, Message::Heartbeat { seq: 0 }, self.opts.control_timeout)? {
            Message::Heartbeat { .. } => {
                self.health.last_ok.lock().unwrap().insert(task.to_string(), Instant::now());
                Ok(())
            }
            other => Err(Error::Wire(format!("heartbeat answered with {:?}", other.msg_type()))),
        }
    }

    /// True once the task has missed heartbeats for longer than `dead_after`.
    pub fn is_down(&self, task: &str) -> bool {
        self.health.is_down(task)
    }

    /// The in-process worker for `task`.
    pub fn worker(&self, task: &str) -> Option<Arc<WorkerService>> {
        self.workers.lock().unwrap().get(task).cloned()
    }

    /// Crashes an in-process task: its running steps fail and it stops
    /// answering.
    pub fn kill_task(&self, task: &str) -> Result<()> {
        let (w, t) = self.inproc_parts(task)?;
        w.crash();
        t.set_down(task, true);
        Ok(())
    }

    /// Replaces a killed in-process task with a fresh one that has lost all
    /// registered graphs and state.
    pub fn restart_task(&self, task: &str) -> Result<()> {
        let (_, t) = self.inproc_parts(task)?;
        let w = WorkerService::new(task);
        w.connect_peers(t.clone());
        t.register(task, &w);
        self.workers.lock().unwrap().insert(task.to_string(), w);
        t.set_down(task, false);
        self.ping(task)
    }

    fn inproc_parts(&self, task: &str) -> Result<(Arc<WorkerService>, Arc<InprocTransport>)> {
        match (self.worker(task), &self.inproc) {
            (Some(w), Some(t)) => Ok((w, t.clone())),
            _ => Err(Error::invalid(format!("{task} is not an in-process task"))),
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}

fn heartbeat_loop(t: Arc<dyn Transport>, health: Arc<Health>, stop: Arc<AtomicBool>, tasks: Vec<String>, every: Duration) {
    let mut seq = 0;
    while !stop.load(Ordering::Acquire) {
        for task in &tasks {
            seq += 1;
            if let Ok(Message::Heartbeat { .. }) = t.call(task, Message::Heartbeat { seq }, every) {
                health.last_ok.lock().unwrap().insert(task.clone(), Instant::now());
            } else if health.is_down(task) {
                log::warn!("{task} missed heartbeats for more than {:?}", health.dead_after);
            }
        }
        let until = Instant::now() + every;
        while Instant::now() < until && !stop.load(Ordering::Acquire) {
            std::thread::sleep(crate::cancel::POLL.min(every));
        }
    }
}

static STEP_IDS: std::sync::OnceLock<AtomicU64> = std::sync::OnceLock::new();

/// Step ids start at a random point so independent clients sharing
/// workers do not collide.
fn next_step_id() -> u64 {
    STEP_IDS
        .get_or_init(|| AtomicU64::new((rand::random::<u64>() >> 2).max(1)))
        .fetch_add(1, Ordering::Relaxed)
}

struct TaskPlan {
    task: String,
    /// (fed endpoint as given by the client, key of its feed node)
    feeds: Vec<(String, String)>,
    /// Positions in the client's fetch list, in the order the task returns them.
    fetch_slots: Vec<usize>,
}

struct Plan {
    handle: String,
    tasks: Vec<TaskPlan>,
}

/// A graph bound to a cluster.
pub struct Session {
    id: String,
    cluster: Arc<Cluster>,
    graph: GraphDef,
    info: GraphInfo,
    cache: Mutex<HashMap<String, Arc<Plan>>>,
    handles: AtomicU64,
}

/// Canonical cache key: sorted feeds, fetches and targets.
pub fn step_signature(feeds: &[Endpoint], fetches: &[Endpoint], targets: &[String]) -> String {
    let sorted = |v: Vec<String>| {
        let mut v = v;
        v.sort();
        v.join(",")
    };
    format!(
        "{}|{}|{}",
        sorted(feeds.iter().map(|e| e.to_string()).collect()),
        sorted(fetches.iter().map(|e| e.to_string()).collect()),
        sorted(targets.to_vec()),
    )
}

impl Session {
    pub fn new(cluster: Arc<Cluster>, graph: GraphDef) -> Result<Session> {
        let info = validate(&graph)?;
        let id = format!("s{:016x}", rand::random::<u64>());
        for t in cluster.tasks() {
            cluster.call(&t, Message::CreateSession { session: id.clone() }, cluster.opts.control_timeout)?;
        }
        Ok(Session {
            id,
            cluster,
            graph,
            info,
            cache: Mutex::new(HashMap::new()),
            handles: AtomicU64::new(0),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn graph(&self) -> &GraphDef {
        &self.graph
    }

    pub fn cluster(&self) -> &Arc<Cluster> {
        &self.cluster
    }

    /// Number of cached step signatures.
    pub fn cached_plans(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn run(&self, feeds: &[(Endpoint, Tensor)], fetches: &[Endpoint]) -> Result<Vec<Tensor>> {
        self.run_targets(feeds, fetches, &[])
    }

    /// Runs one step. `targets` are nodes run for their effects only.
    pub fn run_targets(&self, feeds: &[(Endpoint, Tensor)], fetches: &[Endpoint], targets: &[String]) -> Result<Vec<Tensor>> {
        for (ep, t) in feeds {
            if let Some(want) = self.info.output_type(&ep.node, ep.index).and_then(|t| t.tensor_dtype()) {
                if want != t.dtype() {
                    return Err(Error::DTypeMismatch {
                        op: format!("feed {ep}"),
                        expected: want,
                        got: t.dtype(),
                    });
                }
            }
        }
        let feed_eps: Vec<Endpoint> = feeds.iter().map(|(e, _)| e.clone()).collect();
        let sig = step_signature(&feed_eps, fetches, targets);
        let plan = self.plan(&sig, &feed_eps, fetches, targets)?;
        let r = self.execute(&plan, feeds, fetches.len());
        if let Err(e) = &r {
            if matches!(e.root(), Error::Unavailable(_) | Error::NotFound(_)) {
                // the task may come back without our subgraphs
                self.cache.lock().unwrap().remove(&sig);
            }
        }
        r
    }

    fn plan(&self, sig: &str, feeds: &[Endpoint], fetches: &[Endpoint], targets: &[String]) -> Result<Arc<Plan>> {
        let mut cache = self.cache.lock().unwrap();
        if let Some(p) = cache.get(sig) {
            return Ok(p.clone());
        }
        let pruned = prune(&self.graph, feeds, fetches, targets)?;
        let assignment = place(&pruned.graph, &self.cluster.devices())?;
        let parts = partition(&pruned.graph, &assignment)?;
        let task_of = |node: &str| -> Result<String> {
            assignment
                .device_of(node)
                .map(DeviceSpec::task_name)
                .ok_or_else(|| Error::Internal(format!("node '{node}' was not placed")))
        };

        let mut by_task: BTreeMap<String, (Vec<PartitionDef>, TaskPlan, Vec<String>)> = BTreeMap::new();
        for (dev, g) in &parts.partitions {
            let e = by_task.entry(dev.task_name()).or_insert_with(|| new_task(dev.task_name()));
            e.0.push(PartitionDef {
                device: dev.canonical(),
                graph_json: json::to_json(g),
            });
        }
        for (pos, f) in pruned.fetches.iter().enumerate() {
            let e = by_task.entry(task_of(&f.node)?).or_insert_with_key(|t| new_task(t.clone()));
            e.1.fetch_slots.push(pos);
            e.2.push(f.to_string());
        }
        for (ep, node) in &pruned.feed_nodes {
            let key = pruned
                .graph
                .node(node)
                .and_then(|n| n.attr_str("key").ok())
                .unwrap_or_default()
                .to_string();
            let e = by_task.entry(task_of(node)?).or_insert_with_key(|t| new_task(t.clone()));
            e.1.feeds.push((ep.to_string(), key));
        }

        let handle = format!("g{}", self.handles.fetch_add(1, Ordering::Relaxed));
        let mut tasks = Vec::with_capacity(by_task.len());
        for (task, (partitions, tp, fetch_names)) in by_task {
            self.cluster.call(
                &task,
                Message::RegisterSubgraph {
                    session: self.id.clone(),
                    handle: handle.clone(),
                    partitions,
                    fetches: fetch_names,
                },
                self.cluster.opts.control_timeout,
            )?;
            tasks.push(tp);
        }
        let plan = Arc::new(Plan { handle, tasks });
        cache.insert(sig.to_string(), plan.clone());
        Ok(plan)
    }

    fn execute(&self, plan: &Plan, feeds: &[(Endpoint, Tensor)], num_fetches: usize) -> Result<Vec<Tensor>> {
        if plan.tasks.is_empty() {
            return Ok(Vec::new());
        }
        for tp in &plan.tasks {
            if self.cluster.is_down(&tp.task) {
                return Err(Error::Unavailable(format!("{} is down", tp.task)));
            }
        }
        let values: HashMap<String, &Tensor> = feeds.iter().map(|(e, t)| (e.to_string(), t)).collect();
        let step_id = next_step_id();
        let (tx, rx) = mpsc::channel();
        for (i, tp) in plan.tasks.iter().enumerate() {
            let feeds = tp
                .feeds
                .iter()
                .map(|(ep, key)| (key.clone(), values[ep].clone()))
                .collect();
            let msg = Message::RunPartition {
                session: self.id.clone(),
                handle: plan.handle.clone(),
                step_id,
                feeds,
            };
            let (cluster, task, tx) = (self.cluster.clone(), tp.task.clone(), tx.clone());
            let timeout = self.cluster.opts.run_timeout;
            std::thread::spawn(move || {
                let _ = tx.send((i, cluster.call(&task, msg, timeout)));
            });
        }
        drop(tx);

        let mut outputs: Vec<Option<Tensor>> = vec![None; num_fetches];
        let mut pending = plan.tasks.len();
        let mut failure: Option<Error> = None;
        let mut grace: Option<Instant> = None;
        while pending > 0 {
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok((i, Ok(Message::StepDone { outputs: outs, .. }))) => {
                    pending -= 1;
                    let slots = &plan.tasks[i].fetch_slots;
                    if outs.len() != slots.len() {
                        failure = Some(Error::Wire(format!(
                            "{} returned {} outputs, expected {}",
                            plan.tasks[i].task,
                            outs.len(),
                            slots.len()
                        )));
                        break;
                    }
                    for (&s, (_, t)) in slots.iter().zip(outs) {
                        outputs[s] = Some(t);
                    }
                }
                Ok((i, Ok(other))) => {
                    failure = Some(Error::Wire(format!(
                        "{} answered RunPartition with {:?}",
                        plan.tasks[i].task,
                        other.msg_type()
                    )));
                    break;
                }
                Ok((_, Err(e))) => {
                    pending -= 1;
                    if !matches!(e.root(), Error::Cancelled(_)) {
                        failure = Some(e);
                        break;
                    }
                    // a cancelled task implies a failure elsewhere; keep
                    // waiting briefly so the client sees the cause
                    failure.get_or_insert(e);
                    grace.get_or_insert(Instant::now() + Duration::from_secs(1));
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    if grace.is_some_and(|g| Instant::now() > g) {
                        break;
                    }
                    if let Some(t) = plan.tasks.iter().find(|t| self.cluster.is_down(&t.task)) {
                        failure = Some(Error::Unavailable(format!("{} stopped answering heartbeats during step {step_id}", t.task)));
                        break;
                    }
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
        if let Some(e) = failure {
            self.abort(plan, step_id, &e);
            return Err(e);
        }
        outputs
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Internal("a fetch was not returned".into())))
            .collect()
    }

    /// Tells every participating task to drop the step. Runs in the
    /// background so an unreachable task cannot delay the client.
    fn abort(&self, plan: &Plan, step_id: u64, cause: &Error) {
        for tp in &plan.tasks {
            let (cluster, task) = (self.cluster.clone(), tp.task.clone());
            let reason = cause.to_string();
            std::thread::spawn(move || {
                let timeout = cluster.opts.control_timeout;
                let _ = cluster.call(&task, Message::AbortStep { step_id, reason }, timeout);
            });
        }
    }
}

fn new_task(task: String) -> (Vec<PartitionDef>, TaskPlan, Vec<String>) {
    (
        Vec::new(),
        TaskPlan {
            task,
            feeds: Vec::new(),
            fetch_slots: Vec::new(),
        },
        Vec::new(),
    )
}
