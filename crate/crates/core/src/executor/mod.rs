//! Runs one graph (usually one partition) step by step.
//!
//! A single driver thread owns all per-step bookkeeping and runs ordinary
//! kernels inline. Blocking kernels run on the blocking pool and Recv waits
//! on the rendezvous; both report back over a channel. Values carry
//! deadness: an untaken Switch branch produces dead values, strict ops fed a
//! dead input are skipped, and Merge forwards whichever input is live.
//! Loops run as frames of numbered iterations, at most
//! `max_iterations` of them in flight at once.

mod pool;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::cancel::{CancelToken, POLL};
use crate::error::{Error, Result};
use crate::graph::{frames, ops, validate, Endpoint, GraphDef, NodeDef};
use crate::kernel::{create_kernel, Device, OpContext, OpKernel, StepEnv, Value};
use crate::runtime::rendezvous::{LocalRendezvous, Rendezvous, RendezvousKey};
use crate::tensor::{DType, Tensor};
use pool::BlockingPool;

#[derive(Debug, Clone)]
pub struct ExecutorOptions {
    /// Loop iterations allowed in flight per frame.
    pub max_iterations: usize,
}

impl Default for ExecutorOptions {
    fn default() -> Self {
        ExecutorOptions { max_iterations: 32 }
    }
}

/// Per-step inputs.
pub struct StepArgs {
    pub step_id: u64,
    pub rendezvous: Arc<dyn Rendezvous>,
    /// Values for `_Feed` nodes, keyed by endpoint string.
    pub feeds: HashMap<String, Tensor>,
    pub cancel: CancelToken,
    pub timeout: Option<Duration>,
    /// Reports a deadlock when nothing is runnable and no blocked op has
    /// finished for this long.
    pub stall_timeout: Option<Duration>,
    /// Drop the step's rendezvous entries when the run ends. Callers that
    /// run several executors in one step clean up once all have finished.
    pub cleanup: bool,
}

impl StepArgs {
    pub fn new(step_id: u64, rendezvous: Arc<dyn Rendezvous>) -> Self {
        StepArgs {
            step_id,
            rendezvous,
            feeds: HashMap::new(),
            cancel: CancelToken::new(),
            timeout: None,
            stall_timeout: None,
            cleanup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Normal { blocking: bool },
    Merge,
    Enter { constant: bool },
    Exit,
    NextIteration,
    Send(RendezvousKey),
    Recv(RendezvousKey),
}

#[derive(Debug, Clone, Copy)]
enum Route {
    Same,
    Child(usize),
    Parent,
}

struct Node {
    def: NodeDef,
    kind: Kind,
    route: Route,
    kernel: Option<Box<dyn OpKernel>>,
    num_outputs: usize,
    out_edges: Vec<Vec<(usize, usize)>>,
    control_out: Vec<usize>,
    /// Static frame the node executes in.
    frame: usize,
    local: usize,
    slot_base: usize,
    /// Merge only: which inputs arrive over a loop back edge.
    back: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeState {
    pending: u32,
    dead: u32,
    data_left: u32,
    live: u32,
    fired: bool,
    arrived: bool,
    done: bool,
}

struct StaticFrame {
    parent: Option<usize>,
    /// Nodes executing in this frame, by local index.
    members: Vec<usize>,
    num_slots: usize,
    first_iter: Vec<NodeState>,
    later_iter: Vec<NodeState>,
    num_enters: usize,
    exits: Vec<usize>,
}

struct Compiled {
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    frames: Vec<StaticFrame>,
    /// Root-frame nodes with nothing to wait for.
    sources: Vec<usize>,
    counters: Vec<AtomicU64>,
    device: Arc<Device>,
    opts: ExecutorOptions,
}

/// A compiled graph bound to one device. Cheap to clone; steps may run
/// concurrently from several threads.
#[derive(Clone)]
pub struct Executor {
    inner: Arc<Compiled>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("nodes", &self.inner.nodes.len())
            .field("device", &self.inner.device.name)
            .finish()
    }
}

fn dispatch_dtype(info: &validate::GraphInfo, n: &NodeDef, i: usize) -> Option<DType> {
    n.inputs
        .iter()
        .filter_map(|e| info.output_type(&e.node, e.index).and_then(|t| t.tensor_dtype()))
        .next()
        .or_else(|| info.types[i].iter().find_map(|t| t.tensor_dtype()))
}

fn transfer_key(n: &NodeDef) -> Result<RendezvousKey> {
    Ok(RendezvousKey::new(
        0,
        n.attr_str("send_device")?,
        n.attr_str("recv_device")?,
        n.attr_str("tensor_name")?,
    ))
}

impl Executor {
    pub fn new(graph: &GraphDef, device: Arc<Device>) -> Result<Executor> {
        Self::with_options(graph, device, ExecutorOptions::default())
    }

    pub fn with_options(graph: &GraphDef, device: Arc<Device>, opts: ExecutorOptions) -> Result<Executor> {
        if opts.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        let info = validate(graph)?;
        let fi = &info.frames;
        let n = graph.nodes.len();

        let exec_frame: Vec<usize> = (0..n)
            .map(|i| {
                let f = fi.node_frame[i];
                if graph.nodes[i].op == "Enter" {
                    fi.parent(f).unwrap_or(frames::ROOT)
                } else {
                    f
                }
            })
            .collect();

        let mut sframes: Vec<StaticFrame> = fi
            .frames
            .iter()
            .map(|f| StaticFrame {
                parent: f.parent,
                members: Vec::new(),
                num_slots: 0,
                first_iter: Vec::new(),
                later_iter: Vec::new(),
                num_enters: f.enters.len(),
                exits: Vec::new(),
            })
            .collect();

        let mut nodes = Vec::with_capacity(n);
        for (i, def) in graph.nodes.iter().enumerate() {
            let f = exec_frame[i];
            let sf = &mut sframes[f];
            let local = sf.members.len();
            sf.members.push(i);
            let slot_base = sf.num_slots;
            sf.num_slots += def.inputs.len();
            let opdef = ops::lookup(&def.op).expect("validated");
            let (kind, route) = match def.op.as_str() {
                "Merge" => (Kind::Merge, Route::Same),
                "Enter" => (
                    Kind::Enter {
                        constant: def.attr_bool_or("is_constant", false)?,
                    },
                    Route::Child(fi.node_frame[i]),
                ),
                "Exit" => (Kind::Exit, Route::Parent),
                "NextIteration" => (Kind::NextIteration, Route::Same),
                "Send" => (Kind::Send(transfer_key(def)?), Route::Same),
                "Recv" => (Kind::Recv(transfer_key(def)?), Route::Same),
                _ => (
                    Kind::Normal {
                        blocking: opdef.flags.blocking,
                    },
                    Route::Same,
                ),
            };
            if def.op == "Exit" {
                sframes[fi.node_frame[i]].exits.push(i);
            }
            let kernel = match kind {
                Kind::Normal { .. } => Some(create_kernel(def, &device.device_type, dispatch_dtype(&info, def, i))?),
                _ => None,
            };
            let back = if kind == Kind::Merge {
                def.inputs
                    .iter()
                    .map(|e| graph.nodes[info.index[&e.node]].op == "NextIteration")
                    .collect()
            } else {
                Vec::new()
            };
            nodes.push(Node {
                def: def.clone(),
                kind,
                route,
                kernel,
                num_outputs: info.types[i].len(),
                out_edges: vec![Vec::new(); info.types[i].len()],
                control_out: Vec::new(),
                frame: f,
                local,
                slot_base,
                back,
            });
        }
        for (i, def) in graph.nodes.iter().enumerate() {
            for (slot, e) in def.inputs.iter().enumerate() {
                nodes[info.index[&e.node]].out_edges[e.index].push((i, slot));
            }
            for c in &def.control_inputs {
                nodes[info.index[c]].control_out.push(i);
            }
        }
        for sf in &mut sframes {
            for (k, template) in [(0, &mut sf.first_iter), (1, &mut sf.later_iter)] {
                *template = sf
                    .members
                    .iter()
                    .map(|&m| {
                        let node = &nodes[m];
                        let controls = node.def.control_inputs.len() as u32;
                        if node.kind == Kind::Merge {
                            let nback = node.back.iter().filter(|&&b| b).count() as u32;
                            let data = node.back.len() as u32;
                            let expected = match (nback, k) {
                                (0, _) => data,
                                (_, 0) => data - nback,
                                _ => nback,
                            };
                            NodeState {
                                pending: controls,
                                data_left: expected,
                                ..Default::default()
                            }
                        } else {
                            NodeState {
                                pending: node.def.inputs.len() as u32 + controls,
                                ..Default::default()
                            }
                        }
                    })
                    .collect();
            }
        }
        let sources = sframes[frames::ROOT]
            .members
            .iter()
            .copied()
            .filter(|&m| {
                let st = &sframes[frames::ROOT].first_iter[nodes[m].local];
                st.pending == 0 && (nodes[m].kind != Kind::Merge || st.data_left == 0)
            })
            .collect();
        let counters = (0..n).map(|_| AtomicU64::new(0)).collect();
        Ok(Executor {
            inner: Arc::new(Compiled {
                nodes,
                index: info.index,
                frames: sframes,
                sources,
                counters,
                device,
                opts,
            }),
        })
    }

    pub fn device(&self) -> &Arc<Device> {
        &self.inner.device
    }

    /// Kernel invocations of a node across all steps so far.
    pub fn invocations(&self, node: &str) -> Option<u64> {
        self.inner
            .index
            .get(node)
            .map(|&i| self.inner.counters[i].load(Ordering::Relaxed))
    }

    pub fn total_invocations(&self) -> u64 {
        self.inner.counters.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.len()
    }

    /// Runs one step with a private rendezvous.
    pub fn run_local(&self, feeds: HashMap<String, Tensor>, fetches: &[Endpoint]) -> Result<Vec<Tensor>> {
        use std::sync::atomic::AtomicU64;
        static STEP: AtomicU64 = AtomicU64::new(1 << 40);
        let mut args = StepArgs::new(STEP.fetch_add(1, Ordering::Relaxed), Arc::new(LocalRendezvous::new()));
        args.feeds = feeds;
        self.run(args, fetches)
    }

    /// Runs every node of the graph once (per live loop iteration) and
    /// returns the fetched root-frame values.
    pub fn run(&self, args: StepArgs, fetches: &[Endpoint]) -> Result<Vec<Tensor>> {
        let c = &self.inner;
        let mut fetch_map: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
        for (pos, e) in fetches.iter().enumerate() {
            let &i = c
                .index
                .get(&e.node)
                .ok_or_else(|| Error::NotFound(format!("fetch '{e}'")))?;
            if e.index >= c.nodes[i].num_outputs {
                return Err(Error::NotFound(format!("fetch '{e}'")));
            }
            let node = &c.nodes[i];
            let root_output = match node.kind {
                Kind::Exit => c.frames[node.frame].parent == Some(frames::ROOT),
                Kind::Enter { .. } => false,
                _ => node.frame == frames::ROOT,
            };
            if !root_output {
                return Err(Error::invalid(format!("fetch '{e}' is inside a loop frame")));
            }
            fetch_map.entry(i).or_default().push((e.index, pos));
        }
        let env = Arc::new(StepEnv {
            step_id: args.step_id,
            device: c.device.clone(),
            rendezvous: args.rendezvous.clone(),
            cancel: args.cancel.clone(),
            feeds: args.feeds,
        });
        let (tx, rx) = mpsc::channel();
        let mut step = Step {
            exec: &self.inner,
            shared: self.inner.clone(),
            env,
            frames: Vec::new(),
            frame_ids: HashMap::new(),
            ready: VecDeque::new(),
            inflight: 0,
            blocked: HashMap::new(),
            error: None,
            fetch_map,
            fetched: vec![None; fetches.len()],
            tx,
        };
        let deadline = args.timeout.map(|t| Instant::now() + t);
        let result = step.drive(&rx, deadline, args.stall_timeout);
        if args.cleanup {
            step.env.rendezvous.cleanup_step(step.env.step_id);
        }
        result?;
        step.fetched
            .into_iter()
            .zip(fetches)
            .map(|(v, e)| match v {
                Some(Some(Value::Tensor(t))) => Ok(t),
                Some(Some(Value::Handle(_))) => Err(Error::invalid(format!("cannot fetch resource handle '{e}'"))),
                Some(None) => Err(Error::DeadFetch(e.to_string())),
                None => Err(Error::Internal(format!("fetch '{e}' not produced"))),
            })
            .collect()
    }
}

/// Prunes `g` for the given feeds and fetches and runs it once on a fresh
/// CPU device. Convenient for tests and one-off evaluation.
pub fn evaluate(g: &GraphDef, feeds: &[(Endpoint, Tensor)], fetches: &[Endpoint]) -> Result<Vec<Tensor>> {
    let feed_eps: Vec<Endpoint> = feeds.iter().map(|(e, _)| e.clone()).collect();
    let p = crate::graph::prune(g, &feed_eps, fetches, &[])?;
    let exec = Executor::new(&p.graph, Arc::new(Device::cpu("/job:localhost/task:0/cpu:0")))?;
    let values = feeds.iter().map(|(e, t)| (e.to_string(), t.clone())).collect();
    exec.run_local(values, &p.fetches)
}

impl Compiled {
    fn compute(&self, n: usize, inputs: Vec<Value>, env: &StepEnv) -> Result<Vec<Option<Value>>> {
        let node = &self.nodes[n];
        self.counters[n].fetch_add(1, Ordering::Relaxed);
        let mut ctx = OpContext {
            node: &node.def,
            inputs,
            outputs: vec![None; node.num_outputs],
            env,
        };
        node.kernel
            .as_ref()
            .expect("normal nodes have kernels")
            .compute(&mut ctx)
            .map_err(|e| e.in_node(&node.def.name))?;
        Ok(ctx.outputs)
    }
}

enum Arrival {
    Data(usize, Option<Value>),
    Control(bool),
}

struct Iteration {
    state: Vec<NodeState>,
    slots: Vec<Option<Option<Value>>>,
    outstanding: usize,
}

struct FrameInst {
    sframe: usize,
    parent: Option<(usize, usize)>,
    iters: VecDeque<Iteration>,
    first: usize,
    pending_enters: usize,
    /// Arrivals from loop-invariant Enters, replayed into new iterations.
    consts: Vec<(usize, Arrival)>,
    /// NextIteration values waiting for the in-flight window to open.
    deferred: Vec<(usize, Arrival)>,
    live_exits: Vec<usize>,
}

impl Clone for Arrival {
    fn clone(&self) -> Self {
        match self {
            Arrival::Data(s, v) => Arrival::Data(*s, v.clone()),
            Arrival::Control(d) => Arrival::Control(*d),
        }
    }
}

struct Done {
    node: usize,
    inst: usize,
    iter: usize,
    result: Result<Vec<Option<Value>>>,
}

struct Step<'e> {
    exec: &'e Compiled,
    shared: Arc<Compiled>,
    env: Arc<StepEnv>,
    frames: Vec<Option<FrameInst>>,
    frame_ids: HashMap<(usize, usize, usize), usize>,
    ready: VecDeque<(usize, usize, usize)>,
    inflight: usize,
    /// In-flight async ops per node, for stall reports.
    blocked: HashMap<usize, usize>,
    error: Option<Error>,
    fetch_map: HashMap<usize, Vec<(usize, usize)>>,
    fetched: Vec<Option<Option<Value>>>,
    tx: mpsc::Sender<Done>,
}

impl Step<'_> {
    fn drive(&mut self, rx: &mpsc::Receiver<Done>, deadline: Option<Instant>, stall: Option<Duration>) -> Result<()> {
        let mut last_progress = Instant::now();
        let root = self.new_frame(frames::ROOT, None);
        debug_assert_eq!(root, 0);
        for &s in &self.exec.sources {
            self.schedule(0, 0, s);
        }
        loop {
            while let Some((n, inst, iter)) = self.ready.pop_front() {
                if self.error.is_some() {
                    self.ready.clear();
                    break;
                }
                if let Err(e) = self.process(n, inst, iter) {
                    self.fail(e);
                }
            }
            if self.inflight == 0 {
                break;
            }
            let msg = match rx.recv_timeout(POLL) {
                Ok(m) => Some(m),
                Err(mpsc::RecvTimeoutError::Timeout) => None,
                Err(mpsc::RecvTimeoutError::Disconnected) => unreachable!("the step holds a sender"),
            };
            if let Some(d) = msg {
                last_progress = Instant::now();
                self.inflight -= 1;
                if let Some(c) = self.blocked.get_mut(&d.node) {
                    *c -= 1;
                    if *c == 0 {
                        self.blocked.remove(&d.node);
                    }
                }
                match d.result {
                    Ok(outputs) if self.error.is_none() => {
                        if let Err(e) = self.propagate(d.node, d.inst, d.iter, outputs, false) {
                            self.fail(e);
                        }
                    }
                    Ok(_) => {}
                    Err(e) => self.fail(e),
                }
            }
            if self.error.is_none() {
                if self.env.cancel.is_cancelled() {
                    self.fail(Error::Cancelled(self.env.cancel.reason()));
                } else if deadline.is_some_and(|d| Instant::now() >= d) {
                    self.fail(Error::Timeout(format!("step {} did not finish in time", self.env.step_id)));
                } else if stall.is_some_and(|s| last_progress.elapsed() >= s) {
                    let stalled = self.stalled();
                    self.fail(Error::Deadlock { stalled });
                }
            }
        }
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if self.fetched.iter().all(Option::is_some) && self.all_root_done() {
            return Ok(());
        }
        Err(Error::Deadlock {
            stalled: self.stalled(),
        })
    }

    fn fail(&mut self, e: Error) {
        let replace = match &self.error {
            None => true,
            // a real failure explains the cancellations it caused
            Some(Error::Cancelled(_)) => !matches!(e, Error::Cancelled(_)),
            Some(_) => false,
        };
        if replace {
            let reason = e.to_string();
            self.error = Some(e);
            self.env.cancel.cancel(&reason);
            self.env.rendezvous.abort_step(self.env.step_id, &reason);
        }
        self.ready.clear();
    }

    fn all_root_done(&self) -> bool {
        let f = self.frames[0].as_ref().expect("root frame");
        f.iters[0].state.iter().all(|s| s.done) && self.frames.iter().skip(1).all(Option::is_none)
    }

    fn stalled(&self) -> Vec<String> {
        let mut partial = Vec::new();
        let mut idle = Vec::new();
        for f in self.frames.iter().flatten() {
            let sf = &self.exec.frames[f.sframe];
            for it in &f.iters {
                for (local, st) in it.state.iter().enumerate() {
                    if st.done {
                        continue;
                    }
                    let name = self.exec.nodes[sf.members[local]].def.name.clone();
                    if st.arrived {
                        partial.push(name);
                    } else {
                        idle.push(name);
                    }
                }
            }
        }
        for &n in self.blocked.keys() {
            partial.push(self.exec.nodes[n].def.name.clone());
        }
        let mut v = if partial.is_empty() { idle } else { partial };
        v.sort();
        v.dedup();
        v
    }

    fn new_frame(&mut self, sframe: usize, parent: Option<(usize, usize)>) -> usize {
        let sf = &self.exec.frames[sframe];
        let id = self.frames.len();
        self.frames.push(Some(FrameInst {
            sframe,
            parent,
            iters: VecDeque::from([Iteration {
                state: sf.first_iter.clone(),
                slots: vec![None; sf.num_slots],
                outstanding: 0,
            }]),
            first: 0,
            pending_enters: sf.num_enters,
            consts: Vec::new(),
            deferred: Vec::new(),
            live_exits: Vec::new(),
        }));
        if let Some((p, it)) = parent {
            self.frame_ids.insert((sframe, p, it), id);
            self.iteration(p, it).outstanding += 1;
        }
        id
    }

    fn frame(&mut self, inst: usize) -> &mut FrameInst {
        self.frames[inst].as_mut().expect("live frame")
    }

    fn iteration(&mut self, inst: usize, iter: usize) -> &mut Iteration {
        let f = self.frame(inst);
        let k = iter - f.first;
        &mut f.iters[k]
    }

    fn schedule(&mut self, inst: usize, iter: usize, n: usize) {
        self.iteration(inst, iter).outstanding += 1;
        self.ready.push_back((n, inst, iter));
    }

    fn deliver(&mut self, inst: usize, iter: usize, dst: usize, a: Arrival) -> Result<()> {
        let node = &self.exec.nodes[dst];
        let it = self.iteration(inst, iter);
        let st = &mut it.state[node.local];
        st.arrived = true;
        let ready = match a {
            Arrival::Data(slot, v) => {
                let cell = &mut it.slots[node.slot_base + slot];
                if node.kind == Kind::Merge && st.fired {
                    if v.is_some() {
                        return Err(Error::Consistency(format!(
                            "Merge '{}' received a second live input (input {slot})",
                            node.def.name
                        )));
                    }
                    return Ok(());
                }
                if cell.is_some() {
                    return Err(Error::Consistency(format!(
                        "input {slot} of '{}' delivered twice in iteration {iter}",
                        node.def.name
                    )));
                }
                if node.kind == Kind::Merge {
                    if v.is_some() {
                        if st.live > 0 {
                            return Err(Error::Consistency(format!(
                                "Merge '{}' received a second live input (input {slot})",
                                node.def.name
                            )));
                        }
                        st.live += 1;
                    }
                    st.data_left = st.data_left.checked_sub(1).ok_or_else(|| {
                        Error::Consistency(format!("Merge '{}' received an unexpected input", node.def.name))
                    })?;
                } else {
                    if v.is_none() {
                        st.dead += 1;
                    }
                    st.pending -= 1;
                }
                *cell = Some(v);
                Self::is_ready(node, st)
            }
            Arrival::Control(dead) => {
                if node.kind == Kind::Merge && st.fired {
                    return Ok(());
                }
                if dead {
                    st.dead += 1;
                }
                st.pending = st.pending.checked_sub(1).ok_or_else(|| {
                    Error::Consistency(format!("'{}' received an unexpected control input", node.def.name))
                })?;
                Self::is_ready(node, st)
            }
        };
        if ready {
            self.schedule(inst, iter, dst);
        }
        Ok(())
    }

    fn is_ready(node: &Node, st: &mut NodeState) -> bool {
        if node.kind == Kind::Merge {
            if !st.fired && st.pending == 0 && (st.live > 0 || st.data_left == 0) {
                st.fired = true;
                return true;
            }
            false
        } else {
            st.pending == 0
        }
    }

    fn process(&mut self, n: usize, inst: usize, iter: usize) -> Result<()> {
        let exec = self.exec;
        let node = &exec.nodes[n];
        let it = self.iteration(inst, iter);
        let st = &mut it.state[node.local];
        st.done = true;
        let dead = st.dead > 0;
        let range = node.slot_base..node.slot_base + node.def.inputs.len();
        let inputs: Vec<Option<Value>> = it.slots[range].iter_mut().map(|s| s.take().flatten()).collect();

        if node.kind == Kind::Merge {
            let live = inputs.into_iter().enumerate().find_map(|(i, v)| v.map(|v| (i, v)));
            let outputs = match live {
                Some((i, v)) if !dead => {
                    exec.counters[n].fetch_add(1, Ordering::Relaxed);
                    vec![Some(v), Some(Value::Tensor(Tensor::scalar(i as i32)))]
                }
                _ => vec![None, None],
            };
            let skipped = outputs[0].is_none();
            return self.propagate(n, inst, iter, outputs, skipped);
        }
        if let Kind::Send(key) = &node.kind {
            exec.counters[n].fetch_add(1, Ordering::Relaxed);
            let value = match inputs.into_iter().next().flatten() {
                Some(v) if !dead => Some(v.into_tensor().map_err(|e| e.in_node(&node.def.name))?),
                _ => None,
            };
            let key = RendezvousKey {
                step_id: self.env.step_id,
                ..key.clone()
            };
            self.env
                .rendezvous
                .send(&key, value)
                .map_err(|e| e.in_node(&node.def.name))?;
            return self.propagate(n, inst, iter, Vec::new(), false);
        }
        if dead {
            let outputs = vec![None; node.num_outputs];
            return self.propagate(n, inst, iter, outputs, true);
        }
        let inputs: Vec<Value> = inputs.into_iter().map(|v| v.expect("live")).collect();
        match &node.kind {
            Kind::Enter { .. } | Kind::Exit | Kind::NextIteration => {
                exec.counters[n].fetch_add(1, Ordering::Relaxed);
                let outputs = inputs.into_iter().map(Some).collect();
                self.propagate(n, inst, iter, outputs, false)
            }
            Kind::Recv(key) => {
                exec.counters[n].fetch_add(1, Ordering::Relaxed);
                let key = RendezvousKey {
                    step_id: self.env.step_id,
                    ..key.clone()
                };
                let tx = self.tx.clone();
                let name = node.def.name.clone();
                self.inflight += 1;
                *self.blocked.entry(n).or_default() += 1;
                self.env.rendezvous.recv_async(
                    &key,
                    Box::new(move |r| {
                        let result = r
                            .map(|v| vec![v.map(Value::Tensor)])
                            .map_err(|e| e.in_node(&name));
                        let _ = tx.send(Done {
                            node: n,
                            inst,
                            iter,
                            result,
                        });
                    }),
                );
                Ok(())
            }
            Kind::Normal { blocking: true } => {
                let shared = self.shared.clone();
                let env = self.env.clone();
                let tx = self.tx.clone();
                self.inflight += 1;
                *self.blocked.entry(n).or_default() += 1;
                BlockingPool::global().execute(move || {
                    let result = shared.compute(n, inputs, &env);
                    let _ = tx.send(Done {
                        node: n,
                        inst,
                        iter,
                        result,
                    });
                });
                Ok(())
            }
            Kind::Normal { blocking: false } => {
                let outputs = exec.compute(n, inputs, &self.env)?;
                self.propagate(n, inst, iter, outputs, false)
            }
            Kind::Merge | Kind::Send(_) => unreachable!("handled above"),
        }
    }

    fn propagate(&mut self, n: usize, inst: usize, iter: usize, outputs: Vec<Option<Value>>, skipped: bool) -> Result<()> {
        let exec = self.exec;
        let node = &exec.nodes[n];
        let control_dead = skipped || (!outputs.is_empty() && outputs.iter().all(Option::is_none));
        let mut arrivals: Vec<(usize, Arrival)> = Vec::new();
        for (o, v) in outputs.iter().enumerate() {
            for &(dst, slot) in &node.out_edges[o] {
                arrivals.push((dst, Arrival::Data(slot, v.clone())));
            }
        }
        for &dst in &node.control_out {
            arrivals.push((dst, Arrival::Control(control_dead)));
        }

        match (&node.kind, node.route) {
            (Kind::Enter { constant }, Route::Child(sf)) => {
                let child = match self.frame_ids.get(&(sf, inst, iter)) {
                    Some(&c) => c,
                    None => self.new_frame(sf, Some((inst, iter))),
                };
                if *constant {
                    let f = self.frame(child);
                    let (first, count) = (f.first, f.iters.len());
                    f.consts.extend(arrivals.iter().cloned());
                    for k in first..first + count {
                        for (dst, a) in arrivals.iter().cloned() {
                            self.deliver(child, k, dst, a)?;
                        }
                    }
                } else {
                    if self.frame(child).first != 0 {
                        return Err(Error::Internal(format!("Enter '{}' arrived after iteration 0", node.def.name)));
                    }
                    for (dst, a) in arrivals {
                        self.deliver(child, 0, dst, a)?;
                    }
                }
                self.frame(child).pending_enters -= 1;
                self.try_complete(child)?;
            }
            (Kind::Exit, _) => {
                if outputs[0].is_some() {
                    let f = self.frame(inst);
                    f.live_exits.push(n);
                    let (p, pit) = f.parent.expect("Exit runs in a loop frame");
                    self.record_fetch(p, n, &outputs);
                    for (dst, a) in arrivals {
                        self.deliver(p, pit, dst, a)?;
                    }
                }
            }
            (Kind::NextIteration, _) => {
                if outputs[0].is_some() {
                    self.to_next_iteration(inst, iter + 1, arrivals)?;
                }
            }
            _ => {
                self.record_fetch(inst, n, &outputs);
                for (dst, a) in arrivals {
                    self.deliver(inst, iter, dst, a)?;
                }
            }
        }
        self.iteration(inst, iter).outstanding -= 1;
        self.try_complete(inst)
    }

    fn record_fetch(&mut self, inst: usize, n: usize, outputs: &[Option<Value>]) {
        if inst != 0 {
            return;
        }
        if let Some(fs) = self.fetch_map.get(&n) {
            for &(o, pos) in fs {
                self.fetched[pos] = Some(outputs[o].clone());
            }
        }
    }

    fn to_next_iteration(&mut self, inst: usize, target: usize, arrivals: Vec<(usize, Arrival)>) -> Result<()> {
        let max = self.exec.opts.max_iterations;
        let f = self.frame(inst);
        let newest = f.first + f.iters.len() - 1;
        if target > newest {
            if f.iters.len() >= max {
                f.deferred.extend(arrivals);
                return Ok(());
            }
            self.new_iteration(inst)?;
        }
        for (dst, a) in arrivals {
            self.deliver(inst, target, dst, a)?;
        }
        Ok(())
    }

    fn new_iteration(&mut self, inst: usize) -> Result<()> {
        let exec = self.exec;
        let f = self.frame(inst);
        let sf = &exec.frames[f.sframe];
        f.iters.push_back(Iteration {
            state: sf.later_iter.clone(),
            slots: vec![None; sf.num_slots],
            outstanding: 0,
        });
        let k = f.first + f.iters.len() - 1;
        let consts = f.consts.clone();
        for (dst, a) in consts {
            self.deliver(inst, k, dst, a)?;
        }
        Ok(())
    }

    fn try_complete(&mut self, inst: usize) -> Result<()> {
        if inst == 0 {
            return Ok(());
        }
        loop {
            let f = self.frame(inst);
            if f.pending_enters > 0 {
                return Ok(());
            }
            match f.iters.front() {
                Some(it) if it.outstanding == 0 => {}
                _ => break,
            }
            f.iters.pop_front();
            f.first += 1;
            if !f.deferred.is_empty() {
                let deferred = std::mem::take(&mut f.deferred);
                let target = f.first + f.iters.len();
                self.new_iteration(inst)?;
                for (dst, a) in deferred {
                    self.deliver(inst, target, dst, a)?;
                }
            }
        }
        let f = self.frame(inst);
        if !f.iters.is_empty() {
            return Ok(());
        }
        // the frame is finished: exits that never fired live report dead
        let f = self.frames[inst].take().expect("live frame");
        let (p, pit) = f.parent.expect("non-root frame");
        self.frame_ids.remove(&(f.sframe, p, pit));
        for &x in &self.exec.frames[f.sframe].exits {
            if f.live_exits.contains(&x) {
                continue;
            }
            let node = &self.exec.nodes[x];
            self.record_fetch(p, x, &[None]);
            for &(dst, slot) in &node.out_edges[0] {
                self.deliver(p, pit, dst, Arrival::Data(slot, None))?;
            }
            for &dst in &node.control_out {
                self.deliver(p, pit, dst, Arrival::Control(true))?;
            }
        }
        self.iteration(p, pit).outstanding -= 1;
        self.try_complete(p)
    }
}
