//! Replica coordination: asynchronous, synchronous and synchronous with
//! backup workers, built from variables and queues.

use std::time::{Duration, Instant};

use super::optim::{apply_gradients, OptimizerSpec};
use crate::autodiff::{build_gradients, Grad};
use crate::error::{Error, Result};
use crate::graph::{Endpoint, GraphBuilder, GraphDef};
use crate::runtime::Session;
use crate::tensor::{DType, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    /// Each worker applies its own gradient to whatever the parameters are
    /// when it finishes.
    Async,
    /// A barrier makes every worker read one version; the mean of all n
    /// gradients is applied once per step.
    Sync,
    /// Like `Sync`, but a step applies the mean of the first m fresh
    /// gradients and discards late ones.
    SyncBackup,
}

impl std::str::FromStr for SyncMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "async" => Ok(SyncMode::Async),
            "sync" => Ok(SyncMode::Sync),
            "sync_backup" | "backup" => Ok(SyncMode::SyncBackup),
            other => Err(Error::invalid(format!("unknown sync mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncConfig {
    pub mode: SyncMode,
    pub workers: usize,
    /// Gradients aggregated per step; equals `workers` except with backups.
    pub required: usize,
}

impl SyncConfig {
    pub fn asynchronous(workers: usize) -> Self {
        SyncConfig {
            mode: SyncMode::Async,
            workers,
            required: workers,
        }
    }

    pub fn sync(workers: usize) -> Self {
        SyncConfig {
            mode: SyncMode::Sync,
            workers,
            required: workers,
        }
    }

    pub fn backup(workers: usize, required: usize) -> Self {
        SyncConfig {
            mode: SyncMode::SyncBackup,
            workers,
            required,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("need at least one worker"));
        }
        if self.required == 0 || self.required > self.workers {
            return Err(Error::invalid(format!(
                "required updates {} must lie in [1, {}]",
                self.required, self.workers
            )));
        }
        match self.mode {
            SyncMode::SyncBackup if self.required == self.workers => {
                Err(Error::invalid("backup mode needs fewer required updates than workers"))
            }
            SyncMode::Sync | SyncMode::Async if self.required != self.workers => Err(Error::invalid(
                "only backup mode aggregates fewer updates than workers",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ParamInit {
    Value(Tensor),
    /// Drawn on the parameter's device, so large tables never travel.
    Uniform { seed: i64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    pub init: ParamInit,
}

impl ParamSpec {
    pub fn value(name: impl Into<String>, t: Tensor) -> Self {
        ParamSpec {
            name: name.into(),
            dtype: t.dtype(),
            shape: t.shape().clone(),
            init: ParamInit::Value(t),
        }
    }

    pub fn uniform(name: impl Into<String>, dtype: DType, shape: impl Into<Shape>, seed: i64, lo: f64, hi: f64) -> Self {
        ParamSpec {
            name: name.into(),
            dtype,
            shape: shape.into(),
            init: ParamInit::Uniform { seed, lo, hi },
        }
    }
}

/// What to build. Parameter `i` lives on `ps_devices[i % len]`; worker `w`
/// on `worker_devices[w]`. Empty lists leave placement free.
#[derive(Debug, Clone)]
pub struct ReplicaSpec {
    pub config: SyncConfig,
    pub optimizer: OptimizerSpec,
    pub params: Vec<ParamSpec>,
    pub ps_devices: Vec<String>,
    pub worker_devices: Vec<String>,
    /// Extra delay before worker `w` hands in each gradient, in ms.
    pub worker_delay_ms: Vec<u64>,
}

/// Endpoints a worker fetches and the node it runs each step.
#[derive(Debug, Clone)]
pub struct WorkerStep {
    pub loss: Endpoint,
    /// Parameter version read at the start of the step.
    pub version_read: Endpoint,
    /// Sync modes: the barrier token (version the gradient is tagged with).
    /// Async: the version after this worker's update.
    pub tag: Endpoint,
    pub target: String,
}

/// The aggregation step, run by one driver per training step.
#[derive(Debug, Clone)]
pub struct ChiefStep {
    /// Applies the update and releases the next round of tokens.
    pub target: String,
    /// Applies the update without releasing tokens; ends training.
    pub last: String,
    /// Gradients averaged into this update.
    pub applied: Endpoint,
    /// Late gradients discarded while collecting them.
    pub stale: Endpoint,
    pub version: Endpoint,
}

#[derive(Debug, Clone)]
pub struct Replicated {
    pub graph: GraphDef,
    pub config: SyncConfig,
    pub init: String,
    pub workers: Vec<WorkerStep>,
    pub chief: Option<ChiefStep>,
    /// Closes the coordination queues so blocked workers stop.
    pub shutdown: Vec<String>,
    pub params: Vec<Endpoint>,
    pub version: Endpoint,
}

/// Builds the graph `model` describes, replicated over workers. `model`
/// receives the worker index and that worker's parameter values and
/// returns a scalar loss.
pub fn build_replicated(
    spec: &ReplicaSpec,
    model: &dyn Fn(&mut GraphBuilder, usize, &[Endpoint]) -> Result<Endpoint>,
) -> Result<Replicated> {
    let cfg = spec.config;
    cfg.check()?;
    spec.optimizer.check()?;
    if spec.params.is_empty() {
        return Err(Error::invalid("nothing to train"));
    }
    if !spec.worker_devices.is_empty() && spec.worker_devices.len() != cfg.workers {
        return Err(Error::invalid("worker_devices must list one device per worker"));
    }
    let n = cfg.workers;
    let ps = |i: usize| spec.ps_devices.get(i % spec.ps_devices.len().max(1)).cloned().unwrap_or_default();
    let wdev = |w: usize| spec.worker_devices.get(w).cloned().unwrap_or_default();
    let sync = cfg.mode != SyncMode::Async;

    let mut b = GraphBuilder::new();
    let params: Vec<Endpoint> = spec
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| b.with_device(&ps(i), |b| b.variable(&p.name, p.dtype, p.shape.clone())))
        .collect();
    let ps0 = ps(0);
    let version = b.with_device(&ps0, |b| b.variable("global_version", DType::I64, Shape::scalar()));

    // token queues; the gradient queue waits until gradients are known
    let token_qs: Vec<Endpoint> = if sync {
        b.with_device(&ps0, |b| match cfg.mode {
            // one token queue per worker so each contributes once per step
            SyncMode::Sync => (0..n)
                .map(|w| b.fifo_queue(&format!("token_queue_{w}"), 2, &[DType::I64], &[Shape::scalar()]))
                .collect(),
            _ => vec![b.fifo_queue("token_queue", 4 * n, &[DType::I64], &[Shape::scalar()])],
        })
    } else {
        Vec::new()
    };

    // initialization
    let mut init_ops = Vec::new();
    for (i, p) in spec.params.iter().enumerate() {
        let a = b.with_device(&ps(i), |b| {
            let v = match &p.init {
                ParamInit::Value(t) => b.constant(t.clone()),
                ParamInit::Uniform { seed, lo, hi } => b.random_uniform(p.shape.clone(), p.dtype, *seed, *lo, *hi),
            };
            b.assign(&params[i], &v)
        });
        init_ops.push(a.node);
    }
    let v0 = b.with_device(&ps0, |b| {
        let zero = b.constant(Tensor::scalar(0i64));
        b.assign(&version, &zero)
    });
    init_ops.push(v0.node.clone());
    if sync {
        b.with_device(&ps0, |b| {
            b.with_control_deps(&[v0.node.clone()], |b| {
                for w in 0..n {
                    let q = &token_qs[w.min(token_qs.len() - 1)];
                    init_ops.push(b.enqueue(q, &[v0.clone()]));
                }
            })
        });
    }
    let init = b.noop(&init_ops);

    // workers
    let mut partial: Vec<(Endpoint, Endpoint, Option<Endpoint>, Vec<Endpoint>)> = Vec::with_capacity(n);
    for w in 0..n {
        let dev = wdev(w);
        let (loss, version_read, token, reads) = b.with_device(&dev, |b| -> Result<_> {
            let token = if sync {
                let q = &token_qs[w.min(token_qs.len() - 1)];
                Some(b.dequeue(q, 1).remove(0))
            } else {
                None
            };
            let gate: Vec<String> = token.iter().map(|t| t.node.clone()).collect();
            let version_read = b.with_control_deps(&gate, |b| b.read(&version));
            let reads: Vec<Endpoint> = b.with_control_deps(&[version_read.node.clone()], |b| {
                params.iter().map(|p| b.read(p)).collect()
            });
            let loss = model(b, w, &reads)?;
            Ok((loss, version_read, token, reads))
        })?;
        partial.push((loss, version_read, token.clone(), reads));
    }
    let mut graph = b.into_graph();
    let mut grads_of = Vec::with_capacity(n);
    for (loss, _, _, reads) in &partial {
        let g = build_gradients(&graph, loss, reads)?;
        graph = g.graph;
        grads_of.push(g.grads);
    }
    let mut b = GraphBuilder::from_graph(graph);
    // a parameter is sent sparse if any worker's gradient for it is
    let sparse: Vec<bool> = (0..params.len())
        .map(|i| grads_of.iter().any(|g| g[i].is_sparse()))
        .collect();
    // dense gradients travel as [1, ...] and sparse ones as (indices,
    // values), so concatenating m tuples stacks the dense ones
    let grad_q = if sync {
        let mut types = Vec::new();
        for (p, &sp) in spec.params.iter().zip(&sparse) {
            if sp {
                types.push(DType::I64);
            }
            types.push(p.dtype);
        }
        types.extend([DType::I64, DType::I64]);
        Some(b.with_device(&ps0, |b| b.fifo_queue("gradient_queue", (4 * n).max(64), &types, &[])))
    } else {
        None
    };
    let mut workers = Vec::with_capacity(n);
    for (w, ((loss, version_read, token, _), grads)) in partial.into_iter().zip(grads_of).enumerate() {
        let dev = wdev(w);
        let delay = spec.worker_delay_ms.get(w).copied().unwrap_or(0);
        let step = b.with_device(&dev, |b| -> Result<WorkerStep> {
            if let (Some(gq), Some(token)) = (&grad_q, &token) {
                let mut comps = Vec::new();
                for ((g, p), &sp) in grads.iter().zip(&spec.params).zip(&sparse) {
                    match g {
                        Grad::Dense(e) if sp => {
                            comps.push(b.unary("RangeLike", e));
                            comps.push(e.clone());
                        }
                        Grad::Dense(e) => {
                            let mut dims = vec![1];
                            dims.extend_from_slice(p.shape.dims());
                            comps.push(b.reshape(e, &dims));
                        }
                        Grad::Sparse { indices, values, .. } => {
                            comps.push(indices.clone());
                            comps.push(values.clone());
                        }
                    }
                }
                let tag = if delay > 0 { b.delay(token, delay as i64) } else { token.clone() };
                comps.push(tag);
                comps.push(b.constant(Tensor::scalar(w as i64)));
                let target = b.enqueue(gq, &comps);
                Ok(WorkerStep {
                    loss: loss.clone(),
                    version_read: version_read.clone(),
                    tag: token.clone(),
                    target,
                })
            } else {
                let pairs: Vec<(Endpoint, Grad)> = params
                    .iter()
                    .zip(&grads)
                    .map(|(p, g)| (p.clone(), delayed(b, g, delay)))
                    .collect();
                let applied = apply_gradients(b, &spec.optimizer, &pairs)?;
                let one = b.constant(Tensor::scalar(1i64));
                let bumped = b.with_control_deps(&[applied], |b| b.assign_add(&version, &one));
                Ok(WorkerStep {
                    loss: loss.clone(),
                    version_read: version_read.clone(),
                    tag: bumped.clone(),
                    target: bumped.node,
                })
            }
        })?;
        workers.push(step);
    }

    // aggregation
    let mut shutdown = Vec::new();
    let chief = match &grad_q {
        None => None,
        Some(gq) => Some(b.with_device(&ps0, |b| -> Result<ChiefStep> {
            let k: usize = sparse.iter().map(|&sp| if sp { 2 } else { 1 }).sum();
            let current = b.read(&version);
            let deq = b.op(
                "DequeueFresh",
                &[gq.clone(), current],
                vec![
                    ("m", cfg.required.into()),
                    ("tag_component", k.into()),
                    ("concat", true.into()),
                ],
            );
            let ids = Endpoint::new(&deq, k + 1);
            let mut pairs = Vec::with_capacity(params.len());
            let mut c = 0;
            for ((p, spec_p), &sp) in params.iter().zip(&spec.params).zip(&sparse) {
                if sp {
                    let indices = Endpoint::new(&deq, c);
                    let values = Endpoint::new(&deq, c + 1);
                    c += 2;
                    let m = b.constant(crate::tensor::ops::cast(
                        &Tensor::scalar(cfg.required as f64),
                        spec_p.dtype,
                    )?);
                    let values = b.div(&values, &m);
                    let like = b.read(p);
                    pairs.push((p.clone(), Grad::Sparse { indices, values, like }));
                    continue;
                }
                let stacked = Endpoint::new(&deq, c);
                c += 1;
                // worker-id order makes the mean reproducible when every
                // worker contributes exactly once
                let ordered = if cfg.mode == SyncMode::Sync {
                    b.dynamic_stitch(std::slice::from_ref(&ids), &[stacked])
                } else {
                    stacked
                };
                let mean = b.reduce_mean(&ordered, Some(0));
                pairs.push((p.clone(), Grad::Dense(mean)));
            }
            let applied_op = apply_gradients(b, &spec.optimizer, &pairs)?;
            let one = b.constant(Tensor::scalar(1i64));
            let next = b.with_control_deps(&[applied_op], |b| b.assign_add(&version, &one));
            let mut releases = Vec::with_capacity(n);
            for w in 0..n {
                let q = &token_qs[w.min(token_qs.len() - 1)];
                releases.push(b.enqueue(q, std::slice::from_ref(&next)));
            }
            let target = b.noop(&releases);
            let last = b.noop(&[next.node.clone()]);
            let ones = b.unary("OnesLike", &ids);
            let applied = b.reduce_sum(&ones, None);
            Ok(ChiefStep {
                target,
                last,
                applied,
                stale: Endpoint::new(&deq, k + 2),
                version: next,
            })
        })?),
    };
    if let Some(gq) = &grad_q {
        b.with_device(&ps0, |b| {
            for q in std::iter::once(gq).chain(&token_qs) {
                shutdown.push(b.op("QueueClose", std::slice::from_ref(q), vec![]));
            }
        });
    }
    Ok(Replicated {
        graph: b.finish()?,
        config: cfg,
        init,
        workers,
        chief,
        shutdown,
        params,
        version,
    })
}

fn delayed(b: &mut GraphBuilder, g: &Grad, ms: u64) -> Grad {
    if ms == 0 {
        return g.clone();
    }
    match g {
        Grad::Dense(e) => Grad::Dense(b.delay(e, ms as i64)),
        Grad::Sparse { indices, values, like } => Grad::Sparse {
            indices: indices.clone(),
            values: b.delay(values, ms as i64),
            like: like.clone(),
        },
    }
}

/// One worker step as observed by its driver.
#[derive(Debug, Clone)]
pub struct WorkerRecord {
    pub loss: f64,
    pub version_read: i64,
    /// See [`WorkerStep::tag`].
    pub tag: i64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    /// Sync modes: one entry per aggregation step. Async: every worker step.
    pub step_times: Vec<Duration>,
    pub applied: Vec<i64>,
    pub stale: Vec<i64>,
    pub workers: Vec<Vec<WorkerRecord>>,
    pub wall: Duration,
}

impl TrainStats {
    pub fn median_step(&self) -> Duration {
        percentile(&self.step_times, 0.5)
    }
}

/// Nearest-rank percentile, `q` in [0, 1].
pub fn percentile(v: &[Duration], q: f64) -> Duration {
    if v.is_empty() {
        return Duration::ZERO;
    }
    let mut s = v.to_vec();
    s.sort();
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

type Feeds<'a> = dyn Fn(usize, usize) -> Vec<(Endpoint, Tensor)> + Sync + 'a;

fn is_end_of_input(e: &Error) -> bool {
    matches!(e.root(), Error::OutOfRange(_) | Error::QueueClosed)
}

/// Initializes parameters and runs `steps` training steps: aggregation
/// steps in sync modes, steps per worker in async mode. `feeds(w, k)`
/// supplies worker `w`'s inputs for its `k`-th step.
pub fn train(session: &Session, r: &Replicated, steps: usize, feeds: &Feeds<'_>) -> Result<TrainStats> {
    session.run_targets(&[], &[], std::slice::from_ref(&r.init))?;
    let start = Instant::now();
    let run_worker = |w: usize, limit: Option<usize>| -> Result<Vec<WorkerRecord>> {
        let ws = &r.workers[w];
        let fetches = [ws.loss.clone(), ws.version_read.clone(), ws.tag.clone()];
        let mut out = Vec::new();
        for k in 0.. {
            if limit.is_some_and(|l| k >= l) {
                break;
            }
            let t0 = Instant::now();
            match session.run_targets(&feeds(w, k), &fetches, std::slice::from_ref(&ws.target)) {
                Ok(v) => out.push(WorkerRecord {
                    loss: v[0].to_f64_vec()?[0],
                    version_read: v[1].scalar_value::<i64>()?,
                    tag: v[2].scalar_value::<i64>()?,
                    elapsed: t0.elapsed(),
                }),
                Err(e) if limit.is_none() && is_end_of_input(&e) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    };

    let mut stats = TrainStats::default();
    std::thread::scope(|s| -> Result<()> {
        match &r.chief {
            None => {
                let hs: Vec<_> = (0..r.workers.len()).map(|w| s.spawn(move || run_worker(w, Some(steps)))).collect();
                for h in hs {
                    let recs = h.join().expect("worker thread panicked")?;
                    stats.step_times.extend(recs.iter().map(|r| r.elapsed));
                    stats.workers.push(recs);
                }
            }
            Some(chief) => {
                let hs: Vec<_> = (0..r.workers.len()).map(|w| s.spawn(move || run_worker(w, None))).collect();
                let fetches = [chief.applied.clone(), chief.stale.clone()];
                let mut failure = None;
                for k in 0..steps {
                    let t0 = Instant::now();
                    let target = if k + 1 == steps { &chief.last } else { &chief.target };
                    match session.run_targets(&[], &fetches, std::slice::from_ref(target)) {
                        Ok(v) => {
                            stats.step_times.push(t0.elapsed());
                            stats.applied.push(v[0].scalar_value::<i64>()?);
                            stats.stale.push(v[1].scalar_value::<i64>()?);
                        }
                        Err(e) => {
                            failure = Some(e);
                            break;
                        }
                    }
                }
                session.run_targets(&[], &[], &r.shutdown)?;
                for h in hs {
                    match h.join().expect("worker thread panicked") {
                        Ok(recs) => stats.workers.push(recs),
                        Err(e) => {
                            failure.get_or_insert(e);
                        }
                    }
                }
                if let Some(e) = failure {
                    return Err(e);
                }
            }
        }
        Ok(())
    })?;
    stats.wall = start.elapsed();
    Ok(stats)
}
