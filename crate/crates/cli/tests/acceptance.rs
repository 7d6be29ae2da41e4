//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stdout (outside the harness capture) and fails when its criterion does.
//! Tests share a lock so that timing-sensitive ones run alone.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use miniflow::autodiff::{build_gradients, Grad};
use miniflow::cancel::CancelToken;
use miniflow::executor::{evaluate, Executor};
use miniflow::graph::{Endpoint, GraphBuilder, GraphDef};
use miniflow::kernel::Device;
use miniflow::persistence::{build_saver, checkpoint_path, CheckpointPolicy, Saver};
use miniflow::runtime::{start_loopback_workers, Cluster, ClusterConfig, ClusterOptions, MsgType, Session};
use miniflow::state::QueueState;
use miniflow::training::embedding::shard_rows;
use miniflow::training::{build_replicated, train, OptimizerSpec, ParamSpec, ReplicaSpec, SyncConfig};
use miniflow::{DType, Error, Shape, Tensor};
use miniflow_cli::bench::{self, BenchConfig, Mode};
use miniflow_cli::demo::{self, LmConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, name: &str, outcome: &Result<String, String>) {
    let line = match outcome {
        Ok(d) => format!("criterion {n:>2} {name}: PASS ({d})"),
        Err(d) => format!("criterion {n:>2} {name}: FAIL ({d})"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn criterion(n: u32, name: &str, check: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let outcome = check();
    report(n, name, &outcome);
    if let Err(d) = outcome {
        panic!("criterion {n} ({name}) failed: {d}");
    }
}

fn quiet() -> ClusterOptions {
    ClusterOptions {
        heartbeat_interval: None,
        ..Default::default()
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(dims: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new(dims.to_vec(), v).unwrap()
}

// ---- 1: gradients against central differences ----

const H: f64 = 1e-6;

fn dense_value(g: &mut GraphDef, grad: &Grad) -> Endpoint {
    match grad {
        Grad::Dense(e) => e.clone(),
        Grad::Sparse { indices, values, like } => {
            let mut b = GraphBuilder::from_graph(std::mem::take(g));
            let name = b.op("SparseToDense", &[indices.clone(), values.clone(), like.clone()], vec![]);
            *g = b.into_graph();
            Endpoint::new(name, 0)
        }
    }
}

struct FdCase {
    graph: GraphDef,
    target: Endpoint,
    params: Vec<(Endpoint, Tensor)>,
}

/// Largest relative error over every parameter element.
fn fd_error(c: &FdCase) -> Result<f64, String> {
    let eps: Vec<Endpoint> = c.params.iter().map(|(e, _)| e.clone()).collect();
    let gr = build_gradients(&c.graph, &c.target, &eps).map_err(|e| e.to_string())?;
    let mut graph = gr.graph;
    let fetches: Vec<Endpoint> = gr.grads.iter().map(|x| dense_value(&mut graph, x)).collect();
    let analytic = evaluate(&graph, &c.params, &fetches).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (j, (_, value)) in c.params.iter().enumerate() {
        let base = value.to_f64_vec().unwrap();
        let an = analytic[j].to_f64_vec().unwrap();
        if an.len() != base.len() {
            return Err(format!("gradient {j} has {} elements, param has {}", an.len(), base.len()));
        }
        for k in 0..base.len() {
            let at = |delta: f64| -> Result<f64, String> {
                let mut v = base.clone();
                v[k] += delta;
                let mut feeds = c.params.clone();
                feeds[j].1 = Tensor::new(value.shape().clone(), v).unwrap();
                let out = evaluate(&c.graph, &feeds, std::slice::from_ref(&c.target)).map_err(|e| e.to_string())?;
                Ok(out[0].to_f64_vec().unwrap().iter().sum())
            };
            let fd = (at(H)? - at(-H)?) / (2.0 * H);
            worst = worst.max((fd - an[k]).abs() / an[k].abs().max(1.0));
        }
    }
    Ok(worst)
}

fn activation(b: &mut GraphBuilder, x: &Endpoint, which: usize) -> Endpoint {
    match which {
        0 => b.relu(x),
        1 => b.sigmoid(x),
        2 => b.square(x),
        _ => b.identity(x),
    }
}

/// Batch through up to three dense layers, then either a squared or a
/// cross-entropy loss.
fn mlp_case(rng: &mut ChaCha8Rng) -> FdCase {
    let mut b = GraphBuilder::new();
    let depth = rng.gen_range(1..=3);
    let batch = rng.gen_range(1..=3);
    let mut dims = vec![rng.gen_range(1..=4)];
    for _ in 0..depth {
        dims.push(rng.gen_range(2..=4));
    }
    let mut params = Vec::new();
    let x = b.placeholder("x", DType::F64, Shape::new(vec![batch, dims[0]]));
    params.push((x.clone(), tensor(&[batch, dims[0]], rand_vec(rng, batch * dims[0]))));
    let mut h = x;
    for l in 0..depth {
        let w = b.placeholder(&format!("w{l}"), DType::F64, Shape::new(vec![dims[l], dims[l + 1]]));
        params.push((w.clone(), tensor(&[dims[l], dims[l + 1]], rand_vec(rng, dims[l] * dims[l + 1]))));
        h = b.matmul(&h, &w);
        if l + 1 < depth {
            h = activation(&mut b, &h, rng.gen_range(0..4));
        }
    }
    let out = dims[depth];
    let target = if rng.gen_bool(0.5) {
        let mut y = vec![0.0; batch * out];
        for r in 0..batch {
            y[r * out + rng.gen_range(0..out)] = 1.0;
        }
        let y = b.constant(tensor(&[batch, out], y));
        let xent = b.softmax_xent(&h, &y);
        b.reduce_mean(&xent, None)
    } else {
        let sq = b.square(&h);
        b.reduce_sum(&sq, None)
    };
    FdCase {
        graph: b.finish().unwrap(),
        target,
        params,
    }
}

/// Lookup into a table sharded by `id mod s`, followed by a projection.
fn embedding_case(rng: &mut ChaCha8Rng) -> FdCase {
    let mut b = GraphBuilder::new();
    let vocab = rng.gen_range(4..=10);
    let dim = rng.gen_range(1..=3);
    let s = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=6);
    let ids: Vec<i64> = (0..n).map(|_| rng.gen_range(0..vocab as i64)).collect();
    let mut params = Vec::new();
    let shards: Vec<Endpoint> = (0..s)
        .map(|i| {
            let rows = shard_rows(vocab, s, i);
            let p = b.placeholder(&format!("shard{i}"), DType::F64, Shape::new(vec![rows, dim]));
            params.push((p.clone(), tensor(&[rows, dim], rand_vec(rng, rows * dim))));
            p
        })
        .collect();
    let ids = b.constant(Tensor::vector(ids));
    let sc = b.constant(Tensor::scalar(s as i64));
    let shard_of = b.binary("Mod", &ids, &sc);
    let local = b.binary("FloorDiv", &ids, &sc);
    let pos = b.unary("RangeLike", &ids);
    let locals = b.dynamic_partition(&local, &shard_of, s);
    let positions = b.dynamic_partition(&pos, &shard_of, s);
    let rows: Vec<Endpoint> = (0..s).map(|i| b.gather(&shards[i], &locals[i])).collect();
    let emb = b.dynamic_stitch(&positions, &rows);
    let w = b.placeholder("proj", DType::F64, Shape::new(vec![dim, 2]));
    params.push((w.clone(), tensor(&[dim, 2], rand_vec(rng, dim * 2))));
    let logits = b.matmul(&emb, &w);
    let target = if rng.gen_bool(0.5) {
        let mut y = vec![0.0; n * 2];
        for r in 0..n {
            y[r * 2 + rng.gen_range(0..2)] = 1.0;
        }
        let y = b.constant(tensor(&[n, 2], y));
        let xent = b.softmax_xent(&logits, &y);
        b.reduce_sum(&xent, None)
    } else {
        let a = activation(&mut b, &logits, rng.gen_range(1..4));
        b.reduce_mean(&a, None)
    };
    FdCase {
        graph: b.finish().unwrap(),
        target,
        params,
    }
}

/// A conditional whose branches compute different functions of the same
/// two parameters.
fn cond_case(rng: &mut ChaCha8Rng) -> FdCase {
    let mut b = GraphBuilder::new();
    let k = rng.gen_range(1..=3);
    let x = b.placeholder("x", DType::F64, Shape::new(vec![k, k]));
    let w = b.placeholder("w", DType::F64, Shape::new(vec![k, k]));
    let params = vec![
        (x.clone(), tensor(&[k, k], rand_vec(rng, k * k))),
        (w.clone(), tensor(&[k, k], rand_vec(rng, k * k))),
    ];
    let p = b.constant(Tensor::scalar(rng.gen_bool(0.5)));
    let (fa, fb) = (rng.gen_range(0..4), rng.gen_range(0..4));
    let outs = b.cond(
        &p,
        &[x, w],
        |g, ins| {
            let m = g.matmul(&ins[0], &ins[1]);
            vec![activation(g, &m, fa)]
        },
        |g, ins| {
            let a = activation(g, &ins[0], fb);
            vec![g.mul(&a, &ins[1])]
        },
    );
    let sq = b.square(&outs[0]);
    let target = b.reduce_sum(&sq, None);
    FdCase {
        graph: b.finish().unwrap(),
        target,
        params,
    }
}

#[test]
fn c01_gradients_match_finite_differences() {
    criterion(1, "autodiff vs central differences", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        let mut count = 0;
        for i in 0..210 {
            let case = match i % 3 {
                0 => mlp_case(&mut rng),
                1 => embedding_case(&mut rng),
                _ => cond_case(&mut rng),
            };
            let err = fd_error(&case).map_err(|e| format!("graph {i}: {e}"))?;
            if !(err < 1e-5) {
                return Err(format!("graph {i}: relative error {err:.3e}"));
            }
            worst = worst.max(err);
            count += 1;
        }
        let t = start.elapsed();
        if t > Duration::from_secs(120) {
            return Err(format!("took {t:?}"));
        }
        Ok(format!("{count} graphs, worst relative error {worst:.2e}, {:.1}s", t.as_secs_f64()))
    });
}

// ---- 2: distributed transparency ----

/// Random stateless graph over 3x3 f64 tensors; node devices are chosen
/// among `tasks` tasks. Returns the graph and some fetches.
fn random_stateless(rng: &mut ChaCha8Rng, tasks: usize, placement_seed: u64) -> (GraphDef, Vec<Endpoint>) {
    let mut prng = ChaCha8Rng::seed_from_u64(placement_seed);
    let mut b = GraphBuilder::new();
    let mut vals: Vec<Endpoint> = Vec::new();
    let n = rng.gen_range(4..20);
    for i in 0..n {
        let dev = format!("/job:worker/task:{}", prng.gen_range(0..tasks));
        let op = if i < 2 { 0 } else { rng.gen_range(0..9) };
        let a = vals.choose(rng).cloned();
        let c = vals.choose(rng).cloned();
        let v = b.with_device(&dev, |b| match (op, a, c) {
            (1, Some(a), Some(c)) => b.add_(&a, &c),
            (2, Some(a), Some(c)) => b.sub(&a, &c),
            (3, Some(a), Some(c)) => b.mul(&a, &c),
            (4, Some(a), Some(c)) => b.matmul(&a, &c),
            (5, Some(a), _) => b.neg(&a),
            (6, Some(a), _) => b.sigmoid(&a),
            (7, Some(a), _) => b.square(&a),
            (8, Some(a), Some(c)) => b.addn(&[a.clone(), c, a]),
            _ => b.constant(tensor(&[3, 3], (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect())),
        });
        vals.push(v);
    }
    let k = rng.gen_range(1..=3).min(vals.len());
    let mut fetches: Vec<Endpoint> = vals.choose_multiple(rng, k).cloned().collect();
    let last = vals.last().unwrap().clone();
    let s = b.with_device(&format!("/job:worker/task:{}", prng.gen_range(0..tasks)), |b| b.reduce_sum(&last, None));
    fetches.push(s);
    (b.finish().unwrap(), fetches)
}

fn run_on(cluster: Arc<Cluster>, g: GraphDef, fetches: &[Endpoint]) -> Result<Vec<Tensor>, String> {
    let s = Session::new(cluster, g).map_err(|e| e.to_string())?;
    s.run(&[], fetches).map_err(|e| e.to_string())
}

fn bit_same(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

#[test]
fn c02_results_do_not_depend_on_placement() {
    criterion(2, "distributed transparency", || {
        let start = Instant::now();
        let clusters: Vec<(usize, Arc<Cluster>)> = [1usize, 2, 4]
            .iter()
            .map(|&n| (n, Cluster::connect(ClusterConfig::inproc(n), quiet()).unwrap()))
            .collect();
        for i in 0..50u64 {
            let mut reference = None;
            for (n, cluster) in &clusters {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                let (g, fetches) = random_stateless(&mut rng, *n, 7 * i + *n as u64);
                let out = run_on(cluster.clone(), g, &fetches).map_err(|e| format!("graph {i} on {n}: {e}"))?;
                match &reference {
                    None => reference = Some(out),
                    Some(r) if bit_same(r, &out) => {}
                    Some(_) => return Err(format!("graph {i}: {n} tasks differ from 1 task")),
                }
            }
        }
        let (cfg, _servers) = start_loopback_workers(&[("worker", 3)]).map_err(|e| e.to_string())?;
        let tcp = Cluster::connect(cfg, quiet()).map_err(|e| e.to_string())?;
        for i in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
            let (g1, f1) = random_stateless(&mut rng, 1, 0);
            let want = run_on(clusters[0].1.clone(), g1, &f1)?;
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
            let (g3, f3) = random_stateless(&mut rng, 3, 1000 + i);
            let got = run_on(tcp.clone(), g3, &f3).map_err(|e| format!("tcp graph {i}: {e}"))?;
            if !bit_same(&want, &got) {
                return Err(format!("tcp graph {i} differs"));
            }
        }
        Ok(format!("50 graphs on 1/2/4 tasks, 10 on 3 tcp tasks, {:.1}s", start.elapsed().as_secs_f64()))
    });
}

// ---- 3 and 4: replicated training ----

const IN: usize = 3;
const HID: usize = 4;
const BATCH: usize = 8;

fn random_param(name: &str, rows: usize, cols: usize, seed: u64) -> ParamSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParamSpec::value(name, tensor(&[rows, cols], rand_vec(&mut rng, rows * cols)))
}

fn mlp_params() -> Vec<ParamSpec> {
    vec![random_param("w1", IN, HID, 21), random_param("w2", HID, 1, 22)]
}

fn mlp_loss(b: &mut GraphBuilder, w: usize, p: &[Endpoint]) -> miniflow::Result<Endpoint> {
    let x = b.placeholder(&format!("x{w}"), DType::F64, Shape::new(vec![BATCH, IN]));
    let y = b.placeholder(&format!("y{w}"), DType::F64, Shape::new(vec![BATCH, 1]));
    let h = b.matmul(&x, &p[0]);
    let h = b.relu(&h);
    let o = b.matmul(&h, &p[1]);
    let d = b.sub(&o, &y);
    let sq = b.square(&d);
    Ok(b.reduce_mean(&sq, None))
}

fn mlp_batch(w: usize, k: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64((w * 100_000 + k) as u64);
    let x = rand_vec(&mut rng, BATCH * IN);
    let y: Vec<f64> = (0..BATCH).map(|i| x[i * IN] - 0.5 * x[i * IN + 2]).collect();
    (tensor(&[BATCH, IN], x), tensor(&[BATCH, 1], y))
}

fn mlp_feeds(w: usize, k: usize) -> Vec<(Endpoint, Tensor)> {
    let (x, y) = mlp_batch(w, k);
    vec![(Endpoint::new(format!("x{w}"), 0), x), (Endpoint::new(format!("y{w}"), 0), y)]
}

fn session(tasks: usize, g: GraphDef) -> Session {
    Session::new(Cluster::connect(ClusterConfig::inproc(tasks), quiet()).unwrap(), g).unwrap()
}

/// Mean-gradient SGD one worker at a time: each worker's gradient comes
/// from a standalone single-worker graph, the mean is taken in worker
/// order on the host.
fn sequential_sgd(n: usize, steps: usize, lr: f64) -> Vec<Vec<f64>> {
    let mut b = GraphBuilder::new();
    let specs = mlp_params();
    let ps: Vec<Endpoint> = specs.iter().map(|p| b.placeholder(&p.name, DType::F64, p.shape.clone())).collect();
    let loss = mlp_loss(&mut b, 0, &ps).unwrap();
    let g = build_gradients(b.graph(), &loss, &ps).unwrap();
    let grads: Vec<Endpoint> = g.grads.iter().map(|g| g.dense_endpoint().unwrap().clone()).collect();
    let s = session(1, g.graph);
    let mut params: Vec<Vec<f64>> = specs
        .iter()
        .map(|p| match &p.init {
            miniflow::training::ParamInit::Value(t) => t.to_vec::<f64>().unwrap(),
            _ => unreachable!(),
        })
        .collect();
    for k in 0..steps {
        let mut sums: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        for w in 0..n {
            let (x, y) = mlp_batch(w, k);
            let mut feeds = vec![(Endpoint::new("x0", 0), x), (Endpoint::new("y0", 0), y)];
            for (i, p) in params.iter().enumerate() {
                feeds.push((ps[i].clone(), Tensor::new(specs[i].shape.clone(), p.clone()).unwrap()));
            }
            let out = s.run(&feeds, &grads).unwrap();
            for (sum, g) in sums.iter_mut().zip(&out) {
                for (a, v) in sum.iter_mut().zip(g.to_vec::<f64>().unwrap()) {
                    *a += v;
                }
            }
        }
        for (p, sum) in params.iter_mut().zip(&sums) {
            for (v, s) in p.iter_mut().zip(sum) {
                *v = *v + (-lr) * (s / n as f64);
            }
        }
    }
    params
}

fn replica_spec(config: SyncConfig, delays: Vec<u64>) -> ReplicaSpec {
    let n = config.workers;
    ReplicaSpec {
        config,
        optimizer: OptimizerSpec::sgd(0.1),
        params: mlp_params(),
        ps_devices: vec!["/task:0".into(), "/task:1".into()],
        worker_devices: (0..n).map(|w| format!("/task:{}", w + 2)).collect(),
        worker_delay_ms: delays,
    }
}

fn final_params(s: &Session) -> Vec<Vec<f64>> {
    let mut b = GraphBuilder::new();
    let vals: Vec<Endpoint> = mlp_params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            b.with_device(&format!("/task:{}", i % 2), |b| {
                let v = b.variable(&p.name, DType::F64, p.shape.clone());
                b.read(&v)
            })
        })
        .collect();
    let reader = Session::new(s.cluster().clone(), b.finish().unwrap()).unwrap();
    reader.run(&[], &vals).unwrap().iter().map(|t| t.to_vec::<f64>().unwrap()).collect()
}

#[test]
fn c03_sync_training_equals_sequential_sgd() {
    criterion(3, "sync n=4 equals sequential mean-gradient SGD", || {
        let (n, steps) = (4, 100);
        let r = build_replicated(&replica_spec(SyncConfig::sync(n), vec![]), &mlp_loss).map_err(|e| e.to_string())?;
        let s = session(n + 2, r.graph.clone());
        let stats = train(&s, &r, steps, &mlp_feeds).map_err(|e| e.to_string())?;
        if stats.applied != vec![n as i64; steps] {
            return Err(format!("applied per step {:?}", stats.applied));
        }
        let got = final_params(&s);
        let want = sequential_sgd(n, steps, 0.1);
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&got) != bits(&want) {
            return Err(format!("parameters differ: {got:?} vs {want:?}"));
        }
        Ok(format!("{} parameters bit-identical after {steps} steps", bits(&got).len()))
    });
}

#[test]
fn c04_backup_workers_cut_step_time() {
    criterion(4, "backup workers n=5 m=3 with a 500 ms straggler", || {
        let steps = 6;
        let delays = vec![0, 0, 0, 0, 500];
        let run = |config: SyncConfig| -> Result<miniflow::training::TrainStats, String> {
            let r = build_replicated(&replica_spec(config, delays.clone()), &mlp_loss).map_err(|e| e.to_string())?;
            let s = session(7, r.graph.clone());
            train(&s, &r, steps, &mlp_feeds).map_err(|e| e.to_string())
        };
        let start = Instant::now();
        let backup = run(SyncConfig::backup(5, 3))?;
        let plain = run(SyncConfig::sync(5))?;
        if backup.applied != vec![3; steps] {
            return Err(format!("applied per step {:?}", backup.applied));
        }
        let (tb, tp) = (backup.median_step(), plain.median_step());
        let ratio = tb.as_secs_f64() / tp.as_secs_f64();
        if !(ratio < 0.6) {
            return Err(format!("median {tb:?} vs plain sync {tp:?} (ratio {ratio:.3})"));
        }
        Ok(format!(
            "3 applied every step, median {:.1} ms vs {:.1} ms (ratio {ratio:.3}), {:.1}s",
            tb.as_secs_f64() * 1e3,
            tp.as_secs_f64() * 1e3,
            start.elapsed().as_secs_f64()
        ))
    });
}

// ---- 5 and 6: benchmark and softmax counters ----

#[test]
fn c05_sparse_step_time_ignores_model_size() {
    criterion(5, "sparse null step, 16 MB vs 256 MB", || {
        let cfg = |bytes: u64| BenchConfig {
            ps: 16,
            workers: 1,
            mode: Mode::Sparse,
            model_bytes: bytes,
            lookups: 32,
            steps: 200,
            warmup: 20,
            ..Default::default()
        };
        // interleave the two sizes so drifting machine load hits both alike
        let (mut small, mut large) = (Vec::new(), Vec::new());
        for _ in 0..3 {
            small.extend(bench::run(&cfg(16 << 20)).map_err(|e| e.to_string())?.step_times);
            large.extend(bench::run(&cfg(256 << 20)).map_err(|e| e.to_string())?.step_times);
        }
        let (a, _, _) = miniflow_cli::summarize_ms(&small);
        let (b, _, _) = miniflow_cli::summarize_ms(&large);
        let spread = a.max(b) / a.min(b) - 1.0;
        if !(spread < 0.2) {
            return Err(format!("medians {a:.3} ms vs {b:.3} ms differ by {:.1}%", spread * 100.0));
        }
        Ok(format!("medians {a:.3} ms vs {b:.3} ms, {:.1}% apart", spread * 100.0))
    });
}

#[test]
fn c06_sampled_softmax_counter_ratio() {
    criterion(6, "sampled softmax FLOP and byte ratio", || {
        let (vocab, sampled) = (40_000usize, 512usize);
        let expect = vocab as f64 / (sampled + 1) as f64;
        let mut details = Vec::new();
        for batch in [1usize, 4] {
            let r = demo::lm(&LmConfig {
                vocab,
                sampled,
                dim: 8,
                batch,
                ps: 1,
                steps: 2,
                learning_rate: 0.1,
                seed: 6,
            })
            .map_err(|e| e.to_string())?;
            let flops = r.flop_ratio();
            if (flops / expect - 1.0).abs() >= 0.05 || (flops / 78.0 - 1.0).abs() >= 0.05 {
                return Err(format!("batch {batch}: FLOP ratio {flops:.3}, expected {expect:.3}"));
            }
            details.push(format!("batch {batch} flops {flops:.2}"));
            // each example reads its own S+1 rows, so bytes compare per example
            let bytes = r.byte_ratio() * batch as f64;
            if (bytes / expect - 1.0).abs() >= 0.05 {
                return Err(format!("batch {batch}: per-example byte ratio {bytes:.3}, expected {expect:.3}"));
            }
            details.push(format!("bytes {bytes:.2}"));
        }
        Ok(format!("|V|/(S+1) = {expect:.2}; {}", details.join(", ")))
    });
}

// ---- 7: control flow ----

fn cpu() -> Arc<Device> {
    Arc::new(Device::cpu("/job:local/task:0/cpu:0"))
}

/// Applies a random chain of elementwise ops; returns the graph value and
/// the host value side by side.
fn chain(g: &mut GraphBuilder, x: &Endpoint, host: f64, ops: &[(u8, f64)]) -> (Endpoint, f64) {
    let (mut e, mut h) = (x.clone(), host);
    for &(op, c) in ops {
        match op {
            0 => {
                e = g.neg(&e);
                h = -h;
            }
            1 => {
                e = g.square(&e);
                h = h * h;
            }
            2 => {
                let k = g.scalar_f64(c);
                e = g.add_(&e, &k);
                h = h + c;
            }
            _ => {
                let k = g.scalar_f64(c);
                e = g.mul(&e, &k);
                h = h * c;
            }
        }
    }
    (e, h)
}

fn random_ops(rng: &mut ChaCha8Rng) -> Vec<(u8, f64)> {
    (0..rng.gen_range(1..=5)).map(|_| (rng.gen_range(0..4u8), rng.gen_range(-2.0..2.0))).collect()
}

/// Counts kernel runs of untaken-branch nodes over random conditionals.
fn untaken_invocations(rng: &mut ChaCha8Rng) -> Result<(u64, usize), String> {
    let pred = rng.gen_bool(0.5);
    let x0 = rng.gen_range(-2.0..2.0);
    let (then_ops, else_ops) = (random_ops(rng), random_ops(rng));
    let mut b = GraphBuilder::new();
    let p = b.constant(Tensor::scalar(pred));
    let x = b.scalar_f64(x0);
    let mut then_nodes = Vec::new();
    let mut else_nodes = Vec::new();
    let (mut then_host, mut else_host) = (0.0, 0.0);
    let out = b.cond(
        &p,
        &[x],
        |g, ins| {
            let before = g.graph().nodes.len();
            let (e, h) = chain(g, &ins[0], x0, &then_ops);
            then_host = h;
            then_nodes = g.graph().nodes[before..].iter().map(|n| n.name.clone()).collect();
            vec![e]
        },
        |g, ins| {
            let before = g.graph().nodes.len();
            let (e, h) = chain(g, &ins[0], x0, &else_ops);
            else_host = h;
            else_nodes = g.graph().nodes[before..].iter().map(|n| n.name.clone()).collect();
            vec![e]
        },
    );
    let e = Executor::new(&b.finish().unwrap(), cpu()).map_err(|e| e.to_string())?;
    let v = e.run_local(HashMap::new(), &out).map_err(|e| e.to_string())?[0]
        .scalar_value::<f64>()
        .unwrap();
    let (want, untaken, taken) = if pred {
        (then_host, &else_nodes, &then_nodes)
    } else {
        (else_host, &then_nodes, &else_nodes)
    };
    if v.to_bits() != want.to_bits() {
        return Err(format!("conditional gave {v}, host {want}"));
    }
    for n in taken {
        if e.invocations(n) != Some(1) {
            return Err(format!("taken node {n} ran {:?} times", e.invocations(n)));
        }
    }
    let count = untaken.iter().map(|n| e.invocations(n).unwrap_or(0)).sum();
    Ok((count, untaken.len()))
}

/// `acc = acc*a + i` for i in 0..n, optionally adding `c*j` for j in
/// 0..m inside each outer iteration.
struct LoopProgram {
    n: i64,
    m: Option<i64>,
    a: i64,
    c: i64,
    acc0: i64,
}

impl LoopProgram {
    fn host(&self) -> i64 {
        let mut acc = self.acc0;
        for i in 0..self.n {
            acc = acc * self.a + i;
            if let Some(m) = self.m {
                for j in 0..m {
                    acc += self.c * j;
                }
            }
        }
        acc
    }

    fn graph(&self) -> (GraphDef, Endpoint) {
        let mut g = GraphBuilder::new();
        let i0 = g.constant(Tensor::scalar(0i64));
        let acc0 = g.constant(Tensor::scalar(self.acc0));
        let n = g.constant(Tensor::scalar(self.n));
        let a = g.constant(Tensor::scalar(self.a));
        let c = g.constant(Tensor::scalar(self.c));
        let m = g.constant(Tensor::scalar(self.m.unwrap_or(0)));
        let nested = self.m.is_some();
        let outs = g.while_loop(
            &[i0, acc0],
            &[n, a, c, m],
            |g, v, inv| g.binary("Less", &v[0], &inv[0]),
            |g, v, inv| {
                let scaled = g.mul(&v[1], &inv[1]);
                let mut acc = g.add_(&scaled, &v[0]);
                if nested {
                    let j0 = g.constant(Tensor::scalar(0i64));
                    let inner = g.while_loop(
                        &[j0, acc],
                        &[inv[3].clone(), inv[2].clone()],
                        |g, w, inv| g.binary("Less", &w[0], &inv[0]),
                        |g, w, inv| {
                            let one = g.constant(Tensor::scalar(1i64));
                            let cj = g.mul(&inv[1], &w[0]);
                            vec![g.add_(&w[0], &one), g.add_(&w[1], &cj)]
                        },
                    );
                    acc = inner[1].clone();
                }
                let one = g.constant(Tensor::scalar(1i64));
                vec![g.add_(&v[0], &one), acc]
            },
        );
        (g.finish().unwrap(), outs[1].clone())
    }
}

#[test]
fn c07_control_flow() {
    criterion(7, "conditionals skip untaken branches; loops match host", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut untaken, mut watched) = (0u64, 0usize);
        for _ in 0..100 {
            let (u, w) = untaken_invocations(&mut rng)?;
            untaken += u;
            watched += w;
        }
        if untaken != 0 {
            return Err(format!("{untaken} kernel invocations on untaken branches"));
        }
        let (mut zero_trip, mut nested) = (0, 0);
        for k in 0..50 {
            let n = if k % 5 == 0 { 0 } else { rng.gen_range(1..=6) };
            let m = if k % 2 == 0 { Some(if k % 4 == 0 { 0 } else { rng.gen_range(1..=4) }) } else { None };
            let prog = LoopProgram {
                n,
                m,
                a: rng.gen_range(-2..=2),
                c: rng.gen_range(-3..=3),
                acc0: rng.gen_range(-5..=5),
            };
            zero_trip += usize::from(n == 0 || m == Some(0));
            nested += usize::from(m.is_some());
            let (g, out) = prog.graph();
            let e = Executor::new(&g, cpu()).map_err(|e| e.to_string())?;
            let got = e.run_local(HashMap::new(), &[out]).map_err(|e| format!("loop {k}: {e}"))?[0]
                .scalar_value::<i64>()
                .unwrap();
            if got != prog.host() {
                return Err(format!("loop {k}: graph {got}, host {}", prog.host()));
            }
        }
        Ok(format!(
            "0 untaken invocations over 100 conditionals ({watched} branch nodes); 50 loops ({nested} nested, {zero_trip} with a zero-trip loop) match"
        ))
    });
}

// ---- 8: checkpoint recovery ----

struct Model {
    session: Session,
    saver: Saver,
    init: String,
    step: String,
    values: Vec<Endpoint>,
}

const TARGET_A: [f64; 3] = [1.0, 1.0, 1.0];
const TARGET_C: [f64; 4] = [0.0, 1.0, 0.0, 1.0];
const INIT_A: [f64; 3] = [0.5, -1.0, 2.0];
const INIT_C: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

/// Two variables on two tasks, each pulled towards a target by SGD.
fn model() -> Model {
    let mut b = GraphBuilder::new();
    let a = b.with_device("/task:0", |b| b.variable("a", DType::F64, Shape::new(vec![3])));
    let c = b.with_device("/task:1", |b| b.variable("c", DType::F64, Shape::new(vec![2, 2])));
    let a0 = b.constant(Tensor::vector(INIT_A.to_vec()));
    let c0 = b.constant(tensor(&[2, 2], INIT_C.to_vec()));
    let ia = b.assign(&a, &a0).node;
    let ic = b.assign(&c, &c0).node;
    let init = b.noop(&[ia, ic]);
    let ra = b.read(&a);
    let rc = b.read(&c);
    let ta = b.constant(Tensor::vector(TARGET_A.to_vec()));
    let tc = b.constant(tensor(&[2, 2], TARGET_C.to_vec()));
    let ga = b.sub(&ra, &ta);
    let gc = b.sub(&rc, &tc);
    let ua = b.apply_gradient_descent(&a, &ga, 0.1).node;
    let uc = b.apply_gradient_descent(&c, &gc, 0.1).node;
    let step = b.noop(&[ua, uc]);
    let values = vec![b.read(&a), b.read(&c)];
    let saver = build_saver(&mut b, &[a, c]).unwrap();
    Model {
        session: session(2, b.finish().unwrap()),
        saver,
        init,
        step,
        values,
    }
}

impl Model {
    fn values(&self) -> Result<Vec<u64>, String> {
        let out = self.session.run(&[], &self.values).map_err(|e| e.to_string())?;
        Ok(out.iter().flat_map(|t| t.to_vec::<f64>().unwrap()).map(f64::to_bits).collect())
    }
}

/// Host replay: x ← x + (−0.1)(x − t).
fn oracle(steps: usize) -> Vec<u64> {
    let mut a = INIT_A;
    let mut c = INIT_C;
    for _ in 0..steps {
        for (x, t) in a.iter_mut().zip(TARGET_A) {
            *x = *x + (-0.1) * (*x - t);
        }
        for (x, t) in c.iter_mut().zip(TARGET_C) {
            *x = *x + (-0.1) * (*x - t);
        }
    }
    a.iter().chain(&c).map(|x| x.to_bits()).collect()
}

#[test]
fn c08_checkpoint_crash_recovery() {
    criterion(8, "checkpoint crash recovery", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let crashed_at;
        {
            let m = model();
            m.session.run_targets(&[], &[], &[m.init.clone()]).map_err(|e| e.to_string())?;
            let mut policy = CheckpointPolicy::new(dir.path(), 10, 10).map_err(|e| e.to_string())?;
            let mut step = 0u64;
            loop {
                if step == 40 {
                    // both tasks die before step 41 runs
                    for t in m.session.cluster().tasks() {
                        m.session.cluster().kill_task(&t).map_err(|e| e.to_string())?;
                    }
                }
                if step == 100 {
                    return Err("training was not interrupted".into());
                }
                if m.session.run_targets(&[], &[], &[m.step.clone()]).is_err() {
                    break;
                }
                step += 1;
                policy.after_step(&m.session, &m.saver, step).map_err(|e| e.to_string())?;
            }
            crashed_at = step;
        }
        let policy = CheckpointPolicy::new(dir.path(), 10, 10).map_err(|e| e.to_string())?;
        let m = model();
        let restored = policy.restore_latest(&m.session, &m.saver).map_err(|e| e.to_string())?;
        if restored != Some(40) {
            return Err(format!("restored {restored:?} after a crash at step {crashed_at}"));
        }
        if m.values()? != oracle(40) {
            return Err("restored parameters differ from the step-40 oracle".into());
        }
        let newest = checkpoint_path(dir.path(), 40);
        let mut bytes = std::fs::read(&newest).map_err(|e| e.to_string())?;
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        std::fs::write(&newest, bytes).map_err(|e| e.to_string())?;
        let m = model();
        let restored = policy.restore_latest(&m.session, &m.saver).map_err(|e| e.to_string())?;
        if restored != Some(30) {
            return Err(format!("with step 40 corrupted, restored {restored:?}"));
        }
        if m.values()? != oracle(30) {
            return Err("fallback parameters differ from the step-30 oracle".into());
        }
        Ok(format!("crashed after step {crashed_at}; restored 40 exactly; corrupt 40 falls back to 30 exactly"))
    });
}

// ---- 9: plan caching ----

#[test]
fn c09_second_run_is_one_message_per_task() {
    criterion(9, "cached second run", || {
        let mut b = GraphBuilder::new();
        let x = b.with_device("/task:0", |b| b.placeholder("x", DType::F64, Shape::new(vec![3])));
        let y = b.with_device("/task:1", |b| {
            let k = b.scalar_f64(3.0);
            b.mul(&x, &k)
        });
        let z = b.with_device("/task:2", |b| b.square(&y));
        let out = b.with_device("/task:0", |b| b.add_(&z, &x));
        let cluster = Cluster::connect(ClusterConfig::inproc(3), quiet()).map_err(|e| e.to_string())?;
        let s = Session::new(cluster.clone(), b.finish().unwrap()).map_err(|e| e.to_string())?;
        let feeds = vec![(x.clone(), Tensor::vector(vec![1.0f64, 2.0, 3.0]))];
        let first = s.run(&feeds, &[out.clone()]).map_err(|e| e.to_string())?;
        let c = cluster.counters();
        c.reset();
        let second = s.run(&feeds, &[out]).map_err(|e| e.to_string())?;
        let reg = c.total(MsgType::RegisterSubgraph);
        if reg != 0 {
            return Err(format!("{reg} RegisterSubgraph messages on the second run"));
        }
        for t in cluster.tasks() {
            let runs = c.get(&t, MsgType::RunPartition);
            if runs != 1 {
                return Err(format!("{t} got {runs} RunPartition messages"));
            }
        }
        if !bit_same(&first, &second) {
            return Err("second run returned different values".into());
        }
        Ok(format!("0 registrations, 1 RunPartition to each of {} tasks", cluster.tasks().len()))
    });
}

// ---- 10: executor dispatch rate ----

#[test]
fn c10_null_dispatch_rate() {
    criterion(10, "null-op dispatch rate", || {
        let mut g = GraphBuilder::new();
        let names: Vec<String> = (0..10_000).map(|_| g.noop(&[])).collect();
        g.noop(&names);
        let e = Executor::new(&g.finish().unwrap(), cpu()).map_err(|e| e.to_string())?;
        e.run_local(HashMap::new(), &[]).map_err(|e| e.to_string())?;
        let before = e.total_invocations();
        let start = Instant::now();
        for _ in 0..20 {
            e.run_local(HashMap::new(), &[]).map_err(|e| e.to_string())?;
        }
        let secs = start.elapsed().as_secs_f64();
        let rate = (e.total_invocations() - before) as f64 / secs;
        if rate < 100_000.0 {
            return Err(format!("{rate:.0} dispatches/s"));
        }
        Ok(format!("{rate:.0} null dispatches/s"))
    });
}

// ---- 11: queue semantics under stress ----

fn scalar(v: i64) -> Vec<Tensor> {
    vec![Tensor::scalar(v)]
}

/// Several producers and consumers with random pauses on a small queue.
/// Checks per-producer FIFO order, no loss or duplication, the capacity
/// bound and close semantics. Returns the number of operations.
fn queue_stress(seed: u64) -> Result<usize, String> {
    let (producers, consumers, per) = (4usize, 3usize, 1500usize);
    let cap = 3;
    let q = Arc::new(QueueState::new(cap, vec![DType::I64], None).map_err(|e| e.to_string())?);
    let cancel = CancelToken::new();
    let over = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let mut handles = Vec::new();
    for p in 0..producers {
        let (q, cancel, over) = (q.clone(), cancel.clone(), over.clone());
        handles.push(std::thread::spawn(move || -> Result<Vec<i64>, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + p as u64);
            for k in 0..per {
                if rng.gen_ratio(1, 8) {
                    std::thread::yield_now();
                }
                q.enqueue(scalar((p * 1_000_000 + k) as i64), &cancel).map_err(|e| e.to_string())?;
                if q.size() > cap {
                    over.store(true, std::sync::atomic::Ordering::SeqCst);
                }
            }
            Ok(Vec::new())
        }));
    }
    let mut takers = Vec::new();
    for c in 0..consumers {
        let (q, cancel) = (q.clone(), cancel.clone());
        takers.push(std::thread::spawn(move || -> Result<Vec<i64>, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 77 + c as u64);
            let mut got = Vec::new();
            loop {
                if rng.gen_ratio(1, 8) {
                    std::thread::yield_now();
                }
                let r = if rng.gen_ratio(1, 4) {
                    q.dequeue_many(2, &cancel).map(|v| v.into_iter().flatten().collect::<Vec<_>>())
                } else {
                    q.dequeue(&cancel)
                };
                match r {
                    Ok(ts) => got.extend(ts.iter().map(|t| t.scalar_value::<i64>().unwrap())),
                    Err(Error::OutOfRange(_)) => return Ok(got),
                    Err(e) => return Err(e.to_string()),
                }
            }
        }));
    }
    for h in handles {
        h.join().map_err(|_| "producer panicked".to_string())??;
    }
    q.close();
    if !matches!(q.enqueue(scalar(-1), &cancel), Err(Error::QueueClosed)) {
        return Err("enqueue after close did not fail with QueueClosed".into());
    }
    let mut all: Vec<Vec<i64>> = Vec::new();
    for t in takers {
        all.push(t.join().map_err(|_| "consumer panicked".to_string())??);
    }
    // a closed queue holding a single element cannot satisfy dequeue_many(2);
    // drain whatever was left after the consumers stopped
    let mut rest = Vec::new();
    while let Ok(t) = q.dequeue(&cancel) {
        rest.push(t[0].scalar_value::<i64>().unwrap());
    }
    if over.load(std::sync::atomic::Ordering::SeqCst) {
        return Err("queue grew past its capacity".into());
    }
    for got in &all {
        let mut last = vec![-1i64; producers];
        for &v in got {
            let (p, k) = ((v / 1_000_000) as usize, v % 1_000_000);
            if k <= last[p] {
                return Err(format!("producer {p}: {k} dequeued after {}", last[p]));
            }
            last[p] = k;
        }
    }
    let mut seen: Vec<i64> = all.into_iter().flatten().chain(rest).collect();
    seen.sort_unstable();
    let mut want: Vec<i64> = (0..producers).flat_map(|p| (0..per).map(move |k| (p * 1_000_000 + k) as i64)).collect();
    want.sort_unstable();
    if seen != want {
        return Err(format!("{} elements out, {} in", seen.len(), want.len()));
    }
    Ok(2 * producers * per)
}

/// Single-threaded random operation sequences against a VecDeque model,
/// using only non-blocking moves.
fn queue_model(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = rng.gen_range(1..6);
    let q = QueueState::new(cap, vec![DType::I64], None).map_err(|e| e.to_string())?;
    let cancel = CancelToken::new();
    let mut model: VecDeque<i64> = VecDeque::new();
    let mut ops = 0;
    let mut next = 0i64;
    for _ in 0..200 {
        ops += 1;
        if rng.gen_bool(0.5) && model.len() < cap {
            q.enqueue(scalar(next), &cancel).map_err(|e| e.to_string())?;
            model.push_back(next);
            next += 1;
        } else if !model.is_empty() {
            let v = q.dequeue(&cancel).map_err(|e| e.to_string())?[0].scalar_value::<i64>().unwrap();
            if Some(v) != model.pop_front() {
                return Err(format!("dequeued {v} out of order"));
            }
        }
        if q.size() != model.len() {
            return Err("size disagrees with the model".into());
        }
    }
    q.close();
    for v in model {
        ops += 1;
        let got = q.dequeue(&cancel).map_err(|e| e.to_string())?[0].scalar_value::<i64>().unwrap();
        if got != v {
            return Err(format!("after close dequeued {got}, expected {v}"));
        }
    }
    if !matches!(q.dequeue(&cancel), Err(Error::OutOfRange(_))) {
        return Err("drained closed queue did not signal end of input".into());
    }
    Ok(ops + 1)
}

#[test]
fn c11_queue_semantics_under_stress() {
    criterion(11, "queue semantics stress", || {
        let mut ops = 0;
        for seed in 0..3 {
            ops += queue_stress(seed)?;
        }
        for seed in 0..50 {
            ops += queue_model(seed)?;
        }
        // a blocked enqueue is released by a dequeue
        let q = Arc::new(QueueState::new(1, vec![DType::I64], None).map_err(|e| e.to_string())?);
        let cancel = CancelToken::new();
        q.enqueue(scalar(1), &cancel).map_err(|e| e.to_string())?;
        let (q2, c2) = (q.clone(), cancel.clone());
        let blocked = std::thread::spawn(move || q2.enqueue(scalar(2), &c2));
        std::thread::sleep(Duration::from_millis(20));
        if blocked.is_finished() {
            return Err("enqueue on a full queue did not block".into());
        }
        q.dequeue(&cancel).map_err(|e| e.to_string())?;
        blocked.join().unwrap().map_err(|e| e.to_string())?;
        ops += 3;
        if ops < 10_000 {
            return Err(format!("only {ops} operations"));
        }
        Ok(format!("{ops} operations, 0 failures"))
    });
}
