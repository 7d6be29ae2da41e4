//! Small end-to-end models: a two-layer classifier and a toy language
//! model comparing the full and the sampled softmax.

use std::collections::BTreeMap;
use std::time::Instant;

use miniflow::autodiff::build_gradients;
use miniflow::graph::{Endpoint, GraphBuilder};
use miniflow::runtime::cluster::INPROC;
use miniflow::runtime::{Cluster, ClusterConfig, ClusterOptions, Session};
use miniflow::training::{apply_gradients, build_sampled_softmax_with, OptimizerSpec, SoftmaxCost};
use miniflow::{DType, Error, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CsvRow;

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub examples: usize,
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Steps per CSV row.
    pub report_every: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            examples: 256,
            hidden: 16,
            steps: 500,
            learning_rate: 0.5,
            report_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpReport {
    pub rows: Vec<CsvRow>,
    pub final_loss: f64,
    pub accuracy: f64,
    /// First step after which train accuracy reached 0.95.
    pub steps_to_95: Option<usize>,
}

impl MlpReport {
    /// Lines that do not depend on timing.
    pub fn summary(&self) -> Vec<String> {
        vec![
            format!("# final_loss={:.6}", self.final_loss),
            format!("# train_accuracy={:.4}", self.accuracy),
            format!(
                "# steps_to_95={}",
                self.steps_to_95.map_or("none".to_string(), |s| s.to_string())
            ),
        ]
    }
}

/// Two classes split by a line through the unit square, with a margin.
/// Rows are `[x0, x1, 1]`; the constant column stands in for a bias.
pub fn separable_data(n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut y) = (Vec::with_capacity(3 * n), Vec::with_capacity(n));
    while y.len() < n {
        let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let m = a - 0.5 * b + 0.1;
        if m.abs() < 0.05 {
            continue;
        }
        x.extend([a, b, 1.0]);
        y.push(usize::from(m > 0.0));
    }
    (x, y)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Internal(format!("loss diverged to {loss} at step {step}")))
    }
}

fn argmax_rows(logits: &[f64], cols: usize) -> Vec<usize> {
    logits
        .chunks(cols)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn mlp(cfg: &MlpConfig) -> Result<MlpReport> {
    if cfg.examples == 0 || cfg.hidden == 0 || cfg.steps == 0 || cfg.report_every == 0 {
        return Err(Error::InvalidArgument("examples, hidden, steps and report interval must be positive".into()));
    }
    let (n, h) = (cfg.examples, cfg.hidden);
    let (x, y) = separable_data(n, cfg.seed);
    let mut onehot = vec![0.0; 2 * n];
    for (i, &c) in y.iter().enumerate() {
        onehot[2 * i + c] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut b = GraphBuilder::new();
    let w1 = b.variable("w1", DType::F64, [3, h]);
    let w2 = b.variable("w2", DType::F64, [h, 2]);
    let c1 = b.constant(Tensor::new([3, h], uniform(&mut rng, 3 * h, 0.5))?);
    let c2 = b.constant(Tensor::new([h, 2], uniform(&mut rng, 2 * h, 0.5))?);
    let a1 = b.assign(&w1, &c1);
    let a2 = b.assign(&w2, &c2);
    let init = b.noop(&[a1.node, a2.node]);
    let xs = b.constant(Tensor::new([n, 3], x)?);
    let ys = b.constant(Tensor::new([n, 2], onehot)?);
    let r1 = b.read(&w1);
    let hid = b.matmul(&xs, &r1);
    let hid = b.relu(&hid);
    let r2 = b.read(&w2);
    let logits = b.matmul(&hid, &r2);
    let xent = b.softmax_xent(&logits, &ys);
    let loss = b.reduce_mean(&xent, None);
    let grads = build_gradients(&b.into_graph(), &loss, &[w1.clone(), w2.clone()])?;
    let mut b = GraphBuilder::from_graph(grads.graph);
    let opt = OptimizerSpec::sgd(cfg.learning_rate);
    let train = apply_gradients(&mut b, &opt, &[(w1, grads.grads[0].clone()), (w2, grads.grads[1].clone())])?;
    let session = Session::new(Cluster::inproc(1)?, b.finish()?)?;

    session.run_targets(&[], &[], &[init])?;
    let mut rows = Vec::new();
    let mut window = Vec::with_capacity(cfg.report_every);
    let mut steps_to_95 = None;
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let out = session.run_targets(&[], &[loss.clone(), logits.clone()], &[train.clone()])?;
        window.push(t0.elapsed());
        // fetched values are from before this step's update
        final_loss = out[0].scalar_value::<f64>()?;
        check_finite(step, final_loss)?;
        let pred = argmax_rows(out[1].as_slice::<f64>()?, 2);
        let correct = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        if correct as f64 >= 0.95 * n as f64 && steps_to_95.is_none() {
            steps_to_95 = Some(step - 1);
        }
        if window.len() == cfg.report_every || step == cfg.steps {
            rows.push(CsvRow::from_times(step as u64, &window, n as f64));
            window.clear();
        }
    }
    // score the final parameters
    let out = session.run(&[], &[loss, logits])?;
    final_loss = out[0].scalar_value::<f64>().unwrap_or(final_loss);
    check_finite(cfg.steps, final_loss)?;
    let pred = argmax_rows(out[1].as_slice::<f64>()?, 2);
    let correct = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    let last = correct as f64 / n as f64;
    if last >= 0.95 && steps_to_95.is_none() {
        steps_to_95 = Some(cfg.steps);
    }
    Ok(MlpReport {
        rows,
        final_loss,
        accuracy: last,
        steps_to_95,
    })
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub vocab: usize,
    pub sampled: usize,
    pub dim: usize,
    pub batch: usize,
    /// PS tasks holding contiguous blocks of the softmax weights.
    pub ps: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab: 4000,
            sampled: 64,
            dim: 32,
            batch: 32,
            ps: 1,
            steps: 20,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub full: CsvRow,
    pub sampled: CsvRow,
    pub full_cost: SoftmaxCost,
    pub sampled_cost: SoftmaxCost,
    /// Softmax weight bytes read per step by each PS task under the full
    /// softmax.
    pub full_ps_bytes: Vec<u64>,
    pub full_loss: f64,
    pub sampled_loss: f64,
}

impl LmReport {
    pub fn flop_ratio(&self) -> f64 {
        self.full_cost.flops as f64 / self.sampled_cost.flops as f64
    }

    pub fn byte_ratio(&self) -> f64 {
        self.full_cost.weight_bytes as f64 / self.sampled_cost.weight_bytes as f64
    }

    pub fn summary(&self) -> Vec<String> {
        let bytes: Vec<String> = self.full_ps_bytes.iter().map(u64::to_string).collect();
        vec![
            format!("# full_flops={} sampled_flops={}", self.full_cost.flops, self.sampled_cost.flops),
            format!("# flop_ratio={:.4}", self.flop_ratio()),
            format!("# weight_byte_ratio={:.4}", self.byte_ratio()),
            format!("# full_ps_bytes_per_task={}", bytes.join(";")),
            format!("# full_final_loss={:.6} sampled_final_loss={:.6}", self.full_loss, self.sampled_loss),
        ]
    }
}

fn ps_device(i: usize) -> String {
    format!("/job:ps/task:{i}")
}

const WORKER: &str = "/job:worker/task:0";

/// Row offset of each block when `vocab` rows are split into `k`
/// contiguous blocks of `ceil(vocab/k)` rows (the last may be shorter);
/// block `i` holds ids `[off[i], off[i+1])`.
fn block_offsets(vocab: usize, k: usize) -> Result<Vec<usize>> {
    let block = vocab.div_ceil(k);
    if block * (k - 1) >= vocab {
        return Err(Error::InvalidArgument(format!("{vocab} classes cannot fill {k} PS blocks")));
    }
    Ok((0..=k).map(|i| (i * block).min(vocab)).collect())
}

struct LmGraph {
    init: String,
    train_full: String,
    train_sampled: String,
    full_loss: Endpoint,
    block_logits: Vec<Endpoint>,
    hidden: Endpoint,
    sampled_loss: Endpoint,
    candidates: Endpoint,
    rows: Endpoint,
    tokens: Endpoint,
    labels: Endpoint,
    onehot: Endpoint,
}

fn build_lm(cfg: &LmConfig) -> Result<(miniflow::graph::GraphDef, LmGraph)> {
    let (v, d, bsz, k) = (cfg.vocab, cfg.dim, cfg.batch, cfg.ps);
    let off = block_offsets(v, k)?;
    let block = off[1];
    let seed = cfg.seed as i64;
    let mut b = GraphBuilder::new();

    let emb = b.with_device(&ps_device(0), |b| b.variable("embedding", DType::F32, [v, d]));
    let ws: Vec<Endpoint> = (0..k)
        .map(|i| b.with_device(&ps_device(i), |b| b.variable(&format!("softmax_w_{i}"), DType::F32, [off[i + 1] - off[i], d])))
        .collect();
    let mut inits = Vec::new();
    let r = b.with_device(&ps_device(0), |b| b.random_uniform([v, d], DType::F32, seed, -0.1, 0.1));
    inits.push(b.assign(&emb, &r).node);
    for (i, w) in ws.iter().enumerate() {
        let r = b.with_device(&ps_device(i), |b| {
            b.random_uniform([off[i + 1] - off[i], d], DType::F32, seed + 1 + i as i64, -0.1, 0.1)
        });
        inits.push(b.assign(w, &r).node);
    }
    let init = b.noop(&inits);

    let (tokens, labels, onehot) = b.with_device(WORKER, |b| {
        (
            b.placeholder("tokens", DType::I64, Shape::new(vec![bsz])),
            b.placeholder("labels", DType::I64, Shape::new(vec![bsz])),
            b.placeholder("labels_one_hot", DType::F32, Shape::new(vec![bsz, v])),
        )
    });
    let hidden = b.with_device(&ps_device(0), |b| {
        let table = b.read(&emb);
        b.gather(&table, &tokens)
    });

    // full softmax: each PS task multiplies by its own block
    let block_logits: Vec<Endpoint> = ws
        .iter()
        .enumerate()
        .map(|(i, w)| {
            b.with_device(&ps_device(i), |b| {
                let t = b.read(w);
                b.matmul_t(&hidden, &t, false, true)
            })
        })
        .collect();
    let full_loss = b.with_device(WORKER, |b| {
        let logits = if k == 1 { block_logits[0].clone() } else { b.concat(&block_logits, 1) };
        let xent = b.softmax_xent(&logits, &onehot);
        b.reduce_mean(&xent, None)
    });

    let params: Vec<Endpoint> = std::iter::once(emb.clone()).chain(ws.iter().cloned()).collect();
    let g = build_gradients(&b.into_graph(), &full_loss, &params)?;
    let mut b = GraphBuilder::from_graph(g.graph);
    let opt = OptimizerSpec::sgd(cfg.learning_rate);
    let pairs: Vec<_> = params.iter().cloned().zip(g.grads).collect();
    let train_full = apply_gradients(&mut b, &opt, &pairs)?;

    // sampled softmax: candidate rows are gathered from whichever block
    // holds them
    let lookup = |b: &mut GraphBuilder, ids: &Endpoint| -> Endpoint {
        let bc = b.constant(Tensor::scalar(block as i64));
        let part = b.binary("FloorDiv", ids, &bc);
        let local = b.binary("Mod", ids, &bc);
        if k == 1 {
            return b.with_device(&ps_device(0), |b| {
                let t = b.read(&ws[0]);
                b.gather(&t, &local)
            });
        }
        let pos = b.unary("RangeLike", ids);
        let locals = b.dynamic_partition(&local, &part, k);
        let positions = b.dynamic_partition(&pos, &part, k);
        let rows: Vec<Endpoint> = (0..k)
            .map(|i| {
                b.with_device(&ps_device(i), |b| {
                    let t = b.read(&ws[i]);
                    b.gather(&t, &locals[i])
                })
            })
            .collect();
        b.dynamic_stitch(&positions, &rows)
    };
    let s = b.with_device(WORKER, |b| {
        build_sampled_softmax_with(b, &lookup, &hidden, &labels, bsz, d, v, cfg.sampled, DType::F32, seed + 1000)
    })?;
    let g = build_gradients(&b.into_graph(), &s.loss, &params)?;
    let mut b = GraphBuilder::from_graph(g.graph);
    let pairs: Vec<_> = params.iter().cloned().zip(g.grads).collect();
    let train_sampled = apply_gradients(&mut b, &opt, &pairs)?;

    let graph = b.finish()?;
    Ok((
        graph,
        LmGraph {
            init,
            train_full,
            train_sampled,
            full_loss,
            block_logits,
            hidden,
            sampled_loss: s.loss,
            candidates: s.candidates,
            rows: s.rows,
            tokens,
            labels,
            onehot,
        },
    ))
}

/// Token stream in which the next word is a fixed function of the current
/// one, so the model has something to learn.
fn lm_batch(cfg: &LmConfig, step: usize) -> (Vec<i64>, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let v = cfg.vocab as i64;
    let toks: Vec<i64> = (0..cfg.batch).map(|_| rng.gen_range(0..v)).collect();
    let labels = toks.iter().map(|t| (t * 7 + 3) % v).collect();
    (toks, labels)
}

pub fn lm(cfg: &LmConfig) -> Result<LmReport> {
    if cfg.vocab < 2 || cfg.dim == 0 || cfg.batch == 0 || cfg.steps == 0 || cfg.ps == 0 {
        return Err(Error::InvalidArgument("vocab, dim, batch, steps and ps must be positive".into()));
    }
    if cfg.sampled == 0 || cfg.sampled >= cfg.vocab {
        return Err(Error::InvalidArgument(format!(
            "--sampled must lie in [1, {}) for vocabulary {}",
            cfg.vocab, cfg.vocab
        )));
    }
    let (graph, g) = build_lm(cfg)?;
    let mut jobs = BTreeMap::new();
    jobs.insert("ps".to_string(), vec![INPROC.to_string(); cfg.ps]);
    jobs.insert("worker".to_string(), vec![INPROC.to_string()]);
    let opts = ClusterOptions {
        heartbeat_interval: None,
        ..Default::default()
    };
    let session = Session::new(Cluster::connect(ClusterConfig { jobs }, opts)?, graph)?;
    session.run_targets(&[], &[], &[g.init.clone()])?;

    let v = cfg.vocab;
    let mut full_times = Vec::with_capacity(cfg.steps);
    let mut full_loss = f64::NAN;
    let mut full_cost = SoftmaxCost { flops: 0, weight_bytes: 0 };
    let mut full_ps_bytes = Vec::new();
    for step in 0..cfg.steps {
        let (toks, labels) = lm_batch(cfg, step);
        let mut oh = vec![0f32; cfg.batch * v];
        for (r, &l) in labels.iter().enumerate() {
            oh[r * v + l as usize] = 1.0;
        }
        let feeds = vec![
            (g.tokens.clone(), Tensor::vector(toks)),
            (g.onehot.clone(), Tensor::new([cfg.batch, v], oh)?),
        ];
        let mut fetches = vec![g.full_loss.clone(), g.hidden.clone()];
        fetches.extend(g.block_logits.iter().cloned());
        let t0 = Instant::now();
        let out = session.run_targets(&feeds, &fetches, &[g.train_full.clone()])?;
        full_times.push(t0.elapsed());
        full_loss = out[0].scalar_value::<f32>()? as f64;
        check_finite(step, full_loss)?;
        // per-task cost from the block logits each task produced
        let hid = &out[1];
        let (bsz, dim) = (hid.dims()[0], hid.dims()[1]);
        let elem = hid.dtype().size_of();
        let per_task: Vec<SoftmaxCost> = out[2..]
            .iter()
            .map(|l| SoftmaxCost::new(bsz, l.dims()[1], dim, l.dims()[1], elem))
            .collect();
        full_ps_bytes = per_task.iter().map(|c| c.weight_bytes).collect();
        full_cost = SoftmaxCost {
            flops: per_task.iter().map(|c| c.flops).sum(),
            weight_bytes: per_task.iter().map(|c| c.weight_bytes).sum(),
        };
    }

    let mut sampled_times = Vec::with_capacity(cfg.steps);
    let mut sampled_loss = f64::NAN;
    let mut sampled_cost = SoftmaxCost { flops: 0, weight_bytes: 0 };
    for step in 0..cfg.steps {
        let (toks, labels) = lm_batch(cfg, step);
        let feeds = vec![
            (g.tokens.clone(), Tensor::vector(toks)),
            (g.labels.clone(), Tensor::vector(labels)),
        ];
        let fetches = vec![g.sampled_loss.clone(), g.rows.clone(), g.candidates.clone()];
        let t0 = Instant::now();
        let out = session.run_targets(&feeds, &fetches, &[g.train_sampled.clone()])?;
        sampled_times.push(t0.elapsed());
        sampled_loss = out[0].scalar_value::<f32>()? as f64;
        check_finite(step, sampled_loss)?;
        sampled_cost = SoftmaxCost::of_sampled(&out[1], &out[2]);
    }

    let words = cfg.batch as f64;
    Ok(LmReport {
        full: CsvRow::from_times(cfg.steps as u64, &full_times, words),
        sampled: CsvRow::from_times(cfg.steps as u64, &sampled_times, words),
        full_cost,
        sampled_cost,
        full_ps_bytes,
        full_loss,
        sampled_loss,
    })
}
