//! The null-step benchmark: workers fetch parameters from PS tasks, do a
//! trivial computation and send updates back.

use std::collections::BTreeMap;
use std::time::Duration;

use miniflow::graph::{Endpoint, GraphBuilder};
use miniflow::runtime::cluster::INPROC;
use miniflow::runtime::{Cluster, ClusterConfig, ClusterOptions, Session};
use miniflow::training::embedding::shard_rows;
use miniflow::training::{build_replicated, normalized_speedup, train, OptimizerSpec, ParamSpec, ReplicaSpec, SyncConfig, SyncMode};
use miniflow::{DType, Error, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CsvRow;

/// Width of an embedding row in sparse mode, in f32 elements.
pub const ROW_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One 4-byte value per PS task.
    Scalar,
    /// The whole model is fetched and updated.
    Dense,
    /// `lookups` random rows of an embedding table.
    Sparse,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Mode::Scalar),
            "dense" => Ok(Mode::Dense),
            "sparse" => Ok(Mode::Sparse),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub ps: usize,
    pub workers: usize,
    pub mode: Mode,
    pub model_bytes: u64,
    pub lookups: usize,
    pub steps: usize,
    /// Leading steps left out of the statistics.
    pub warmup: usize,
    pub sync: SyncMode,
    /// Extra synchronous workers whose updates may be dropped.
    pub backup: usize,
    pub seed: u64,
    /// TCP cluster with jobs `ps` and `worker`; in-process when absent.
    pub cluster: Option<ClusterConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ps: 4,
            workers: 1,
            mode: Mode::Scalar,
            model_bytes: 1 << 20,
            lookups: 32,
            steps: 50,
            warmup: 5,
            sync: SyncMode::Sync,
            backup: 0,
            seed: 0,
            cluster: None,
        }
    }
}

impl BenchConfig {
    fn sync_config(&self) -> Result<SyncConfig> {
        let total = self.workers + self.backup;
        let c = match self.sync {
            SyncMode::Async if self.backup > 0 => {
                return Err(Error::InvalidArgument("backup workers need --sync sync".into()))
            }
            SyncMode::Async => SyncConfig::asynchronous(self.workers),
            SyncMode::Sync if self.backup > 0 => SyncConfig::backup(total, self.workers),
            SyncMode::Sync => SyncConfig::sync(self.workers),
            SyncMode::SyncBackup => SyncConfig::backup(total, self.workers),
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        if self.ps == 0 || self.workers == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("--ps, --workers and --steps must be positive".into()));
        }
        if self.mode == Mode::Sparse && self.lookups == 0 {
            return Err(Error::InvalidArgument("sparse mode needs --lookups >= 1".into()));
        }
        let min = match self.mode {
            Mode::Scalar => 0,
            Mode::Dense => 4 * self.ps as u64,
            Mode::Sparse => (4 * ROW_DIM * self.ps) as u64,
        };
        if self.model_bytes < min {
            return Err(Error::InvalidArgument(format!("--model-bytes must be at least {min} in this mode")));
        }
        Ok(())
    }

    /// Rows of the embedding table in sparse mode.
    pub fn vocab(&self) -> usize {
        (self.model_bytes / (4 * ROW_DIM as u64)) as usize
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub row: CsvRow,
    pub step_times: Vec<Duration>,
    pub applied: Vec<i64>,
}

fn ps_device(i: usize) -> String {
    format!("/job:ps/task:{i}")
}

fn worker_device(w: usize) -> String {
    format!("/job:worker/task:{w}")
}

fn params(cfg: &BenchConfig) -> Vec<ParamSpec> {
    let seed = cfg.seed as i64;
    (0..cfg.ps)
        .map(|i| {
            let shape = match cfg.mode {
                Mode::Scalar => Shape::scalar(),
                Mode::Dense => {
                    let total = (cfg.model_bytes / 4) as usize;
                    Shape::new(vec![shard_rows(total, cfg.ps, i)])
                }
                Mode::Sparse => Shape::new(vec![shard_rows(cfg.vocab(), cfg.ps, i), ROW_DIM]),
            };
            ParamSpec::uniform(format!("shard_{i}"), DType::F32, shape, seed + i as i64, -0.1, 0.1)
        })
        .collect()
}

fn model(cfg: &BenchConfig, b: &mut GraphBuilder, w: usize, p: &[Endpoint]) -> Result<Endpoint> {
    match cfg.mode {
        Mode::Scalar | Mode::Dense => {
            let sums: Vec<Endpoint> = p.iter().map(|x| b.reduce_sum(x, None)).collect();
            Ok(b.addn(&sums))
        }
        Mode::Sparse => {
            let k = cfg.ps;
            let ids = b.placeholder(&format!("ids_{w}"), DType::I64, Shape::new(vec![cfg.lookups]));
            let kc = b.constant(Tensor::scalar(k as i64));
            let shard = b.binary("Mod", &ids, &kc);
            let local = b.binary("FloorDiv", &ids, &kc);
            let pos = b.unary("RangeLike", &ids);
            let locals = b.dynamic_partition(&local, &shard, k);
            let positions = b.dynamic_partition(&pos, &shard, k);
            let rows: Vec<Endpoint> = (0..k)
                .map(|i| b.with_device(&ps_device(i), |b| b.gather(&p[i], &locals[i])))
                .collect();
            let out = b.dynamic_stitch(&positions, &rows);
            Ok(b.reduce_sum(&out, None))
        }
    }
}

fn cluster_config(cfg: &BenchConfig, workers: usize) -> Result<ClusterConfig> {
    match &cfg.cluster {
        Some(c) => {
            let have = |job: &str| c.jobs.get(job).map_or(0, Vec::len);
            if have("ps") < cfg.ps || have("worker") < workers {
                return Err(Error::InvalidArgument(format!(
                    "cluster needs {} ps and {workers} worker tasks",
                    cfg.ps
                )));
            }
            Ok(c.clone())
        }
        None => {
            let mut jobs = BTreeMap::new();
            jobs.insert("ps".to_string(), vec![INPROC.to_string(); cfg.ps]);
            jobs.insert("worker".to_string(), vec![INPROC.to_string(); workers]);
            Ok(ClusterConfig { jobs })
        }
    }
}

pub fn run(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.check()?;
    let sc = cfg.sync_config()?;
    let n = sc.workers;
    let spec = ReplicaSpec {
        config: sc,
        optimizer: OptimizerSpec::sgd(0.01),
        params: params(cfg),
        ps_devices: (0..cfg.ps).map(ps_device).collect(),
        worker_devices: (0..n).map(worker_device).collect(),
        worker_delay_ms: vec![],
    };
    let r = build_replicated(&spec, &|b, w, p| model(cfg, b, w, p))?;
    let opts = ClusterOptions {
        heartbeat_interval: None,
        ..Default::default()
    };
    let session = Session::new(Cluster::connect(cluster_config(cfg, n)?, opts)?, r.graph.clone())?;

    let (vocab, lookups, seed) = (cfg.vocab() as i64, cfg.lookups, cfg.seed);
    let sparse = cfg.mode == Mode::Sparse;
    let feeds = move |w: usize, k: usize| -> Vec<(Endpoint, Tensor)> {
        if !sparse {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((w as u64) << 32) ^ k as u64);
        let ids: Vec<i64> = (0..lookups).map(|_| rng.gen_range(0..vocab)).collect();
        vec![(Endpoint::new(format!("ids_{w}"), 0), Tensor::vector(ids))]
    };
    let stats = train(&session, &r, cfg.warmup + cfg.steps, &feeds)?;
    let times: Vec<Duration> = if sc.mode == SyncMode::Async {
        stats
            .workers
            .iter()
            .flat_map(|recs| recs.iter().skip(cfg.warmup).map(|r| r.elapsed))
            .collect()
    } else {
        stats.step_times.iter().skip(cfg.warmup).copied().collect()
    };
    // one image per worker update, or one word per lookup
    let per_update = if sparse { cfg.lookups as f64 } else { 1.0 };
    let units = per_update * sc.required as f64;
    let row = CsvRow::from_times(cfg.steps as u64, &times, units);
    Ok(BenchResult {
        row,
        step_times: times,
        applied: stats.applied.iter().skip(cfg.warmup).copied().collect(),
    })
}

/// Normalized speedup of a backup-worker run against plain sync on the same
/// cluster, reported both raw and as its complement.
pub fn speedup_lines(cfg: &BenchConfig, with_backup: &BenchResult) -> Result<Vec<String>> {
    if cfg.backup == 0 || cfg.sync == SyncMode::Async {
        return Ok(Vec::new());
    }
    let plain = run(&BenchConfig {
        backup: 0,
        sync: SyncMode::Sync,
        ..cfg.clone()
    })?;
    let v = normalized_speedup(with_backup.row.median_ms, plain.row.median_ms, cfg.backup, cfg.workers);
    Ok(vec![
        format!("# plain_sync_median_ms={:.3}", plain.row.median_ms),
        format!("# normalized_speedup={v:.4}"),
        format!("# one_minus_normalized_speedup={:.4}", 1.0 - v),
    ])
}
