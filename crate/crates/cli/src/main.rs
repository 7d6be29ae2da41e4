use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use miniflow::runtime::ClusterConfig;
use miniflow::training::SyncMode;
use miniflow::{Error, Result};
use miniflow_cli::bench::{self, BenchConfig, Mode};
use miniflow_cli::demo::{self, LmConfig, MlpConfig};
use miniflow_cli::{exit_code, run, worker, CSV_HEADER, EXIT_USER};

#[derive(Parser)]
#[command(name = "miniflow", version, about = "Run dataflow graphs, worker tasks, benchmarks and demos")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a graph and print the fetched tensors as JSON.
    Run(RunArgs),
    /// Serve one task of a TCP cluster until terminated.
    Worker(WorkerArgs),
    /// Null-step benchmark: fetch parameters, do nothing, send updates.
    BenchNullstep(BenchArgs),
    /// Train a small model.
    #[command(subcommand)]
    Demo(DemoCmd),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    graph: PathBuf,
    /// `name:idx=VALUE`, VALUE being JSON.
    #[arg(long)]
    feed: Vec<String>,
    /// `name:idx`
    #[arg(long, required = true)]
    fetch: Vec<String>,
    /// Node to run without fetching its output.
    #[arg(long)]
    target: Vec<String>,
    #[arg(long, conflicts_with = "inproc")]
    cluster: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    inproc: usize,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    cluster: PathBuf,
    /// `job:index`
    #[arg(long, env = "MINIFLOW_TASK")]
    task: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    ps: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// scalar, dense or sparse
    #[arg(long, default_value = "scalar")]
    mode: String,
    #[arg(long, default_value_t = 1 << 20)]
    model_bytes: u64,
    #[arg(long, default_value_t = 32)]
    lookups: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// async, sync or backup
    #[arg(long, default_value = "sync")]
    sync: String,
    /// Extra workers whose updates the chief may drop.
    #[arg(long, default_value_t = 0)]
    backup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TCP cluster with jobs `ps` and `worker`; in-process when absent.
    #[arg(long)]
    cluster: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Two-layer classifier on separable data.
    Mlp {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        examples: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
    },
    /// Toy language model, full against sampled softmax.
    Lm {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 4000)]
        vocab: usize,
        #[arg(long, default_value_t = 64)]
        sampled: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        ps: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
    },
}

fn read_cluster(path: &PathBuf) -> Result<ClusterConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    ClusterConfig::from_json(&text)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => {
            let req = run::RunRequest {
                graph: &a.graph,
                feeds: &a.feed,
                fetches: &a.fetch,
                targets: &a.target,
                cluster: a.cluster.as_deref(),
                inproc: a.inproc,
            };
            let out = run::run(&req)?;
            println!("{}", serde_json::to_string_pretty(&out).expect("JSON values serialize"));
        }
        Command::Worker(a) => {
            let config = read_cluster(&a.cluster)?;
            let server = worker::start(&config, &a.task)?;
            eprintln!("serving {} on {}", a.task, server.local_addr());
            // the default SIGTERM action ends the process
            loop {
                std::thread::park();
            }
        }
        Command::BenchNullstep(a) => {
            let cfg = BenchConfig {
                ps: a.ps,
                workers: a.workers,
                mode: a.mode.parse::<Mode>()?,
                model_bytes: a.model_bytes,
                lookups: a.lookups,
                steps: a.steps,
                warmup: a.warmup,
                sync: a.sync.parse::<SyncMode>()?,
                backup: a.backup,
                seed: a.seed,
                cluster: a.cluster.as_ref().map(read_cluster).transpose()?,
            };
            let r = bench::run(&cfg)?;
            println!("{CSV_HEADER}");
            println!("{}", r.row.to_csv());
            for line in bench::speedup_lines(&cfg, &r)? {
                println!("{line}");
            }
        }
        Command::Demo(DemoCmd::Mlp {
            seed,
            steps,
            examples,
            hidden,
            learning_rate,
        }) => {
            let r = demo::mlp(&MlpConfig {
                examples,
                hidden,
                steps,
                learning_rate,
                seed,
                ..Default::default()
            })?;
            println!("{CSV_HEADER}");
            for row in &r.rows {
                println!("{}", row.to_csv());
            }
            for line in r.summary() {
                println!("{line}");
            }
        }
        Command::Demo(DemoCmd::Lm {
            seed,
            steps,
            vocab,
            sampled,
            dim,
            batch,
            ps,
            learning_rate,
        }) => {
            let r = demo::lm(&LmConfig {
                vocab,
                sampled,
                dim,
                batch,
                ps,
                steps,
                learning_rate,
                seed,
            })?;
            println!("{CSV_HEADER}");
            println!("# full softmax");
            println!("{}", r.full.to_csv());
            println!("# sampled softmax");
            println!("{}", r.sampled.to_csv());
            for line in r.summary() {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USER as u8 } else { 0 });
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
