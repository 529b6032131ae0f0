//! `gflow` command line: training runs, allreduce benchmarks and traffic
//! prediction. TCP jobs run one child process per rank; the children are
//! this same binary invoked with the hidden `worker` subcommand.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gflow::collectives::Algorithm;
use gflow::fusion::Theta;
use gflow::harness::{
    collect, port_base_from_env, predict_traffic, read_json, run_inproc_bench, run_inproc_training,
    run_tcp_bench_rank, run_tcp_training_rank, summarize, summarize_bench, write_json,
    write_run_outputs, BenchConfig, BenchRankReport, RankOutcome, RankReport, RunConfig,
    TrafficModel, TransportKind,
};
use gflow::pool::DEFAULT_CHUNK_SIZE;
use gflow::scalar::ElementType;
use gflow::trainer::{CscConfig, Mlp, Task};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_SPARSITY: f64 = 0.85;

#[derive(Debug, Parser)]
#[command(name = "gflow", version, about = "Data-parallel SGD communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the synthetic MLP on N ranks and write metrics.
    Run(RunArgs),
    /// Time one allreduce and report bytes sent per rank.
    BenchAllreduce(BenchArgs),
    /// Print the analytic per-iteration traffic for a configuration.
    Predict(PredictArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Args)]
struct CommArgs {
    #[arg(long)]
    ranks: Option<usize>,
    /// inproc or tcp
    #[arg(long)]
    transport: Option<TransportKind>,
    /// ring, hier or oracle
    #[arg(long)]
    algo: Option<Algorithm>,
    /// Ranks per group for hierarchical allreduce.
    #[arg(long)]
    groups: Option<usize>,
    /// fp32 or fp16
    #[arg(long)]
    precision: Option<ElementType>,
    /// Overrides GFLOW_PORT_BASE for tcp jobs.
    #[arg(long, hide = true)]
    port_base: Option<u16>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    comm: CommArgs,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fusion threshold in bytes, or "inf".
    #[arg(long)]
    theta: Option<Theta>,
    /// Reduce windows synchronously instead of on the progress thread.
    #[arg(long)]
    no_overlap: bool,
    /// Enable coarse-grained sparse communication.
    #[arg(long)]
    csc: bool,
    #[arg(long, requires = "csc")]
    sparsity: Option<f64>,
    #[arg(long, requires = "csc")]
    warmup: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Layer widths, input first, e.g. 64,512,64,1.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// linear or logistic
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    examples: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "gflow-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    comm: CommArgs,
    /// Buffer size in bytes.
    #[arg(long, default_value_t = 1 << 20)]
    bytes: u64,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Also write the summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long, default_value = "ring")]
    algo: Algorithm,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value = "fp32")]
    precision: ElementType,
    /// Pool size in elements, e.g. 61e6. Defaults to the model size.
    #[arg(long)]
    elements: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    csc: bool,
    #[arg(long, requires = "csc")]
    sparsity: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,
}

#[derive(Debug, Args)]
struct WorkerArgs {
    #[arg(long)]
    job: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    result: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
enum Job {
    Run(RunConfig),
    Bench(BenchConfig),
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkerJob {
    job: Job,
    port_base: u16,
}

#[derive(Debug, Serialize, Deserialize)]
enum WorkerResult<T> {
    Ok(T),
    Failed(String),
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Ranks(Vec<(usize, String)>),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<gflow::Error> for Failure {
    fn from(e: gflow::Error) -> Self {
        match e {
            gflow::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Other(other.into()),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 when a rank fails.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::BenchAllreduce(args) => bench(args),
        Command::Predict(args) => predict(args),
        Command::Worker(args) => worker(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Ranks(failures)) => {
            for (rank, msg) in failures {
                eprintln!("rank {rank} failed: {msg}");
            }
            EXIT_FAILURE
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn run_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<RunConfig>(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let c = &args.comm;
    let t = &mut cfg.train;
    if let Some(v) = c.ranks {
        cfg.ranks = v;
    }
    if let Some(v) = c.transport {
        cfg.transport = v;
    }
    if let Some(v) = c.algo {
        t.algorithm = v;
    }
    if let Some(v) = c.groups {
        t.group_size = v;
    }
    if let Some(v) = c.precision {
        t.precision = v;
    }
    if let Some(v) = args.theta {
        t.theta = v;
    }
    if args.no_overlap {
        t.overlap = false;
    }
    if args.csc {
        let prev = t.csc;
        t.csc = Some(CscConfig {
            final_sparsity: args
                .sparsity
                .or(prev.map(|p| p.final_sparsity))
                .unwrap_or(DEFAULT_SPARSITY),
            warmup_iters: args.warmup.or(prev.map(|p| p.warmup_iters)).unwrap_or(0),
        });
    }
    if let Some(v) = args.chunk_size {
        t.chunk_size = v;
    }
    if let Some(v) = args.batch {
        t.batch = v;
    }
    if let Some(v) = args.iters {
        t.iters = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.momentum {
        t.momentum = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = &args.layers {
        t.layers = v.clone();
    }
    if let Some(v) = args.task {
        t.task = v;
    }
    if let Some(v) = args.examples {
        t.examples = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn port_base(comm: &CommArgs) -> Result<u16, Failure> {
    match comm.port_base {
        Some(p) => Ok(p),
        None => Ok(port_base_from_env()?),
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = run_config(&args)?;
    let outcomes = match cfg.transport {
        TransportKind::Inproc => run_inproc_training(&cfg),
        TransportKind::Tcp => {
            let job = WorkerJob {
                job: Job::Run(cfg.clone()),
                port_base: port_base(&args.comm)?,
            };
            spawn_workers::<RankReport>(&job, cfg.ranks, &args.out)?
        }
    };
    let reports = collect(outcomes).map_err(Failure::Ranks)?;
    let summary = summarize(&cfg, &reports)?;
    write_run_outputs(&args.out, &reports, &summary)
        .with_context(|| format!("writing results to {}", args.out.display()))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).context("serializing summary")?
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let c = &args.comm;
    let cfg = BenchConfig {
        ranks: c.ranks.unwrap_or(4),
        transport: c.transport.unwrap_or_default(),
        algorithm: c.algo.unwrap_or(Algorithm::Ring),
        group_size: c.groups.unwrap_or(1),
        precision: c.precision.unwrap_or(ElementType::Fp32),
        bytes: args.bytes,
        reps: args.reps,
    };
    cfg.validate()?;
    let outcomes = match cfg.transport {
        TransportKind::Inproc => run_inproc_bench(&cfg),
        TransportKind::Tcp => {
            let dir = scratch_dir("bench")?;
            let job = WorkerJob {
                job: Job::Bench(cfg),
                port_base: port_base(c)?,
            };
            let out = spawn_workers::<BenchRankReport>(&job, cfg.ranks, &dir);
            let _ = std::fs::remove_dir_all(&dir);
            out?
        }
    };
    let reports = collect(outcomes).map_err(Failure::Ranks)?;
    let summary = summarize_bench(&cfg, &reports);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).context("creating output directory")?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).context("serializing summary")?
    );
    if !summary.correct {
        return Err(Failure::Other(anyhow::anyhow!("allreduce produced a wrong sum")));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PredictOutput {
    model: TrafficModel,
    #[serde(flatten)]
    prediction: gflow::harness::TrafficPrediction,
    grad_megabytes_per_rank: f64,
}

fn predict(args: PredictArgs) -> Result<(), Failure> {
    let elements = match (args.elements, &args.layers) {
        (Some(e), _) if e >= 1.0 && e.is_finite() => e.round() as u64,
        (Some(e), _) => return Err(Failure::Usage(format!("invalid element count {e}"))),
        (None, Some(layers)) => Mlp::new(layers, Task::Linear)?.num_params() as u64,
        (None, None) => Mlp::new(&gflow::trainer::TrainConfig::default().layers, Task::Linear)?
            .num_params() as u64,
    };
    if args.ranks == 0 || args.groups == 0 || args.ranks % args.groups != 0 {
        return Err(Failure::Usage(format!(
            "group size {} does not divide {} ranks",
            args.groups, args.ranks
        )));
    }
    if args.chunk_size == 0 {
        return Err(Failure::Usage("chunk size must be positive".into()));
    }
    let sparsity = args.csc.then(|| args.sparsity.unwrap_or(DEFAULT_SPARSITY));
    if let Some(s) = sparsity {
        if !(0.0..1.0).contains(&s) {
            return Err(Failure::Usage(format!("sparsity {s} outside [0, 1)")));
        }
    }
    let model = TrafficModel {
        ranks: args.ranks,
        algorithm: args.algo,
        group_size: args.groups,
        elements,
        precision: args.precision,
        chunk_size: args.chunk_size as u64,
        sparsity,
    };
    let prediction = predict_traffic(&model);
    let out = PredictOutput {
        model,
        prediction,
        grad_megabytes_per_rank: prediction.grad_bytes_per_rank / 1e6,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).context("serializing prediction")?
    );
    Ok(())
}

fn worker(args: WorkerArgs) -> Result<(), Failure> {
    let job: WorkerJob = read_json(&args.job)?;
    let failed = match job.job {
        Job::Run(cfg) => finish_worker(&args.result, run_tcp_training_rank(&cfg, args.rank, job.port_base))?,
        Job::Bench(cfg) => finish_worker(&args.result, run_tcp_bench_rank(&cfg, args.rank, job.port_base))?,
    };
    match failed {
        None => Ok(()),
        Some(msg) => Err(Failure::Ranks(vec![(args.rank, msg)])),
    }
}

fn finish_worker<T: Serialize>(path: &Path, outcome: RankOutcome<T>) -> Result<Option<String>, Failure> {
    let (result, failed) = match outcome {
        Ok(r) => (WorkerResult::Ok(r), None),
        Err((_, msg)) => (WorkerResult::Failed(msg.clone()), Some(msg)),
    };
    write_json(path, &result)?;
    Ok(failed)
}

fn scratch_dir(kind: &str) -> anyhow::Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("gflow-{kind}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Starts one worker process per rank, waits for all of them and gathers
/// their results from `dir/workers`.
fn spawn_workers<T>(job: &WorkerJob, ranks: usize, dir: &Path) -> Result<Vec<RankOutcome<T>>, Failure>
where
    T: for<'de> Deserialize<'de>,
{
    let work = dir.join("workers");
    std::fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
    let job_path = work.join("job.json");
    write_json(&job_path, job)?;
    let exe = std::env::current_exe().context("locating the gflow executable")?;
    let mut children: Vec<(usize, PathBuf, Child)> = Vec::with_capacity(ranks);
    for rank in 0..ranks {
        let result = work.join(format!("rank-{rank}.json"));
        let _ = std::fs::remove_file(&result);
        let child = Process::new(&exe)
            .arg("worker")
            .arg("--job")
            .arg(&job_path)
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--result")
            .arg(&result)
            .spawn()
            .with_context(|| format!("spawning rank {rank}"))?;
        children.push((rank, result, child));
    }
    let mut outcomes = Vec::with_capacity(ranks);
    for (rank, result, mut child) in children {
        let status = child.wait().with_context(|| format!("waiting for rank {rank}"))?;
        let outcome = match read_json::<WorkerResult<T>>(&result) {
            Ok(WorkerResult::Ok(r)) if status.success() => Ok(r),
            Ok(WorkerResult::Failed(msg)) => Err((rank, msg)),
            _ => Err((rank, format!("worker exited with {status}"))),
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
