//! Run configuration, analytic traffic prediction, worker launch and
//! reporting.

use std::fs;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collectives::{digest_f32, Algorithm, Communicator};
use crate::error::{Error, Result};
use crate::fusion::FusionLog;
use crate::launch::run_inproc;
use crate::scalar::{ElementType, ScalarBuffer};
use crate::sparse::{selected_count, sparsity_at};
use crate::trainer::{train, IterationMetrics, Mlp, SparseLog, TrainConfig, TrainReport};
use crate::transport::{tcp_endpoint, Endpoint, TransportConfig};

pub const PORT_BASE_ENV: &str = "GFLOW_PORT_BASE";
pub const DEFAULT_PORT_BASE: u16 = 29500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(Error::config(format!("unknown transport '{s}'"))),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Inproc => "inproc",
            TransportKind::Tcp => "tcp",
        })
    }
}

/// Port base from `GFLOW_PORT_BASE`, or the default.
pub fn port_base_from_env() -> Result<u16> {
    match std::env::var(PORT_BASE_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{PORT_BASE_ENV}='{v}' is not a port"))),
        Err(_) => Ok(DEFAULT_PORT_BASE),
    }
}

/// Loopback addresses `base + rank`.
pub fn local_addrs(ranks: usize, base: u16) -> Result<Vec<String>> {
    (0..ranks)
        .map(|r| {
            u16::try_from(base as usize + r)
                .map(|p| format!("{}:{p}", Ipv4Addr::LOCALHOST))
                .map_err(|_| Error::config(format!("port base {base} too high for {ranks} ranks")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub ranks: usize,
    pub transport: TransportKind,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ranks: 4,
            transport: TransportKind::Inproc,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks == 0 {
            return Err(Error::config("at least one rank is required"));
        }
        self.train.validate(self.ranks)
    }

    pub fn traffic_model(&self) -> Result<TrafficModel> {
        let model = Mlp::new(&self.train.layers, self.train.task)?;
        Ok(TrafficModel {
            ranks: self.ranks,
            algorithm: self.train.algorithm,
            group_size: self.train.group_size,
            elements: model.num_params() as u64,
            precision: self.train.precision,
            chunk_size: self.train.chunk_size as u64,
            sparsity: self.train.csc.map(|c| c.final_sparsity),
        })
    }
}

/// Inputs to the analytic traffic law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficModel {
    pub ranks: usize,
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub elements: u64,
    pub precision: ElementType,
    pub chunk_size: u64,
    /// `None` for dense training.
    pub sparsity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficPrediction {
    pub pool_bytes: u64,
    pub num_chunks: u64,
    pub selected_chunks: u64,
    pub selected_bytes: u64,
    pub grad_bytes_per_rank: f64,
    pub norm_bytes_per_rank: f64,
    pub total_bytes_per_rank: f64,
}

/// Mean bytes sent per rank by one allreduce of `k` bytes.
///
/// Ring: `2(N-1)K/N`. Oracle: `N-1` gathers plus `N-1` broadcasts of `K`,
/// the same mean. Hierarchical with groups of `M`: per group a
/// reduce-scatter and gather, `(M-1)K + (M-1)K/M`, and a chain broadcast,
/// `(M-1)K`; plus a ring over the `N/M` masters.
pub fn allreduce_bytes_per_rank(algo: Algorithm, n: usize, group_size: usize, k: f64) -> f64 {
    let nf = n as f64;
    match algo {
        Algorithm::Ring | Algorithm::Oracle => 2.0 * (nf - 1.0) * k / nf,
        Algorithm::Hierarchical => {
            let m = group_size.max(1) as f64;
            let g = nf / m;
            let intra = g * ((m - 1.0) * k * (2.0 + 1.0 / m));
            let inter = 2.0 * (g - 1.0) * k;
            (intra + inter) / nf
        }
    }
}

/// Per-iteration bytes sent per rank. Dense runs reduce the whole pool;
/// sparse runs reduce `k` chunks plus one fp32 norm per chunk.
pub fn predict_traffic(model: &TrafficModel) -> TrafficPrediction {
    let elem = model.precision.size() as u64;
    let chunks = model.elements.div_ceil(model.chunk_size.max(1));
    let (selected_chunks, selected_elements) = match model.sparsity {
        None => (chunks, model.elements),
        Some(s) => {
            let k = selected_count(s, chunks as usize) as u64;
            (k, (k * model.chunk_size).min(model.elements))
        }
    };
    let grad = allreduce_bytes_per_rank(
        model.algorithm,
        model.ranks,
        model.group_size,
        (selected_elements * elem) as f64,
    );
    let norm = match model.sparsity {
        None => 0.0,
        Some(_) => allreduce_bytes_per_rank(Algorithm::Ring, model.ranks, 1, (chunks * 4) as f64),
    };
    TrafficPrediction {
        pool_bytes: model.elements * elem,
        num_chunks: chunks,
        selected_chunks,
        selected_bytes: selected_elements * elem,
        grad_bytes_per_rank: grad,
        norm_bytes_per_rank: norm,
        total_bytes_per_rank: grad + norm,
    }
}

/// Predicted gradient bytes per rank for each iteration of a run, following
/// the warm-up schedule and the dense first iteration.
pub fn predict_schedule(config: &RunConfig) -> Result<Vec<f64>> {
    let base = config.traffic_model()?;
    Ok((0..config.train.iters)
        .map(|t| {
            let sparsity = match config.train.csc {
                Some(c) if t > 0 => Some(sparsity_at(t, c.warmup_iters, c.final_sparsity)),
                Some(_) => Some(0.0),
                None => None,
            };
            predict_traffic(&TrafficModel { sparsity, ..base }).grad_bytes_per_rank
        })
        .collect())
}

/// What one rank reports back after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub metrics: Vec<IterationMetrics>,
    pub fusion_log: Vec<FusionLog>,
    pub sparse_log: Vec<SparseLog>,
    pub weights_digest: u64,
    pub pool_elements: usize,
    pub num_chunks: usize,
    pub payload_bytes_sent: u64,
    pub grad_bytes_sent: u64,
    pub norm_bytes_sent: u64,
}

impl RankReport {
    pub fn from_train(rank: usize, r: TrainReport) -> Self {
        RankReport {
            rank,
            weights_digest: digest_f32(&r.weights),
            payload_bytes_sent: r.stats.total().payload_bytes_sent,
            grad_bytes_sent: r.stats.with_prefix("grad/").payload_bytes_sent,
            norm_bytes_sent: r.stats.with_prefix("norm/").payload_bytes_sent,
            metrics: r.metrics,
            fusion_log: r.fusion_log,
            sparse_log: r.sparse_log,
            pool_elements: r.pool_elements,
            num_chunks: r.num_chunks,
        }
    }
}

/// A rank's outcome; failures keep the rank for diagnostics.
pub type RankOutcome<T> = std::result::Result<T, (usize, String)>;

fn train_on(config: &RunConfig, ep: Arc<Endpoint>) -> RankOutcome<RankReport> {
    let rank = ep.rank();
    let comm = Communicator::new(ep);
    train(&config.train, &comm)
        .map(|r| RankReport::from_train(rank, r))
        .map_err(|e| (rank, e.to_string()))
}

/// Trains with one thread per rank over the in-process transport.
pub fn run_inproc_training(config: &RunConfig) -> Vec<RankOutcome<RankReport>> {
    run_inproc(config.ranks, TransportConfig::default(), |ep| train_on(config, ep))
}

/// Trains as `rank` of a TCP job on loopback ports `base..base+N`.
pub fn run_tcp_training_rank(config: &RunConfig, rank: usize, port_base: u16) -> RankOutcome<RankReport> {
    let addrs = local_addrs(config.ranks, port_base).map_err(|e| (rank, e.to_string()))?;
    let ep = tcp_endpoint(rank, &addrs, TransportConfig::default()).map_err(|e| (rank, e.to_string()))?;
    train_on(config, Arc::new(ep))
}

/// Splits outcomes into reports, or returns every failure.
pub fn collect<T>(outcomes: Vec<RankOutcome<T>>) -> std::result::Result<Vec<T>, Vec<(usize, String)>> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => ok.push(r),
            Err(f) => failed.push(f),
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ranks: usize,
    pub transport: TransportKind,
    pub iterations: usize,
    pub final_loss: Option<f32>,
    pub pool_elements: usize,
    pub num_chunks: usize,
    /// All payload bytes sent by all ranks.
    pub total_bytes: u64,
    /// Mean gradient payload per rank per iteration.
    pub grad_bytes_per_iteration: f64,
    pub predicted_grad_bytes_per_iteration: f64,
    pub traffic_delta_bytes: f64,
    pub traffic_delta_ratio: f64,
    pub norm_bytes_per_iteration: f64,
    pub replicas_consistent: bool,
}

pub fn summarize(config: &RunConfig, reports: &[RankReport]) -> Result<RunSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::config("no rank reports to summarize"))?;
    let iters = config.train.iters.max(1) as f64;
    let n = reports.len() as f64;
    let grad = reports.iter().map(|r| r.grad_bytes_sent as f64).sum::<f64>() / n / iters;
    let norm = reports.iter().map(|r| r.norm_bytes_sent as f64).sum::<f64>() / n / iters;
    let predicted = predict_schedule(config)?.iter().sum::<f64>() / iters;
    Ok(RunSummary {
        ranks: config.ranks,
        transport: config.transport,
        iterations: config.train.iters,
        final_loss: first.metrics.last().map(|m| m.loss),
        pool_elements: first.pool_elements,
        num_chunks: first.num_chunks,
        total_bytes: reports.iter().map(|r| r.payload_bytes_sent).sum(),
        grad_bytes_per_iteration: grad,
        predicted_grad_bytes_per_iteration: predicted,
        traffic_delta_bytes: grad - predicted,
        traffic_delta_ratio: if predicted > 0.0 { (grad - predicted) / predicted } else { 0.0 },
        norm_bytes_per_iteration: norm,
        replicas_consistent: reports.iter().all(|r| r.weights_digest == first.weights_digest),
    })
}

/// Writes `metrics.csv`, `fusion.csv` or `sparse.csv` (rank 0's view) and
/// `summary.json` into `dir`.
pub fn write_run_outputs(dir: &Path, reports: &[RankReport], summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let r0 = reports
        .iter()
        .find(|r| r.rank == 0)
        .ok_or_else(|| Error::config("rank 0 report missing"))?;
    write_csv(
        &dir.join("metrics.csv"),
        IterationMetrics::CSV_HEADER,
        r0.metrics.iter().map(|m| m.csv_row()),
    )?;
    if !r0.fusion_log.is_empty() {
        write_csv(
            &dir.join("fusion.csv"),
            FusionLog::CSV_HEADER,
            r0.fusion_log.iter().map(|l| l.csv_row()),
        )?;
    }
    if !r0.sparse_log.is_empty() {
        write_csv(
            &dir.join("sparse.csv"),
            SparseLog::CSV_HEADER,
            r0.sparse_log.iter().map(|l| l.csv_row()),
        )?;
    }
    write_json(&dir.join("summary.json"), summary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ranks: usize,
    pub transport: TransportKind,
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub precision: ElementType,
    pub bytes: u64,
    pub reps: usize,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks == 0 || self.reps == 0 {
            return Err(Error::config("ranks and repetitions must be positive"));
        }
        if self.group_size == 0 || self.ranks % self.group_size != 0 {
            return Err(Error::config(format!(
                "group size {} does not divide {} ranks",
                self.group_size, self.ranks
            )));
        }
        if self.bytes % self.precision.size() as u64 != 0 {
            return Err(Error::config(format!(
                "{} bytes is not a whole number of {} elements",
                self.bytes, self.precision
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRankReport {
    pub rank: usize,
    /// Payload bytes sent per repetition.
    pub payload_bytes_sent: u64,
    pub mean_ms: f64,
    pub correct: bool,
}

/// Repeatedly allreduces `bytes` of `rank + 1` values and checks the sum.
pub fn bench_rank(config: &BenchConfig, comm: &Communicator) -> Result<BenchRankReport> {
    let comm = comm.clone().with_group_size(config.group_size)?;
    let elements = (config.bytes / config.precision.size() as u64) as usize;
    let n = comm.world_size() as f32;
    let expected = n * (n + 1.0) / 2.0;
    let before = comm.endpoint().stats().snapshot();
    let start = Instant::now();
    let mut correct = true;
    for _ in 0..config.reps {
        let fill = vec![comm.rank() as f32 + 1.0; elements];
        let mut buf = ScalarBuffer::from_f32(&fill, config.precision);
        comm.allreduce_buffer(config.algorithm, &mut buf)?;
        correct &= buf.to_f32_vec().iter().all(|&v| v == expected);
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let sent = comm.endpoint().stats().snapshot().since(&before).total().payload_bytes_sent;
    Ok(BenchRankReport {
        rank: comm.rank(),
        payload_bytes_sent: sent / config.reps as u64,
        mean_ms: elapsed / config.reps as f64,
        correct,
    })
}

fn bench_on(config: &BenchConfig, ep: Arc<Endpoint>) -> RankOutcome<BenchRankReport> {
    let rank = ep.rank();
    bench_rank(config, &Communicator::new(ep)).map_err(|e| (rank, e.to_string()))
}

pub fn run_inproc_bench(config: &BenchConfig) -> Vec<RankOutcome<BenchRankReport>> {
    run_inproc(config.ranks, TransportConfig::default(), |ep| bench_on(config, ep))
}

pub fn run_tcp_bench_rank(config: &BenchConfig, rank: usize, port_base: u16) -> RankOutcome<BenchRankReport> {
    let addrs = local_addrs(config.ranks, port_base).map_err(|e| (rank, e.to_string()))?;
    let ep = tcp_endpoint(rank, &addrs, TransportConfig::default()).map_err(|e| (rank, e.to_string()))?;
    bench_on(config, Arc::new(ep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub per_rank_sent: Vec<u64>,
    pub predicted_mean_sent: f64,
    pub mean_ms: f64,
    pub correct: bool,
}

pub fn summarize_bench(config: &BenchConfig, reports: &[BenchRankReport]) -> BenchSummary {
    let mut sorted = reports.to_vec();
    sorted.sort_by_key(|r| r.rank);
    BenchSummary {
        config: *config,
        per_rank_sent: sorted.iter().map(|r| r.payload_bytes_sent).collect(),
        predicted_mean_sent: allreduce_bytes_per_rank(
            config.algorithm,
            config.ranks,
            config.group_size,
            config.bytes as f64,
        ),
        mean_ms: sorted.iter().map(|r| r.mean_ms).fold(0.0, f64::max),
        correct: sorted.iter().all(|r| r.correct),
    }
}
