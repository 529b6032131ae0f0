//! Data-parallel training loop over a small MLP.
//!
//! Layer `l` (1-based) owns a weight tensor with id `2l - 1` and a bias with
//! id `2l`. The backward pass emits gradients from the top layer down, so
//! tensor ids arrive in descending order, matching the gradient pool.
//! Parameters are kept as one flat fp32 vector in pool layout.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::collectives::{digest_f32, Algorithm, Communicator};
use crate::error::{Error, Result};
use crate::fusion::{wait_all, FusionConfig, FusionEngine, FusionLog, ProgressContext, Theta};
use crate::pool::{GradientPool, PoolLayout};
use crate::scalar::{Element, ElementType};
use crate::sparse::{
    selected_count, sparsity_at, MomentumCorrection, SparseConfig, SparseExchange, SparseState,
};
use crate::transport::StatsSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Mean squared error against a noisy linear target.
    Linear,
    /// Binary cross-entropy on logits against labels drawn from a
    /// logistic model.
    Logistic,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "linear-regression" => Ok(Task::Linear),
            "logistic" | "two-class-logistic" => Ok(Task::Logistic),
            _ => Err(Error::config(format!("unknown task '{s}'"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Linear => "linear",
            Task::Logistic => "logistic",
        })
    }
}

/// Parameters of the generator a dataset was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub noise_std: f64,
}

impl GroundTruth {
    /// Expected accuracy of the true logistic model on fresh data. Inputs are
    /// standard normal, so the true logit is `N(bias, |w|^2)` and the answer
    /// is a one-dimensional integral of `sigmoid(|z|)`.
    pub fn bayes_accuracy(&self) -> f64 {
        self.expect_over_logit(|z| sigmoid64(z.abs()))
    }

    /// Expected loss of the true model: the noise variance for regression,
    /// the mean binary entropy of the label for classification.
    pub fn bayes_loss(&self, task: Task) -> f64 {
        match task {
            Task::Linear => self.noise_std * self.noise_std,
            Task::Logistic => self.expect_over_logit(|z| {
                let p = sigmoid64(z);
                let q = 1.0 - p;
                let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
                h(p) + h(q)
            }),
        }
    }

    fn expect_over_logit(&self, f: impl Fn(f64) -> f64) -> f64 {
        let sd = self.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if sd == 0.0 {
            return f(self.bias);
        }
        // Simpson's rule over +-12 standard deviations.
        let steps = 8000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let u = lo + i as f64 * h;
            let weight = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let density = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            acc += weight * density * f(self.bias + sd * u);
        }
        acc * h / 3.0
    }
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Synthetic dataset split across ranks by interleaving: example `i`
/// belongs to rank `i mod N`.
#[derive(Debug, Clone)]
pub struct ShardedDataset {
    pub task: Task,
    pub input_dim: usize,
    pub world_size: usize,
    pub seed: u64,
    inputs: Vec<f32>,
    targets: Vec<f32>,
    truth: GroundTruth,
}

/// Draws a reproducible dataset. Inputs are standard normal; targets come
/// from a random ground-truth linear or logistic model.
pub fn synth_data(
    seed: u64,
    n_examples: usize,
    input_dim: usize,
    task: Task,
    world_size: usize,
) -> Result<ShardedDataset> {
    if world_size == 0 || n_examples == 0 || n_examples % world_size != 0 {
        return Err(Error::config(format!(
            "{n_examples} examples cannot be split evenly over {world_size} ranks"
        )));
    }
    if input_dim == 0 {
        return Err(Error::config("input dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let scale = match task {
        Task::Linear => 1.0,
        Task::Logistic => 2.0,
    } / (input_dim as f64).sqrt();
    let truth = GroundTruth {
        weights: (0..input_dim).map(|_| scale * normal.sample(&mut rng)).collect(),
        bias: 0.5 * normal.sample(&mut rng),
        noise_std: match task {
            Task::Linear => 0.1,
            Task::Logistic => 0.0,
        },
    };
    let mut inputs = Vec::with_capacity(n_examples * input_dim);
    let mut targets = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let x: Vec<f64> = (0..input_dim).map(|_| normal.sample(&mut rng)).collect();
        let z = truth.bias + x.iter().zip(&truth.weights).map(|(a, b)| a * b).sum::<f64>();
        let y = match task {
            Task::Linear => z + truth.noise_std * normal.sample(&mut rng),
            Task::Logistic => {
                let label = Bernoulli::new(sigmoid64(z)).expect("probability").sample(&mut rng);
                if label {
                    1.0
                } else {
                    0.0
                }
            }
        };
        inputs.extend(x.iter().map(|&v| v as f32));
        targets.push(y as f32);
    }
    Ok(ShardedDataset {
        task,
        input_dim,
        world_size,
        seed,
        inputs,
        targets,
        truth,
    })
}

impl ShardedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn shard_len(&self) -> usize {
        self.len() / self.world_size
    }

    /// Global indices of a rank's shard.
    pub fn shard(&self, rank: usize) -> Vec<usize> {
        (0..self.shard_len()).map(|s| s * self.world_size + rank).collect()
    }

    pub fn example(&self, i: usize) -> (&[f32], f32) {
        let d = self.input_dim;
        (&self.inputs[i * d..(i + 1) * d], self.targets[i])
    }

    /// Global example indices of batch `t` at `rank`: `batch` consecutive
    /// shard positions, wrapping around the shard.
    pub fn batch_indices(&self, rank: usize, t: usize, batch: usize) -> Vec<usize> {
        let s = self.shard_len();
        (0..batch)
            .map(|j| ((t * batch + j) % s) * self.world_size + rank)
            .collect()
    }

    pub fn batch(&self, rank: usize, t: usize, batch: usize) -> Batch {
        self.gather(&self.batch_indices(rank, t, batch))
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(indices.len() * self.input_dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            let (xi, yi) = self.example(i);
            x.extend_from_slice(xi);
            y.push(yi);
        }
        Batch { x, y }
    }

    pub fn all(&self) -> Batch {
        Batch {
            x: self.inputs.clone(),
            y: self.targets.clone(),
        }
    }
}

/// Row-major inputs and one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

/// Fully connected network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    dims: Vec<usize>,
    task: Task,
}

impl Mlp {
    pub fn new(dims: &[usize], task: Task) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {dims:?}")));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::config("output dimension must be 1"));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            task,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Tensor sizes indexed by id - 1.
    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.dims
            .windows(2)
            .flat_map(|w| [w[0] * w[1], w[1]])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    pub fn layout(&self, chunk_size: usize) -> Result<PoolLayout> {
        PoolLayout::new(&self.tensor_sizes(), chunk_size)
    }

    /// Uniform in `[-r, r]` with `r = 1/sqrt(fan_in)`, biases included.
    pub fn init(&self, layout: &PoolLayout, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; layout.total_elements()];
        for l in 1..=self.num_layers() {
            let r = 1.0 / (self.dims[l - 1] as f32).sqrt();
            for id in [2 * l - 1, 2 * l] {
                let range = layout.descs()[id - 1].range();
                for p in &mut params[range] {
                    *p = rng.random_range(-r..=r);
                }
            }
        }
        params
    }

    fn outputs(&self, layout: &PoolLayout, params: &[f32], batch: &Batch) -> Vec<Vec<f32>> {
        let rows = batch.rows();
        let mut acts = vec![batch.x.clone()];
        for l in 1..=self.num_layers() {
            let (din, dout) = (self.dims[l - 1], self.dims[l]);
            let w = &params[layout.descs()[2 * l - 2].range()];
            let b = &params[layout.descs()[2 * l - 1].range()];
            let prev = &acts[l - 1];
            let mut z = vec![0.0f32; rows * dout];
            for r in 0..rows {
                let a = &prev[r * din..(r + 1) * din];
                for o in 0..dout {
                    let row = &w[o * din..(o + 1) * din];
                    let dot: f32 = row.iter().zip(a).map(|(p, q)| p * q).sum();
                    let v = dot + b[o];
                    z[r * dout + o] = if l < self.num_layers() { v.tanh() } else { v };
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Mean loss over a batch.
    pub fn loss(&self, layout: &PoolLayout, params: &[f32], batch: &Batch) -> f32 {
        let acts = self.outputs(layout, params, batch);
        self.loss_of(acts.last().unwrap(), &batch.y)
    }

    fn loss_of(&self, z: &[f32], y: &[f32]) -> f32 {
        let b = y.len() as f32;
        match self.task {
            Task::Linear => z.iter().zip(y).map(|(z, y)| (z - y) * (z - y)).sum::<f32>() / b,
            Task::Logistic => {
                z.iter()
                    .zip(y)
                    .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                    .sum::<f32>()
                    / b
            }
        }
    }

    /// Computes the batch loss and hands each gradient tensor to `emit` in
    /// descending id order. A non-finite loss aborts before any emission.
    pub fn forward_backward(
        &self,
        layout: &PoolLayout,
        params: &[f32],
        batch: &Batch,
        mut emit: impl FnMut(usize, &[f32]) -> Result<()>,
    ) -> Result<f32> {
        let rows = batch.rows();
        if rows == 0 || batch.x.len() != rows * self.dims[0] {
            return Err(Error::Training(format!(
                "batch of {} inputs does not match {} rows of dimension {}",
                batch.x.len(),
                rows,
                self.dims[0]
            )));
        }
        let acts = self.outputs(layout, params, batch);
        let out = acts.last().unwrap();
        let loss = self.loss_of(out, &batch.y);
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }
        let b = rows as f32;
        let mut delta: Vec<f32> = match self.task {
            Task::Linear => out.iter().zip(&batch.y).map(|(z, y)| 2.0 * (z - y) / b).collect(),
            Task::Logistic => out.iter().zip(&batch.y).map(|(z, y)| (sigmoid(*z) - y) / b).collect(),
        };
        for l in (1..=self.num_layers()).rev() {
            let (din, dout) = (self.dims[l - 1], self.dims[l]);
            let prev = &acts[l - 1];
            let mut gw = vec![0.0f32; dout * din];
            let mut gb = vec![0.0f32; dout];
            for r in 0..rows {
                let a = &prev[r * din..(r + 1) * din];
                for o in 0..dout {
                    let d = delta[r * dout + o];
                    gb[o] += d;
                    for (g, x) in gw[o * din..(o + 1) * din].iter_mut().zip(a) {
                        *g += d * x;
                    }
                }
            }
            emit(2 * l, &gb)?;
            emit(2 * l - 1, &gw)?;
            if l > 1 {
                let w = &params[layout.descs()[2 * l - 2].range()];
                let mut next = vec![0.0f32; rows * din];
                for r in 0..rows {
                    for o in 0..dout {
                        let d = delta[r * dout + o];
                        for (n, p) in next[r * din..(r + 1) * din]
                            .iter_mut()
                            .zip(&w[o * din..(o + 1) * din])
                        {
                            *n += d * p;
                        }
                    }
                    for (n, a) in next[r * din..(r + 1) * din].iter_mut().zip(&prev[r * din..]) {
                        *n *= 1.0 - a * a;
                    }
                }
                delta = next;
            }
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CscConfig {
    pub final_sparsity: f64,
    pub warmup_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub layers: Vec<usize>,
    pub task: Task,
    pub examples: usize,
    pub batch: usize,
    pub iters: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Ranks per group for hierarchical allreduce.
    pub group_size: usize,
    pub precision: ElementType,
    pub theta: Theta,
    pub overlap: bool,
    pub chunk_size: usize,
    pub csc: Option<CscConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: vec![64, 512, 64, 1],
            task: Task::Linear,
            examples: 5040,
            batch: 32,
            iters: 20,
            lr: 0.01,
            momentum: 0.9,
            seed: 1,
            algorithm: Algorithm::Ring,
            group_size: 1,
            precision: ElementType::Fp32,
            theta: Theta::DEFAULT,
            overlap: true,
            chunk_size: 1000,
            csc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, world_size: usize) -> Result<()> {
        if self.group_size == 0 || world_size % self.group_size != 0 {
            return Err(Error::config(format!(
                "group size {} does not divide {world_size} ranks",
                self.group_size
            )));
        }
        Mlp::new(&self.layers, self.task)?;
        if self.batch == 0 || self.chunk_size == 0 {
            return Err(Error::config("batch and chunk size must be positive"));
        }
        if self.examples == 0 || self.examples % world_size != 0 {
            return Err(Error::config(format!(
                "{} examples cannot be split evenly over {world_size} ranks",
                self.examples
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("lr must be positive and momentum in [0, 1)"));
        }
        if let Some(c) = &self.csc {
            if !(0.0..1.0).contains(&c.final_sparsity) {
                return Err(Error::config(format!(
                    "sparsity {} outside [0, 1)",
                    c.final_sparsity
                )));
            }
        }
        Ok(())
    }

    fn sparse_config(&self) -> Option<SparseConfig> {
        self.csc.map(|c| SparseConfig {
            final_sparsity: c.final_sparsity,
            warmup_iters: c.warmup_iters,
            momentum: self.momentum,
            learning_rate: self.lr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean of all ranks' batch losses.
    pub loss: f32,
    pub local_loss: f32,
    pub sparsity: f64,
    pub grad_payload_bytes: u64,
    pub norm_bytes: u64,
    pub collectives_launched: usize,
    pub wall_ms_compute: f64,
    pub wall_ms_comm: f64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str = "iteration,loss,sparsity,grad_payload_bytes,norm_bytes,collectives_launched,wall_ms_compute,wall_ms_comm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3}",
            self.iteration,
            self.loss,
            self.sparsity,
            self.grad_payload_bytes,
            self.norm_bytes,
            self.collectives_launched,
            self.wall_ms_compute,
            self.wall_ms_comm
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLog {
    pub iteration: usize,
    pub sparsity: f64,
    pub k: usize,
    pub selected_payload_bytes: u64,
    pub norm_bytes: u64,
}

impl SparseLog {
    pub const CSV_HEADER: &'static str = "iteration,sparsity,k,selected_payload_bytes,norm_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.sparsity, self.k, self.selected_payload_bytes, self.norm_bytes
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<IterationMetrics>,
    pub fusion_log: Vec<FusionLog>,
    pub sparse_log: Vec<SparseLog>,
    pub weights: Vec<f32>,
    pub pool_elements: usize,
    pub num_chunks: usize,
    pub stats: StatsSnapshot,
}

/// [`train_observed`] without an observer.
pub fn train(config: &TrainConfig, comm: &Communicator) -> Result<TrainReport> {
    train_observed(config, comm, |_, _| {})
}

/// Runs the configured number of iterations on this rank and calls
/// `observe(t, weights)` after every update.
pub fn train_observed(
    config: &TrainConfig,
    comm: &Communicator,
    observe: impl FnMut(usize, &[f32]),
) -> Result<TrainReport> {
    match config.precision {
        ElementType::Fp32 => run::<f32>(config, comm, observe),
        ElementType::Fp16 => run::<half::f16>(config, comm, observe),
    }
}

enum Update {
    Dense(MomentumCorrection<f32>),
    Sparse(SparseState),
}

fn run<T: Element>(
    config: &TrainConfig,
    comm: &Communicator,
    mut observe: impl FnMut(usize, &[f32]),
) -> Result<TrainReport> {
    let n = comm.world_size();
    config.validate(n)?;
    let comm = comm.clone().with_group_size(config.group_size)?;
    let grad_comm = comm.with_purpose("grad");
    let model = Mlp::new(&config.layers, config.task)?;
    let layout = model.layout(config.chunk_size)?;
    let data = synth_data(config.seed, config.examples, config.layers[0], config.task, n)?;
    let mut weights = model.init(&layout, config.seed.wrapping_add(1));
    let mut pool = GradientPool::<T>::with_layout(layout.clone());
    let progress = ProgressContext::spawn(&format!("gflow-progress-{}", comm.rank()))?;
    let fusion = FusionConfig {
        threshold: config.theta,
        overlap_enabled: config.overlap,
        precision: T::KIND,
    };
    let mut engine = FusionEngine::new(&pool, grad_comm.clone(), config.algorithm, fusion, progress.clone())?;
    let mut update = match config.sparse_config() {
        Some(sc) => Update::Sparse(SparseState::new(&layout, sc)?),
        None => Update::Dense(MomentumCorrection::new(
            layout.total_elements(),
            config.momentum,
            config.lr,
        )),
    };

    let mut metrics = Vec::with_capacity(config.iters);
    let mut fusion_log = Vec::new();
    let mut sparse_log = Vec::new();
    let scale = 1.0 / n as f32;
    comm.with_purpose("check")
        .check_agreement("initial weights", digest_f32(&weights))?;

    for t in 0..config.iters {
        let before = comm.endpoint().stats().snapshot();
        let batch = data.batch(comm.rank(), t, config.batch);
        pool.begin_iteration();
        let start = Instant::now();
        let (local_loss, launched, compute_ms, comm_start) = match &mut update {
            Update::Dense(mc) => {
                engine.begin_iteration();
                let mut handles = Vec::new();
                let loss = model.forward_backward(&layout, &weights, &batch, |id, g| {
                    pool.write_tensor(id, g)?;
                    handles.extend(engine.on_tensor_complete(id)?);
                    Ok(())
                })?;
                let compute_ms = ms(start);
                let comm_start = Instant::now();
                handles.extend(engine.finalize_iteration()?);
                wait_all(handles)?;
                let g = pool.to_f32_vec()?;
                let g: Vec<f32> = g.iter().map(|v| v * scale).collect();
                mc.update(0, &g, &mut weights, true);
                fusion_log.push(engine.log(t));
                (loss, engine.windows().len(), compute_ms, comm_start)
            }
            Update::Sparse(state) => {
                let sparsity = sparsity_at(t, state.config().warmup_iters, state.config().final_sparsity);
                let mut ex = SparseExchange::<T>::begin(
                    state,
                    &comm,
                    config.algorithm,
                    fusion,
                    progress.clone(),
                )?;
                let loss = model.forward_backward(&layout, &weights, &batch, |id, g| {
                    for c in pool.write_tensor(id, g)? {
                        if state.correction_pre_allreduce(&pool, c)? {
                            ex.stage_chunk(&pool, c)?;
                        }
                    }
                    Ok(())
                })?;
                let compute_ms = ms(start);
                let comm_start = Instant::now();
                let report = ex.finish(&pool)?;
                state.sgd_update(&pool, &mut weights, n)?;
                let selected_bytes = (report.elements * T::SIZE) as u64;
                let norm_before = comm.endpoint().stats().snapshot();
                state.select_next_important(&pool, &comm, t)?;
                let norm_bytes = comm
                    .endpoint()
                    .stats()
                    .snapshot()
                    .since(&norm_before)
                    .with_prefix("norm/")
                    .payload_bytes_sent;
                sparse_log.push(SparseLog {
                    iteration: t,
                    sparsity: if t == 0 { 0.0 } else { sparsity },
                    k: report.chunks,
                    selected_payload_bytes: selected_bytes,
                    norm_bytes,
                });
                debug_assert!(t == 0 || report.chunks == selected_count(sparsity, layout.num_chunks()));
                (loss, report.windows, compute_ms, comm_start)
            }
        };
        let mut mean = [local_loss];
        comm.with_purpose("loss").ring_allreduce(&mut mean)?;
        comm.with_purpose("check")
            .check_agreement("master weights", digest_f32(&weights))?;
        let comm_ms = ms(comm_start);
        let delta = comm.endpoint().stats().snapshot().since(&before);
        metrics.push(IterationMetrics {
            iteration: t,
            loss: mean[0] * scale,
            local_loss,
            sparsity: match &update {
                Update::Dense(_) => 0.0,
                Update::Sparse(_) => sparse_log.last().map(|s| s.sparsity).unwrap_or(0.0),
            },
            grad_payload_bytes: delta.with_prefix("grad/").payload_bytes_sent,
            norm_bytes: delta.with_prefix("norm/").payload_bytes_sent,
            collectives_launched: launched,
            wall_ms_compute: compute_ms,
            wall_ms_comm: comm_ms,
        });
        observe(t, &weights);
    }
    Ok(TrainReport {
        metrics,
        fusion_log,
        sparse_log,
        weights,
        pool_elements: layout.total_elements(),
        num_chunks: layout.num_chunks(),
        stats: comm.endpoint().stats().snapshot(),
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}
