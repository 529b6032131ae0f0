//! Lazy allreduce.
//!
//! Completed gradient regions accumulate in a pending window; once the
//! window holds at least θ bytes a single allreduce is launched over it,
//! in place on the pool, and the window restarts at the current offset.
//! Launched collectives run on a per-worker progress thread in FIFO order
//! while the caller keeps producing gradients further along the pool.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use crate::collectives::{Algorithm, Communicator};
use crate::error::{Error, Result};
use crate::pool::{GradientPool, PoolLayout, SharedSlab};
use crate::scalar::{Element, ElementType};

/// Fusion threshold in bytes; `Infinite` defers everything to one
/// allreduce after the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Theta {
    Bytes(u64),
    Infinite,
}

impl Theta {
    pub const DEFAULT: Theta = Theta::Bytes(64 << 20);

    fn reached(self, pending_bytes: u64) -> bool {
        match self {
            Theta::Bytes(t) => pending_bytes >= t,
            Theta::Infinite => false,
        }
    }
}

impl std::str::FromStr for Theta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s == "∞" {
            return Ok(Theta::Infinite);
        }
        s.parse::<u64>()
            .map(Theta::Bytes)
            .map_err(|_| Error::config(format!("invalid fusion threshold '{s}'")))
    }
}

impl std::fmt::Display for Theta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Theta::Bytes(b) => write!(f, "{b}"),
            Theta::Infinite => f.write_str("inf"),
        }
    }
}

impl TryFrom<String> for Theta {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Theta> for String {
    fn from(t: Theta) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub threshold: Theta,
    /// When false, windows are reduced synchronously at launch.
    pub overlap_enabled: bool,
    pub precision: ElementType,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            threshold: Theta::DEFAULT,
            overlap_enabled: true,
            precision: ElementType::Fp32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingWindow {
    pub start_offset: usize,
    pub end_offset: usize,
    pub pending_bytes: u64,
}

impl PendingWindow {
    pub fn len(&self) -> usize {
        self.end_offset - self.start_offset
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Job = Box<dyn FnOnce() + Send>;

/// A worker's background thread for collectives. Jobs run one at a time in
/// submission order.
#[derive(Clone)]
pub struct ProgressContext {
    inner: Arc<ProgressInner>,
}

struct ProgressInner {
    tx: Mutex<Option<mpsc::Sender<Job>>>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl ProgressContext {
    pub fn spawn(name: &str) -> Result<Self> {
        let (tx, rx) = mpsc::channel::<Job>();
        let thread = thread::Builder::new()
            .name(name.to_string())
            .spawn(move || {
                for job in rx {
                    job();
                }
            })?;
        Ok(ProgressContext {
            inner: Arc::new(ProgressInner {
                tx: Mutex::new(Some(tx)),
                thread: Mutex::new(Some(thread)),
            }),
        })
    }

    fn submit(&self, job: Job) -> Result<()> {
        let tx = self.inner.tx.lock().unwrap();
        tx.as_ref()
            .ok_or_else(|| Error::Fusion("progress context shut down".into()))?
            .send(job)
            .map_err(|_| Error::Fusion("progress context died".into()))
    }
}

impl Drop for ProgressInner {
    fn drop(&mut self) {
        self.tx.lock().unwrap().take();
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

/// Completion of one fused collective.
#[derive(Debug)]
pub struct CollectiveHandle {
    window: PendingWindow,
    done: mpsc::Receiver<Result<()>>,
}

impl CollectiveHandle {
    pub fn window(&self) -> PendingWindow {
        self.window
    }

    pub fn wait(self) -> Result<PendingWindow> {
        match self.done.recv() {
            Ok(Ok(())) => Ok(self.window),
            Ok(Err(e)) => Err(e),
            Err(_) => Err(Error::Fusion(format!(
                "collective over {}..{} was dropped before completing",
                self.window.start_offset, self.window.end_offset
            ))),
        }
    }
}

/// Blocks until every handle completes. All handles are drained even after
/// a failure; the first error is returned.
pub fn wait_all(handles: impl IntoIterator<Item = CollectiveHandle>) -> Result<()> {
    let mut first = None;
    for h in handles {
        if let Err(e) = h.wait() {
            first.get_or_insert(e);
        }
    }
    match first {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

/// Threshold-driven window launcher over any shared buffer: the gradient
/// pool for dense training, or the staging buffer for sparse exchange.
pub struct LazyAllreduce<T: Element> {
    slab: SharedSlab<T>,
    comm: Communicator,
    algo: Algorithm,
    config: FusionConfig,
    progress: ProgressContext,
    window_start: usize,
    cursor: usize,
    launched: Vec<PendingWindow>,
}

impl<T: Element> LazyAllreduce<T> {
    pub fn new(
        slab: SharedSlab<T>,
        comm: Communicator,
        algo: Algorithm,
        config: FusionConfig,
        progress: ProgressContext,
    ) -> Self {
        LazyAllreduce {
            slab,
            comm,
            algo,
            config,
            progress,
            window_start: 0,
            cursor: 0,
            launched: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.window_start = 0;
        self.cursor = 0;
        self.launched.clear();
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn pending_bytes(&self) -> u64 {
        ((self.cursor - self.window_start) * T::SIZE) as u64
    }

    pub fn launched(&self) -> &[PendingWindow] {
        &self.launched
    }

    /// Marks the next `elements` scalars as complete.
    pub fn extend(&mut self, elements: usize) -> Result<Option<CollectiveHandle>> {
        if self.cursor + elements > self.slab.len() {
            return Err(Error::Fusion(format!(
                "window would run past the buffer ({} + {} > {})",
                self.cursor,
                elements,
                self.slab.len()
            )));
        }
        self.cursor += elements;
        let pending = self.pending_bytes();
        if pending > 0 && self.config.threshold.reached(pending) {
            self.launch().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Launches whatever is pending, if anything.
    pub fn flush(&mut self) -> Result<Option<CollectiveHandle>> {
        if self.cursor == self.window_start {
            return Ok(None);
        }
        self.launch().map(Some)
    }

    fn launch(&mut self) -> Result<CollectiveHandle> {
        let window = PendingWindow {
            start_offset: self.window_start,
            end_offset: self.cursor,
            pending_bytes: self.pending_bytes(),
        };
        let mut region = self.slab.claim(window.start_offset..window.end_offset)?;
        let id = self.comm.next_collective_id();
        let (tx, done) = mpsc::channel();
        let comm = self.comm.clone();
        let algo = self.algo;
        let job = move || {
            let r = comm.allreduce_with_id(id, algo, &mut region);
            drop(region);
            let _ = tx.send(r);
        };
        if self.config.overlap_enabled {
            self.progress.submit(Box::new(job))?;
        } else {
            job();
        }
        self.window_start = self.cursor;
        self.launched.push(window);
        Ok(CollectiveHandle { window, done })
    }
}

/// One iteration's fusion summary, written as a CSV row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLog {
    pub iteration: usize,
    pub window_bytes: Vec<u64>,
    /// Bytes launched before the last gradient tensor was produced.
    pub overlap_span_bytes: u64,
}

impl FusionLog {
    pub const CSV_HEADER: &'static str = "iteration,window_count,bytes_per_window,overlap_span_bytes";

    pub fn csv_row(&self) -> String {
        let bytes: Vec<String> = self.window_bytes.iter().map(|b| b.to_string()).collect();
        format!(
            "{},{},{},{}",
            self.iteration,
            self.window_bytes.len(),
            bytes.join(";"),
            self.overlap_span_bytes
        )
    }
}

/// Lazy allreduce bound to a gradient pool, fed by tensor completions.
pub struct FusionEngine<T: Element> {
    lazy: LazyAllreduce<T>,
    layout: PoolLayout,
    next_tensor: usize,
    overlap_span_bytes: u64,
}

impl<T: Element> FusionEngine<T> {
    pub fn new(
        pool: &GradientPool<T>,
        comm: Communicator,
        algo: Algorithm,
        config: FusionConfig,
        progress: ProgressContext,
    ) -> Result<Self> {
        if config.precision != T::KIND {
            return Err(Error::config(format!(
                "fusion configured for {} but pool holds {}",
                config.precision,
                T::KIND
            )));
        }
        let layout = pool.layout().clone();
        Ok(FusionEngine {
            lazy: LazyAllreduce::new(pool.slab().clone(), comm, algo, config, progress),
            next_tensor: layout.num_tensors(),
            layout,
            overlap_span_bytes: 0,
        })
    }

    pub fn begin_iteration(&mut self) {
        self.lazy.reset();
        self.next_tensor = self.layout.num_tensors();
        self.overlap_span_bytes = 0;
    }

    /// Tensors must arrive in descending id order. Returns the collective
    /// launched by this completion, if the threshold was reached.
    pub fn on_tensor_complete(&mut self, tensor_id: usize) -> Result<Vec<CollectiveHandle>> {
        if tensor_id != self.next_tensor || tensor_id == 0 {
            return Err(Error::Fusion(format!(
                "tensor {tensor_id} completed out of order (expected {})",
                self.next_tensor
            )));
        }
        let desc = *self.layout.desc(tensor_id)?;
        debug_assert_eq!(desc.pool_offset, self.lazy.cursor());
        let launched = self.lazy.extend(desc.element_count)?;
        self.next_tensor -= 1;
        if let Some(h) = &launched {
            if tensor_id != 1 {
                self.overlap_span_bytes += h.window().pending_bytes;
            }
        }
        Ok(launched.into_iter().collect())
    }

    /// Flushes the residual window once every tensor has completed.
    pub fn finalize_iteration(&mut self) -> Result<Option<CollectiveHandle>> {
        if self.next_tensor != 0 {
            return Err(Error::Fusion(format!(
                "finalize called with tensors 1..={} still outstanding",
                self.next_tensor
            )));
        }
        self.lazy.flush()
    }

    pub fn windows(&self) -> &[PendingWindow] {
        self.lazy.launched()
    }

    pub fn log(&self, iteration: usize) -> FusionLog {
        FusionLog {
            iteration,
            window_bytes: self.windows().iter().map(|w| w.pending_bytes).collect(),
            overlap_span_bytes: self.overlap_span_bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_parsing() {
        assert_eq!("inf".parse::<Theta>().unwrap(), Theta::Infinite);
        assert_eq!("4096".parse::<Theta>().unwrap(), Theta::Bytes(4096));
        assert!("-1".parse::<Theta>().is_err());
        assert_eq!(Theta::Bytes(0).to_string(), "0");
        assert_eq!(String::from(Theta::Infinite), "inf");
    }

    #[test]
    fn threshold_reached_semantics() {
        assert!(Theta::Bytes(0).reached(1));
        assert!(Theta::Bytes(8).reached(8));
        assert!(!Theta::Bytes(9).reached(8));
        assert!(!Theta::Infinite.reached(u64::MAX));
    }

    #[test]
    fn fusion_log_row() {
        let log = FusionLog {
            iteration: 3,
            window_bytes: vec![16, 8],
            overlap_span_bytes: 16,
        };
        assert_eq!(log.csv_row(), "3,2,16;8,16");
    }
}
