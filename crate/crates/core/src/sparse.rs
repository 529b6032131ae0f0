//! Coarse-grained sparse communication (CSC).
//!
//! Each iteration only the *important* chunks of the gradient pool are
//! allreduced. Gradients of the other chunks are kept as a momentum-scaled
//! residual and folded into the next iteration's gradient. Importance for
//! iteration `t + 1` is chosen at the end of iteration `t` from chunk L1
//! norms that every rank sums with a ring allreduce, so all ranks pick the
//! same chunks.
//!
//! Per element, with momentum `m` and learning rate `lr`:
//!
//! ```text
//! before allreduce:  g  = g + hg
//!                    hg = 0            if important
//!                    hg = m * g        otherwise
//! update:            u  = m * hu + lr * g;  hu = u;  w = w - u   if important
//!                    (hu, w unchanged)                            otherwise
//! ```
//!
//! `g` in the update is the allreduced gradient divided by the world size.

use num_traits::Float;

use crate::collectives::{digest_bytes, Algorithm, Communicator};
use crate::error::{Error, Result};
use crate::fusion::{wait_all, CollectiveHandle, FusionConfig, LazyAllreduce, ProgressContext};
use crate::pool::{GradientPool, PoolLayout, SharedSlab};
use crate::scalar::Element;

/// Sparsity ratio at iteration `t`: a linear ramp from 0 to `final_sparsity`
/// over `warmup_iters` iterations.
pub fn sparsity_at(t: usize, warmup_iters: usize, final_sparsity: f64) -> f64 {
    if warmup_iters == 0 {
        return final_sparsity;
    }
    final_sparsity * (t as f64 / warmup_iters as f64).min(1.0)
}

/// Number of chunks transmitted at a given sparsity: `max(1, round((1 - s) n))`.
pub fn selected_count(sparsity: f64, num_chunks: usize) -> usize {
    (((1.0 - sparsity) * num_chunks as f64).round() as usize).clamp(1, num_chunks.max(1))
}

/// Bit-set over chunk indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSet {
    words: Vec<u64>,
    len: usize,
}

impl ChunkSet {
    pub fn empty(len: usize) -> Self {
        ChunkSet {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut s = Self::empty(len);
        (0..len).for_each(|i| s.insert(i));
        s
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(len);
        indices.into_iter().for_each(|i| s.insert(i));
        s
    }

    pub fn capacity(&self) -> usize {
        self.len
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "chunk {i} outside set of {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.contains(i))
    }

    pub fn digest(&self) -> u64 {
        digest_bytes(
            (self.len as u64)
                .to_le_bytes()
                .into_iter()
                .chain(self.words.iter().flat_map(|w| w.to_le_bytes())),
        )
    }
}

/// Historical gradient / historical update bookkeeping, generic over the
/// float type so the same code can run in f64 as a reference.
#[derive(Debug, Clone)]
pub struct MomentumCorrection<F> {
    hg: Vec<F>,
    hu: Vec<F>,
    momentum: F,
    learning_rate: F,
}

impl<F: Float> MomentumCorrection<F> {
    pub fn new(len: usize, momentum: F, learning_rate: F) -> Self {
        MomentumCorrection {
            hg: vec![F::zero(); len],
            hu: vec![F::zero(); len],
            momentum,
            learning_rate,
        }
    }

    pub fn hg(&self) -> &[F] {
        &self.hg
    }

    pub fn hu(&self) -> &[F] {
        &self.hu
    }

    /// Folds the residual into `grads` (the elements at `offset..`) and
    /// refreshes the residual.
    pub fn preprocess(&mut self, offset: usize, grads: &mut [F], important: bool) {
        let hg = &mut self.hg[offset..offset + grads.len()];
        for (g, h) in grads.iter_mut().zip(hg) {
            *g = *g + *h;
            *h = if important {
                F::zero()
            } else {
                self.momentum * *g
            };
        }
    }

    pub fn update(&mut self, offset: usize, grads: &[F], weights: &mut [F], important: bool) {
        if !important {
            return;
        }
        let hu = &mut self.hu[offset..offset + grads.len()];
        for ((g, w), h) in grads.iter().zip(weights.iter_mut()).zip(hu) {
            let u = self.momentum * *h + self.learning_rate * *g;
            *h = u;
            *w = *w - u;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseConfig {
    pub final_sparsity: f64,
    pub warmup_iters: usize,
    pub momentum: f32,
    pub learning_rate: f32,
}

pub struct SparseState {
    layout: PoolLayout,
    important: ChunkSet,
    correction: MomentumCorrection<f32>,
    config: SparseConfig,
}

impl SparseState {
    /// Starts fully dense: every chunk is important in the first iteration.
    pub fn new(layout: &PoolLayout, config: SparseConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.final_sparsity) {
            return Err(Error::config(format!(
                "sparsity {} outside [0, 1)",
                config.final_sparsity
            )));
        }
        if !(0.0..1.0).contains(&config.momentum) || config.learning_rate <= 0.0 {
            return Err(Error::config("momentum must be in [0, 1) and lr positive"));
        }
        Ok(SparseState {
            important: ChunkSet::full(layout.num_chunks()),
            correction: MomentumCorrection::new(
                layout.total_elements(),
                config.momentum,
                config.learning_rate,
            ),
            layout: layout.clone(),
            config,
        })
    }

    pub fn config(&self) -> &SparseConfig {
        &self.config
    }

    pub fn important(&self) -> &ChunkSet {
        &self.important
    }

    pub fn set_important(&mut self, set: ChunkSet) -> Result<()> {
        if set.capacity() != self.layout.num_chunks() {
            return Err(Error::config("important set sized for a different pool"));
        }
        self.important = set;
        Ok(())
    }

    pub fn correction(&self) -> &MomentumCorrection<f32> {
        &self.correction
    }

    pub fn selected_elements(&self) -> usize {
        self.important
            .iter()
            .map(|c| self.layout.chunk_range(c).map(|r| r.len()).unwrap_or(0))
            .sum()
    }

    /// Applies the pre-allreduce correction to a completed chunk in place.
    /// Returns whether the chunk is to be transmitted.
    pub fn correction_pre_allreduce<T: Element>(
        &mut self,
        pool: &GradientPool<T>,
        chunk: usize,
    ) -> Result<bool> {
        if !pool.is_chunk_complete(chunk) {
            return Err(Error::Pool(format!("chunk {chunk} is not complete")));
        }
        let range = self.layout.chunk_range(chunk)?;
        let important = self.important.contains(chunk);
        let mut g = pool.read_range(range.clone())?;
        self.correction.preprocess(range.start, &mut g, important);
        pool.write_range(range.start, &g)?;
        Ok(important)
    }

    /// Momentum SGD on important chunks, using the allreduced pool divided
    /// by `world_size`.
    pub fn sgd_update<T: Element>(
        &mut self,
        pool: &GradientPool<T>,
        weights: &mut [f32],
        world_size: usize,
    ) -> Result<()> {
        if weights.len() != self.layout.total_elements() {
            return Err(Error::config(format!(
                "{} weights for a pool of {}",
                weights.len(),
                self.layout.total_elements()
            )));
        }
        let scale = 1.0 / world_size as f32;
        for c in self.important.iter() {
            let range = self.layout.chunk_range(c)?;
            let mut g = pool.read_range(range.clone())?;
            g.iter_mut().for_each(|v| *v *= scale);
            self.correction
                .update(range.start, &g, &mut weights[range], true);
        }
        Ok(())
    }

    /// Local chunk norms with important chunks divided by the world size,
    /// so that after the sum every chunk is on the scale of a sum of locals.
    pub fn local_norms<T: Element>(&self, pool: &GradientPool<T>, world_size: usize) -> Result<Vec<f32>> {
        (0..self.layout.num_chunks())
            .map(|c| {
                let n = pool.chunk_l1(c)?;
                Ok(if self.important.contains(c) {
                    n / world_size as f32
                } else {
                    n
                })
            })
            .collect()
    }

    /// Chooses the important chunks for iteration `t + 1` and installs them.
    pub fn select_next_important<T: Element>(
        &mut self,
        pool: &GradientPool<T>,
        comm: &Communicator,
        t: usize,
    ) -> Result<ChunkSet> {
        let mut norms = self.local_norms(pool, comm.world_size())?;
        comm.with_purpose("norm").ring_allreduce(&mut norms)?;
        let sparsity = sparsity_at(t + 1, self.config.warmup_iters, self.config.final_sparsity);
        let k = selected_count(sparsity, norms.len());
        let set = top_k(&norms, k);
        self.important = set.clone();
        Ok(set)
    }
}

/// The `k` largest entries; ties go to the lower index.
pub fn top_k(norms: &[f32], k: usize) -> ChunkSet {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    ChunkSet::from_indices(norms.len(), idx.into_iter().take(k))
}

/// Bytes moved by one sparse exchange at this rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExchangeReport {
    pub chunks: usize,
    pub elements: usize,
    pub windows: usize,
}

/// Staged sparse allreduce for one iteration. Important chunks are copied
/// into a staging buffer as they complete and reduced with the lazy
/// allreduce policy; `finish` writes the sums back into the pool.
pub struct SparseExchange<T: Element> {
    staging: SharedSlab<T>,
    lazy: LazyAllreduce<T>,
    staged: Vec<(usize, usize)>,
    handles: Vec<CollectiveHandle>,
}

impl<T: Element> SparseExchange<T> {
    /// Verifies that all ranks hold the same important set, then allocates
    /// the staging buffer.
    pub fn begin(
        state: &SparseState,
        comm: &Communicator,
        algo: Algorithm,
        config: FusionConfig,
        progress: ProgressContext,
    ) -> Result<Self> {
        comm.with_purpose("check")
            .check_agreement("important chunk set", state.important.digest())?;
        let staging = SharedSlab::new(state.selected_elements());
        let lazy = LazyAllreduce::new(
            staging.clone(),
            comm.with_purpose("grad"),
            algo,
            config,
            progress,
        );
        Ok(SparseExchange {
            staging,
            lazy,
            staged: Vec::new(),
            handles: Vec::new(),
        })
    }

    /// Copies an important, corrected chunk into the staging buffer.
    pub fn stage_chunk(&mut self, pool: &GradientPool<T>, chunk: usize) -> Result<()> {
        let range = pool.layout().chunk_range(chunk)?;
        if let Some(&(last, _)) = self.staged.last() {
            if chunk <= last {
                return Err(Error::Fusion(format!(
                    "chunk {chunk} staged after chunk {last}"
                )));
            }
        }
        let at = self.lazy.cursor();
        let src = pool.slab().claim(range.clone())?;
        self.staging
            .with_region(at..at + range.len(), |dst| dst.copy_from_slice(&src))?;
        drop(src);
        self.staged.push((chunk, at));
        if let Some(h) = self.lazy.extend(range.len())? {
            self.handles.push(h);
        }
        Ok(())
    }

    pub fn finish(mut self, pool: &GradientPool<T>) -> Result<ExchangeReport> {
        if let Some(h) = self.lazy.flush()? {
            self.handles.push(h);
        }
        let windows = self.handles.len();
        wait_all(std::mem::take(&mut self.handles))?;
        let mut elements = 0;
        for &(chunk, at) in &self.staged {
            let range = pool.layout().chunk_range(chunk)?;
            let src = self.staging.claim(at..at + range.len())?;
            pool.slab()
                .with_region(range.clone(), |dst| dst.copy_from_slice(&src))?;
            elements += range.len();
        }
        Ok(ExchangeReport {
            chunks: self.staged.len(),
            elements,
            windows,
        })
    }
}

/// Whole-pool sparse exchange: corrects every chunk, exchanges the
/// important ones and writes the sums back. All chunks must be complete.
pub fn sparse_exchange<T: Element>(
    state: &mut SparseState,
    pool: &GradientPool<T>,
    comm: &Communicator,
    algo: Algorithm,
    config: FusionConfig,
    progress: ProgressContext,
) -> Result<ExchangeReport> {
    let mut ex = SparseExchange::begin(state, comm, algo, config, progress)?;
    for c in 0..pool.num_chunks() {
        if state.correction_pre_allreduce(pool, c)? {
            ex.stage_chunk(pool, c)?;
        }
    }
    ex.finish(pool)
}
