//! Generation-ordered gradient memory pool.
//!
//! Tensors are numbered `1..=m` in ascending layer order, but the backward
//! pass produces them from `m` down to `1`, so the pool stores them in that
//! order: tensor `j` starts at `sum(size_i for i in j+1..=m)`. The pool is
//! also cut into fixed-size chunks (the last one may be short), which is the
//! unit of sparse selection.

pub mod half_codec;
mod slab;

use std::io::{Read, Write};
use std::ops::Range;

pub use half_codec::{decode_half, encode_half};
pub use slab::{Region, SharedSlab};

use crate::error::{Error, Result};
use crate::scalar::{Element, ElementType};

pub const DEFAULT_CHUNK_SIZE: usize = 32_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorDesc {
    pub tensor_id: usize,
    pub element_count: usize,
    pub pool_offset: usize,
}

impl TensorDesc {
    pub fn range(&self) -> Range<usize> {
        self.pool_offset..self.pool_offset + self.element_count
    }
}

/// Tensor placement and chunk partition, independent of storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolLayout {
    descs: Vec<TensorDesc>,
    total: usize,
    chunk_size: usize,
}

impl PoolLayout {
    /// `sizes[i]` is the element count of tensor `i + 1`.
    pub fn new(sizes: &[usize], chunk_size: usize) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::config("gradient pool needs at least one tensor"));
        }
        if chunk_size == 0 {
            return Err(Error::config("chunk size must be positive"));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(format!("tensor {} has zero elements", i + 1)));
        }
        let mut descs = vec![
            TensorDesc {
                tensor_id: 0,
                element_count: 0,
                pool_offset: 0
            };
            sizes.len()
        ];
        let mut offset = 0;
        for (i, &count) in sizes.iter().enumerate().rev() {
            descs[i] = TensorDesc {
                tensor_id: i + 1,
                element_count: count,
                pool_offset: offset,
            };
            offset += count;
        }
        Ok(PoolLayout {
            descs,
            total: offset,
            chunk_size,
        })
    }

    pub fn total_elements(&self) -> usize {
        self.total
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn num_tensors(&self) -> usize {
        self.descs.len()
    }

    pub fn num_chunks(&self) -> usize {
        self.total.div_ceil(self.chunk_size)
    }

    /// Descriptors indexed by `tensor_id - 1`.
    pub fn descs(&self) -> &[TensorDesc] {
        &self.descs
    }

    pub fn desc(&self, tensor_id: usize) -> Result<&TensorDesc> {
        tensor_id
            .checked_sub(1)
            .and_then(|i| self.descs.get(i))
            .ok_or_else(|| Error::Pool(format!("no tensor with id {tensor_id}")))
    }

    pub fn chunk_range(&self, chunk: usize) -> Result<Range<usize>> {
        if chunk >= self.num_chunks() {
            return Err(Error::Pool(format!(
                "chunk {chunk} out of range (pool has {})",
                self.num_chunks()
            )));
        }
        let start = chunk * self.chunk_size;
        Ok(start..(start + self.chunk_size).min(self.total))
    }

    /// Chunks intersecting `range`.
    pub fn chunks_touching(&self, range: Range<usize>) -> Range<usize> {
        if range.is_empty() {
            return 0..0;
        }
        range.start / self.chunk_size..(range.end - 1) / self.chunk_size + 1
    }

    /// Maps a pool element back to `(tensor_id, index within tensor)`.
    pub fn locate(&self, element: usize) -> Option<(usize, usize)> {
        if element >= self.total {
            return None;
        }
        // descs are stored by id; offsets descend with id.
        let i = self
            .descs
            .partition_point(|d| d.pool_offset > element);
        let d = &self.descs[i];
        Some((d.tensor_id, element - d.pool_offset))
    }
}

/// Contiguous gradient storage for one worker.
pub struct GradientPool<T: Element> {
    layout: PoolLayout,
    slab: SharedSlab<T>,
    written: Vec<bool>,
    chunk_fill: Vec<usize>,
}

impl<T: Element> GradientPool<T> {
    pub fn new(sizes: &[usize], chunk_size: usize) -> Result<Self> {
        let layout = PoolLayout::new(sizes, chunk_size)?;
        Ok(Self::with_layout(layout))
    }

    pub fn with_layout(layout: PoolLayout) -> Self {
        let total = layout.total_elements();
        let chunks = layout.num_chunks();
        let tensors = layout.num_tensors();
        GradientPool {
            layout,
            slab: SharedSlab::new(total),
            written: vec![false; tensors],
            chunk_fill: vec![0; chunks],
        }
    }

    pub fn element_type(&self) -> ElementType {
        T::KIND
    }

    pub fn layout(&self) -> &PoolLayout {
        &self.layout
    }

    pub fn total_elements(&self) -> usize {
        self.layout.total_elements()
    }

    pub fn num_chunks(&self) -> usize {
        self.layout.num_chunks()
    }

    pub fn byte_len(&self) -> usize {
        self.total_elements() * T::SIZE
    }

    pub fn slab(&self) -> &SharedSlab<T> {
        &self.slab
    }

    /// Clears per-iteration write tracking. Contents are left in place.
    pub fn begin_iteration(&mut self) {
        self.written.iter_mut().for_each(|w| *w = false);
        self.chunk_fill.iter_mut().for_each(|f| *f = 0);
    }

    pub fn is_written(&self, tensor_id: usize) -> bool {
        tensor_id
            .checked_sub(1)
            .and_then(|i| self.written.get(i).copied())
            .unwrap_or(false)
    }

    pub fn all_written(&self) -> bool {
        self.written.iter().all(|&w| w)
    }

    pub fn is_chunk_complete(&self, chunk: usize) -> bool {
        match self.layout.chunk_range(chunk) {
            Ok(r) => self.chunk_fill[chunk] == r.len(),
            Err(_) => false,
        }
    }

    /// Stores tensor `tensor_id` and returns the chunks this write
    /// completed, in ascending order. On error nothing is modified.
    pub fn write_tensor(&mut self, tensor_id: usize, values: &[f32]) -> Result<Vec<usize>> {
        let desc = *self.layout.desc(tensor_id)?;
        if values.len() != desc.element_count {
            return Err(Error::Pool(format!(
                "tensor {tensor_id} has {} elements, got {}",
                desc.element_count,
                values.len()
            )));
        }
        if self.written[tensor_id - 1] {
            return Err(Error::Pool(format!(
                "tensor {tensor_id} already written this iteration"
            )));
        }
        self.slab.with_region(desc.range(), |dst| {
            for (d, &v) in dst.iter_mut().zip(values) {
                *d = T::from_f32(v);
            }
        })?;
        self.written[tensor_id - 1] = true;

        let mut completed = Vec::new();
        let range = desc.range();
        for c in self.layout.chunks_touching(range.clone()) {
            let cr = self.layout.chunk_range(c)?;
            let overlap = range.end.min(cr.end) - range.start.max(cr.start);
            self.chunk_fill[c] += overlap;
            if self.chunk_fill[c] == cr.len() {
                completed.push(c);
            }
        }
        Ok(completed)
    }

    /// Sum of absolute values over one chunk, accumulated in fp32 with
    /// compensated summation.
    pub fn chunk_l1(&self, chunk: usize) -> Result<f32> {
        let range = self.layout.chunk_range(chunk)?;
        self.slab.with_region(range, |xs| {
            let mut sum = 0.0f32;
            let mut comp = 0.0f32;
            for x in xs.iter() {
                let v = x.to_f32().abs();
                let t = sum + v;
                if sum >= v {
                    comp += (sum - t) + v;
                } else {
                    comp += (v - t) + sum;
                }
                sum = t;
            }
            sum + comp
        })
    }

    pub fn read_range(&self, range: Range<usize>) -> Result<Vec<f32>> {
        self.slab
            .with_region(range, |xs| xs.iter().map(|x| x.to_f32()).collect())
    }

    pub fn write_range(&self, start: usize, values: &[f32]) -> Result<()> {
        self.slab.with_region(start..start + values.len(), |dst| {
            for (d, &v) in dst.iter_mut().zip(values) {
                *d = T::from_f32(v);
            }
        })
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        self.read_range(0..self.total_elements())
    }

    /// Debug dump: `total_elements u64 | chunk_size u64 | element_type u8 |`
    /// raw little-endian scalars.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.total_elements() as u64).to_le_bytes())?;
        w.write_all(&(self.layout.chunk_size() as u64).to_le_bytes())?;
        w.write_all(&[T::KIND.code()])?;
        let bytes = self
            .slab
            .with_region(0..self.total_elements(), |xs| crate::scalar::encode(xs))?;
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Parsed pool dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSnapshot {
    pub total_elements: usize,
    pub chunk_size: usize,
    pub element_type: ElementType,
    pub values: Vec<f32>,
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<PoolSnapshot> {
    let mut head = [0u8; 17];
    r.read_exact(&mut head)?;
    let total = u64::from_le_bytes(head[0..8].try_into().unwrap()) as usize;
    let chunk_size = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let element_type = ElementType::from_code(head[16])?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != total * element_type.size() {
        return Err(Error::Format(format!(
            "snapshot declares {total} elements but carries {} bytes",
            raw.len()
        )));
    }
    let values = match element_type {
        ElementType::Fp32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        ElementType::Fp16 => decode_half(&raw)?,
    };
    Ok(PoolSnapshot {
        total_elements: total,
        chunk_size,
        element_type,
        values,
    })
}
