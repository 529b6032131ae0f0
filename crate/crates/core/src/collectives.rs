//! Allreduce over an [`Endpoint`].
//!
//! Three algorithms share one calling convention:
//!
//! * ring: reduce-scatter then allgather around a directed ring; each rank
//!   sends `2(N-1)` segments of about `K/N` bytes.
//! * hierarchical: ranks form contiguous groups of `group_size`; each group
//!   ring-reduces to its lowest rank (the master), the masters run a ring
//!   allreduce among themselves, and masters broadcast back to their group.
//!   With `N` ranks and groups of `M`, the masters' ring segments are `KM/N`
//!   bytes.
//! * oracle: gather to rank 0, sum in rank order, broadcast. Slow but
//!   obviously correct; used as the reference in tests.
//!
//! Every message carries tag `(collective_id << 8) | phase`. Collective ids
//! come from a per-communicator counter, so all ranks must launch
//! collectives in the same order.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{self, Element, ScalarBuffer};
use crate::transport::Endpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ring,
    Hierarchical,
    Oracle,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Algorithm::Ring),
            "hier" | "hierarchical" => Ok(Algorithm::Hierarchical),
            "oracle" => Ok(Algorithm::Oracle),
            other => Err(Error::config(format!("unknown algorithm '{other}'"))),
        }
    }
}

pub fn tag(collective_id: u32, phase: u8) -> u32 {
    ((collective_id & 0x00FF_FFFF) << 8) | phase as u32
}

/// Segment `i` of `n` near-equal pieces of `len` elements; the first
/// `len % n` segments carry one extra element.
pub fn segment(len: usize, n: usize, i: usize) -> std::ops::Range<usize> {
    let base = len / n;
    let rem = len % n;
    let start = i * base + i.min(rem);
    start..start + base + usize::from(i < rem)
}

#[derive(Clone)]
pub struct Communicator {
    ep: Arc<Endpoint>,
    ring: Arc<[usize]>,
    group_size: usize,
    next_id: Arc<AtomicU32>,
    purpose: Arc<str>,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.rank())
            .field("world_size", &self.world_size())
            .field("group_size", &self.group_size)
            .field("purpose", &self.purpose)
            .finish()
    }
}

impl Communicator {
    pub fn new(ep: Arc<Endpoint>) -> Self {
        let n = ep.world_size();
        Communicator {
            ep,
            ring: (0..n).collect(),
            group_size: 1,
            next_id: Arc::new(AtomicU32::new(0)),
            purpose: Arc::from("allreduce"),
        }
    }

    /// Ranks per hierarchical group. Must divide the world size.
    pub fn with_group_size(mut self, group_size: usize) -> Result<Self> {
        let n = self.world_size();
        if group_size == 0 || n % group_size != 0 {
            return Err(Error::config(format!(
                "group size {group_size} does not divide {n} ranks"
            )));
        }
        self.group_size = group_size;
        Ok(self)
    }

    /// Ring order for the flat ring algorithm: a permutation of all ranks.
    pub fn with_ring_order(mut self, order: Vec<usize>) -> Result<Self> {
        let n = self.world_size();
        let mut seen = vec![false; n];
        if order.len() != n {
            return Err(Error::config("ring order must list every rank once"));
        }
        for &r in &order {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::config("ring order must list every rank once"));
            }
        }
        self.ring = order.into();
        Ok(self)
    }

    /// A handle that shares the endpoint and id counter but charges traffic
    /// to `purpose/<phase>` labels.
    pub fn with_purpose(&self, purpose: &str) -> Self {
        Communicator {
            purpose: Arc::from(purpose),
            ..self.clone()
        }
    }

    pub fn rank(&self) -> usize {
        self.ep.rank()
    }

    pub fn world_size(&self) -> usize {
        self.ep.world_size()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn endpoint(&self) -> &Arc<Endpoint> {
        &self.ep
    }

    pub fn purpose(&self) -> &str {
        &self.purpose
    }

    pub fn next_collective_id(&self) -> u32 {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }

    fn label(&self, phase: &str) -> String {
        format!("{}/{}", self.purpose, phase)
    }

    pub fn allreduce<T: Element>(&self, algo: Algorithm, data: &mut [T]) -> Result<()> {
        let id = self.next_collective_id();
        self.allreduce_with_id(id, algo, data)
    }

    /// Runs an allreduce under a collective id reserved earlier with
    /// [`Communicator::next_collective_id`].
    pub fn allreduce_with_id<T: Element>(
        &self,
        id: u32,
        algo: Algorithm,
        data: &mut [T],
    ) -> Result<()> {
        match algo {
            Algorithm::Ring => self.ring_allreduce_id(id, data),
            Algorithm::Hierarchical => self.hierarchical_allreduce_id(id, data),
            Algorithm::Oracle => self.oracle_allreduce_id(id, data),
        }
    }

    pub fn allreduce_buffer(&self, algo: Algorithm, buf: &mut ScalarBuffer) -> Result<()> {
        match buf {
            ScalarBuffer::Fp32(v) => self.allreduce(algo, v),
            ScalarBuffer::Fp16(v) => self.allreduce(algo, v),
        }
    }

    pub fn ring_allreduce<T: Element>(&self, data: &mut [T]) -> Result<()> {
        let id = self.next_collective_id();
        self.ring_allreduce_id(id, data)
    }

    pub fn hierarchical_allreduce<T: Element>(&self, data: &mut [T]) -> Result<()> {
        let id = self.next_collective_id();
        self.hierarchical_allreduce_id(id, data)
    }

    pub fn oracle_allreduce<T: Element>(&self, data: &mut [T]) -> Result<()> {
        let id = self.next_collective_id();
        self.oracle_allreduce_id(id, data)
    }

    /// Ring-based reduce to `root`. Only the root's buffer is meaningful
    /// afterwards; other ranks hold partial sums.
    pub fn reduce<T: Element>(&self, data: &mut [T], root: usize) -> Result<()> {
        let id = self.next_collective_id();
        let ring = self.ring.clone();
        self.ring_reduce_in(id, &ring, root, data, 1, &self.label("reduce"))
    }

    /// Forwards `root`'s buffer along the ring until every rank holds it.
    pub fn broadcast<T: Element>(&self, data: &mut [T], root: usize) -> Result<()> {
        let id = self.next_collective_id();
        let ring = self.ring.clone();
        self.broadcast_in(id, &ring, root, data, 1, &self.label("bcast"))
    }

    fn ring_allreduce_id<T: Element>(&self, id: u32, data: &mut [T]) -> Result<()> {
        let ring = self.ring.clone();
        self.ring_allreduce_in(
            id,
            &ring,
            data,
            1,
            &self.label("ring.reduce_scatter"),
            &self.label("ring.allgather"),
        )
    }

    fn hierarchical_allreduce_id<T: Element>(&self, id: u32, data: &mut [T]) -> Result<()> {
        let n = self.world_size();
        let m = self.group_size;
        if n % m != 0 {
            return Err(Error::config(format!("group size {m} does not divide {n} ranks")));
        }
        let rank = self.rank();
        let master = rank - rank % m;
        let group: Vec<usize> = (master..master + m).collect();
        self.ring_reduce_in(id, &group, master, data, 1, &self.label("hier.reduce"))?;
        if rank == master {
            let masters: Vec<usize> = (0..n).step_by(m).collect();
            let inter = self.label("hier.inter");
            self.ring_allreduce_in(id, &masters, data, 3, &inter, &inter)?;
        }
        self.broadcast_in(id, &group, master, data, 5, &self.label("hier.bcast"))
    }

    fn oracle_allreduce_id<T: Element>(&self, id: u32, data: &mut [T]) -> Result<()> {
        let n = self.world_size();
        if n == 1 {
            return Ok(());
        }
        let ep = &self.ep;
        let gather = self.label("oracle.gather");
        let bcast = self.label("oracle.bcast");
        if self.rank() == 0 {
            let mut incoming = vec![T::default(); data.len()];
            for src in 1..n {
                let bytes = ep.recv_labeled(&gather, src, tag(id, 1))?;
                scalar::decode_into(&bytes, &mut incoming)?;
                for (acc, x) in data.iter_mut().zip(&incoming) {
                    *acc = acc.add(*x);
                }
            }
            for dst in 1..n {
                ep.send_labeled(&bcast, dst, tag(id, 2), scalar::encode(data))?;
            }
        } else {
            ep.send_labeled(&gather, 0, tag(id, 1), scalar::encode(data))?;
            let bytes = ep.recv_labeled(&bcast, 0, tag(id, 2))?;
            scalar::decode_into(&bytes, data)?;
        }
        Ok(())
    }

    fn position(&self, ring: &[usize]) -> Result<usize> {
        ring.iter()
            .position(|&r| r == self.rank())
            .ok_or_else(|| Error::config(format!("rank {} is not in ring {ring:?}", self.rank())))
    }

    /// Reduce-scatter: afterwards position `p` holds the full sum of segment
    /// `(p + 1) % n`.
    fn reduce_scatter_in<T: Element>(
        &self,
        id: u32,
        ring: &[usize],
        data: &mut [T],
        phase: u8,
        label: &str,
    ) -> Result<()> {
        let n = ring.len();
        let pos = self.position(ring)?;
        let right = ring[(pos + 1) % n];
        let left = ring[(pos + n - 1) % n];
        let len = data.len();
        for k in 0..n - 1 {
            let send_seg = segment(len, n, (pos + n - k) % n);
            let recv_seg = segment(len, n, (pos + 2 * n - k - 1) % n);
            self.ep
                .send_labeled(label, right, tag(id, phase), scalar::encode(&data[send_seg]))?;
            let bytes = self.ep.recv_labeled(label, left, tag(id, phase))?;
            scalar::accumulate_into(&bytes, &mut data[recv_seg])?;
        }
        Ok(())
    }

    fn ring_allreduce_in<T: Element>(
        &self,
        id: u32,
        ring: &[usize],
        data: &mut [T],
        phase: u8,
        rs_label: &str,
        ag_label: &str,
    ) -> Result<()> {
        let n = ring.len();
        if n == 1 {
            return Ok(());
        }
        self.reduce_scatter_in(id, ring, data, phase, rs_label)?;
        let pos = self.position(ring)?;
        let right = ring[(pos + 1) % n];
        let left = ring[(pos + n - 1) % n];
        let len = data.len();
        for k in 0..n - 1 {
            let send_seg = segment(len, n, (pos + 1 + n - k) % n);
            let recv_seg = segment(len, n, (pos + n - k) % n);
            self.ep.send_labeled(
                ag_label,
                right,
                tag(id, phase + 1),
                scalar::encode(&data[send_seg]),
            )?;
            let bytes = self.ep.recv_labeled(ag_label, left, tag(id, phase + 1))?;
            scalar::decode_into(&bytes, &mut data[recv_seg])?;
        }
        Ok(())
    }

    fn ring_reduce_in<T: Element>(
        &self,
        id: u32,
        ring: &[usize],
        root: usize,
        data: &mut [T],
        phase: u8,
        label: &str,
    ) -> Result<()> {
        let n = ring.len();
        let root_pos = ring
            .iter()
            .position(|&r| r == root)
            .ok_or_else(|| Error::config(format!("root {root} is not in group {ring:?}")))?;
        if n == 1 {
            return Ok(());
        }
        self.reduce_scatter_in(id, ring, data, phase, label)?;
        let pos = self.position(ring)?;
        let len = data.len();
        if pos == root_pos {
            for q in (0..n).filter(|&q| q != root_pos) {
                let seg = segment(len, n, (q + 1) % n);
                let bytes = self.ep.recv_labeled(label, ring[q], tag(id, phase + 1))?;
                scalar::decode_into(&bytes, &mut data[seg])?;
            }
        } else {
            let seg = segment(len, n, (pos + 1) % n);
            self.ep
                .send_labeled(label, root, tag(id, phase + 1), scalar::encode(&data[seg]))?;
        }
        Ok(())
    }

    fn broadcast_in<T: Element>(
        &self,
        id: u32,
        ring: &[usize],
        root: usize,
        data: &mut [T],
        phase: u8,
        label: &str,
    ) -> Result<()> {
        let n = ring.len();
        let root_pos = ring
            .iter()
            .position(|&r| r == root)
            .ok_or_else(|| Error::config(format!("root {root} is not in group {ring:?}")))?;
        if n == 1 {
            return Ok(());
        }
        let pos = self.position(ring)?;
        let right = ring[(pos + 1) % n];
        if pos != root_pos {
            let left = ring[(pos + n - 1) % n];
            let bytes = self.ep.recv_labeled(label, left, tag(id, phase))?;
            scalar::decode_into(&bytes, data)?;
        }
        if (pos + 1) % n != root_pos {
            self.ep
                .send_labeled(label, right, tag(id, phase), scalar::encode(data))?;
        }
        Ok(())
    }

    /// Fails on every rank unless all ranks pass the same `digest`. Used for
    /// weight-replica and important-set agreement checks.
    pub fn check_agreement(&self, what: &str, digest: u64) -> Result<()> {
        let n = self.world_size();
        let id = self.next_collective_id();
        if n == 1 {
            return Ok(());
        }
        let label = self.label("check");
        let ep = &self.ep;
        let verdict: Vec<u32> = if self.rank() == 0 {
            let mut bad = Vec::new();
            for src in 1..n {
                let bytes = ep.recv_labeled(&label, src, tag(id, 1))?;
                if bytes.as_slice() != digest.to_le_bytes() {
                    bad.push(src as u32);
                }
            }
            let payload: Vec<u8> = bad.iter().flat_map(|r| r.to_le_bytes()).collect();
            for dst in 1..n {
                ep.send_labeled(&label, dst, tag(id, 2), payload.clone())?;
            }
            bad
        } else {
            ep.send_labeled(&label, 0, tag(id, 1), digest.to_le_bytes().to_vec())?;
            ep.recv_labeled(&label, 0, tag(id, 2))?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        if verdict.is_empty() {
            Ok(())
        } else {
            Err(Error::protocol(format!(
                "{what} diverged: ranks {verdict:?} disagree with rank 0"
            )))
        }
    }
}

/// FNV-1a over a byte stream; used for agreement digests.
pub fn digest_bytes(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn digest_f32(values: &[f32]) -> u64 {
    digest_bytes(values.iter().flat_map(|v| v.to_bits().to_le_bytes()))
}
