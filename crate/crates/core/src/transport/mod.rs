//! Point-to-point delivery between ranks.
//!
//! An [`Endpoint`] is one rank's view of the job. It owns the incoming
//! mailbox, the traffic counters and the barrier epoch; the backend link
//! (in-process queues or TCP sockets) only moves frames. Sends and receives
//! on distinct tags may be issued concurrently from several threads.

mod frame;
mod inproc;
mod mailbox;
mod stats;
mod tcp;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub use frame::{Frame, MsgType, HEADER_LEN, MAGIC, MAX_PAYLOAD};
pub use inproc::inproc_network;
pub use stats::{PhaseCounters, StatsSnapshot, TrafficStats};
pub use tcp::{tcp_endpoint, tcp_endpoint_with_listener};

use crate::error::{Error, Result};
use mailbox::Mailbox;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Label used for traffic that is not part of a named collective phase.
pub const P2P_LABEL: &str = "p2p";

#[derive(Debug, Clone, Copy)]
pub struct TransportConfig {
    pub timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

pub(crate) trait Link: Send + Sync {
    fn deliver(&self, dst: usize, frame: Frame) -> Result<()>;
    fn backend(&self) -> &'static str;
}

pub struct Endpoint {
    rank: usize,
    world_size: usize,
    config: TransportConfig,
    mailbox: Arc<Mailbox>,
    stats: TrafficStats,
    barrier_epoch: AtomicU32,
    link: Box<dyn Link>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("rank", &self.rank)
            .field("world_size", &self.world_size)
            .field("backend", &self.link.backend())
            .finish()
    }
}

impl Endpoint {
    pub(crate) fn new(
        rank: usize,
        world_size: usize,
        config: TransportConfig,
        mailbox: Arc<Mailbox>,
        link: Box<dyn Link>,
    ) -> Self {
        Endpoint {
            rank,
            world_size,
            config,
            mailbox,
            stats: TrafficStats::new(),
            barrier_epoch: AtomicU32::new(0),
            link,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn backend(&self) -> &'static str {
        self.link.backend()
    }

    pub fn timeout(&self) -> Duration {
        self.config.timeout
    }

    pub fn stats(&self) -> &TrafficStats {
        &self.stats
    }

    pub fn send(&self, dst: usize, tag: u32, payload: &[u8]) -> Result<()> {
        self.send_labeled(P2P_LABEL, dst, tag, payload.to_vec())
    }

    pub fn recv(&self, src: usize, tag: u32) -> Result<Vec<u8>> {
        self.recv_labeled(P2P_LABEL, src, tag)
    }

    /// Sends a data frame and charges its payload to `label`.
    pub fn send_labeled(&self, label: &str, dst: usize, tag: u32, payload: Vec<u8>) -> Result<()> {
        self.check_peer(dst)?;
        frame::check_payload_len(payload.len())?;
        let len = payload.len();
        self.link.deliver(
            dst,
            Frame::new(MsgType::Data, tag, self.rank as u32, payload),
        )?;
        self.stats.record_send(label, len);
        Ok(())
    }

    pub fn recv_labeled(&self, label: &str, src: usize, tag: u32) -> Result<Vec<u8>> {
        self.check_peer(src)?;
        let deadline = Instant::now() + self.config.timeout;
        let payload = self.mailbox.take(MsgType::Data, src, tag, deadline)?;
        self.stats.record_recv(label, payload.len());
        Ok(payload)
    }

    /// Returns once every rank has entered the same barrier epoch. On
    /// timeout the error names the ranks whose arrival was never seen.
    pub fn barrier(&self) -> Result<()> {
        if self.world_size == 1 {
            return Ok(());
        }
        let epoch = self.barrier_epoch.fetch_add(1, Ordering::SeqCst);
        for dst in self.peers() {
            self.link.deliver(
                dst,
                Frame::new(MsgType::Barrier, epoch, self.rank as u32, Vec::new()),
            )?;
            self.stats.record_send("barrier", 0);
        }
        let deadline = Instant::now() + self.config.timeout;
        let peers: Vec<usize> = self.peers().collect();
        for (i, &src) in peers.iter().enumerate() {
            match self.mailbox.take(MsgType::Barrier, src, epoch, deadline) {
                Ok(_) => self.stats.record_recv("barrier", 0),
                Err(Error::Timeout { .. }) | Err(Error::PeerDisconnected { .. }) => {
                    let mut absent = vec![src];
                    for &other in &peers[i + 1..] {
                        if self.mailbox.try_take(MsgType::Barrier, other, epoch).is_none() {
                            absent.push(other);
                        }
                    }
                    return Err(Error::BarrierTimeout { absent });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn peers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.world_size).filter(move |&r| r != self.rank)
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer >= self.world_size {
            return Err(Error::config(format!(
                "rank {peer} outside world of size {}",
                self.world_size
            )));
        }
        if peer == self.rank {
            return Err(Error::config(format!("rank {peer} cannot message itself")));
        }
        Ok(())
    }
}
