use std::sync::{Arc, Weak};

use super::frame::Frame;
use super::mailbox::Mailbox;
use super::{Endpoint, Link, TransportConfig};
use crate::error::{Error, Result};

struct InprocLink {
    rank: usize,
    peers: Vec<Weak<Mailbox>>,
}

impl Link for InprocLink {
    fn deliver(&self, dst: usize, frame: Frame) -> Result<()> {
        let mailbox = self.peers[dst]
            .upgrade()
            .ok_or(Error::PeerDisconnected { rank: dst })?;
        mailbox.push(frame);
        Ok(())
    }

    fn backend(&self) -> &'static str {
        "inproc"
    }
}

impl Drop for InprocLink {
    fn drop(&mut self) {
        for (r, peer) in self.peers.iter().enumerate() {
            if r != self.rank {
                if let Some(m) = peer.upgrade() {
                    m.close(self.rank);
                }
            }
        }
    }
}

/// Builds `world_size` endpoints wired together through in-memory queues.
/// Dropping an endpoint looks like a crashed peer to the others.
pub fn inproc_network(world_size: usize, config: TransportConfig) -> Vec<Endpoint> {
    assert!(world_size >= 1, "world_size must be at least 1");
    let mailboxes: Vec<Arc<Mailbox>> = (0..world_size)
        .map(|_| Arc::new(Mailbox::new(world_size)))
        .collect();
    let weak: Vec<Weak<Mailbox>> = mailboxes.iter().map(Arc::downgrade).collect();
    mailboxes
        .into_iter()
        .enumerate()
        .map(|(rank, mailbox)| {
            let link = InprocLink {
                rank,
                peers: weak.clone(),
            };
            Endpoint::new(rank, world_size, config, mailbox, Box::new(link))
        })
        .collect()
}
