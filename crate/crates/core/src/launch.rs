//! Runs one closure per rank on threads wired by the in-process transport.

use std::sync::Arc;
use std::thread;

use crate::collectives::Communicator;
use crate::transport::{inproc_network, Endpoint, TransportConfig};

/// Spawns `world_size` threads, hands each its endpoint and collects the
/// results in rank order. A panicking rank re-panics here.
pub fn run_inproc<R, F>(world_size: usize, config: TransportConfig, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Arc<Endpoint>) -> R + Sync,
{
    let endpoints = inproc_network(world_size, config);
    thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let f = &f;
                thread::Builder::new()
                    .name(format!("gflow-rank-{}", ep.rank()))
                    .spawn_scoped(s, move || f(Arc::new(ep)))
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(p) => std::panic::resume_unwind(p),
            })
            .collect()
    })
}

/// [`run_inproc`] with a default [`Communicator`] per rank.
pub fn with_communicators<R, F>(world_size: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Communicator) -> R + Sync,
{
    run_inproc(world_size, TransportConfig::default(), |ep| {
        f(Communicator::new(ep))
    })
}
