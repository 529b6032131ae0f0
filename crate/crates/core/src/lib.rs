//! Communication stack for synchronous data-parallel SGD.
//!
//! - [`transport`]: framed point-to-point messaging (in-process or TCP).
//! - [`collectives`]: ring, hierarchical and reference allreduce.
//! - [`pool`]: generation-ordered gradient pool and the fp16 wire codec.
//! - [`fusion`]: lazy allreduce over the pool with threshold θ.
//! - [`sparse`]: coarse-grained sparse communication with momentum correction.
//! - [`trainer`]: a small deterministic MLP training loop driving the stack.
//! - [`harness`]: run configuration, traffic prediction and worker launch.

pub mod collectives;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod launch;
pub mod pool;
pub mod scalar;
pub mod sparse;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
