//! locolab is a deterministic, desk-scale laboratory for low-communication
//! distributed training. It simulates `M` replicas that each run many local
//! AdamW steps and periodically exchange *outer gradients* (parameter-space
//! deltas) which an outer Nesterov-momentum optimizer applies to shared
//! parameters. Synchronization can be sliced into per-fragment sends on a
//! staggered calendar, overlapped with computation by a per-replica delay, and
//! compressed down to a 4-bit float wire format.
//!
//! The crate has two halves:
//!
//! * [`engine`] runs the actual optimization protocol on a small residual
//!   network with a synthetic teacher-student task, and produces exact byte
//!   accounting plus learning-quality metrics.
//! * [`cusim`] is a discrete-event simulator that estimates compute
//!   utilization (time computing vs. waiting on the network) for the same
//!   family of protocols at real model scales, across bandwidth profiles.
//!
//! Everything is reproducible: all randomness flows from a single seed through
//! named sub-seeds, and runs are bit-identical regardless of worker thread
//! count.

pub mod codec;
pub mod config;
pub mod cusim;
pub mod engine;
mod error;
pub mod model;
pub mod optim;
pub mod output;
pub mod paramspace;
pub mod schedule;
pub mod seeding;

pub use error::{Error, Result};
