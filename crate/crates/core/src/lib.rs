//! Deterministic simulator for collaborative inference at the network
//! edge: split classifiers on a group of devices exchange compact queries
//! over erasure-prone sidelinks, build a pruned matching matrix with
//! learned attention, unicast encoder features across the same lossy
//! links, and fuse what arrives before decoding.
//!
//! Everything is seeded: datasets, initialization, training order and the
//! channel draws of every link all derive from one master seed, so runs
//! are reproducible bit-for-bit.

pub mod backbone;
pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod math;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod semgroup;

pub use backbone::SplitModel;
pub use channel::{ErasureChannel, TransmissionRecord};
pub use error::{Error, Result};
pub use math::Mlp;
pub use pipeline::{EvalMetrics, Mode, PipelineCfg, TrainCfg};
pub use scenario::{Dataset, ScenarioCfg};
pub use semgroup::CommModules;
