//! CTR prediction with a behavior-sequence transformer and its baselines.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` matrices and a reverse-mode tape.
//! - [`features`]: example types, feature schema, position buckets, hashing
//!   and the embedding lookups.
//! - [`transformer`]: multi-head self-attention and the residual block.
//! - [`models`]: BST plus the WDL, WDL(+Seq) and DIN-lite baselines sharing
//!   one MLP head.
//! - [`synth`]: a seeded generator of behavior sequences with a planted,
//!   order-dependent click signal, and JSONL I/O.
//! - [`train`], [`metrics`], [`bench`], [`checkpoint`]: optimization,
//!   evaluation, latency measurement and persistence.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use features::{BehaviorEvent, Example, FeatureSchema};
pub use graph::{Gradients, Graph, ParamId, Params, Var};
pub use models::{Model, ModelConfig, ModelKind};
pub use tensor::{Mode, Tensor};
