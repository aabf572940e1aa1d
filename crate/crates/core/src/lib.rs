//! Dual-branch selective state-space network for underwater image enhancement.
//!
//! The crate is organized bottom-up: a small reverse-mode tensor engine
//! ([`graph`], [`kernels`]), the selective scan primitive ([`ssm`]), the two
//! branch modules ([`spatial`], [`channel`]), mixture-of-experts machinery
//! ([`moe`]), the assembled network ([`net`]), and training, data, metrics
//! and persistence around it.

pub mod battery;
pub mod block;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod moe;
pub mod net;
pub mod nn;
pub mod param;
pub mod spatial;
pub mod train;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, RngState};
pub use tensor::{DType, Real, Tensor};
