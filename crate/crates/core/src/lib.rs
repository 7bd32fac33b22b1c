//! Question-conditioned deformable sampling of video feature volumes for
//! open-ended video question answering, built on a small reverse-mode
//! autodiff engine.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`], [`graph`], [`param`], [`gradcheck`]: dense `f64` tensors, an
//!   eager tape with analytic backward passes, named parameters and a
//!   finite-difference checker.
//! - [`sampler`]: the conditional deformable attention stack that reads a
//!   fixed number of tokens out of a `d × t × h × w` volume.
//! - [`regularizer`]: soft orthogonality, maximal coding rate and the
//!   contrastive term that keep sampled tokens apart.
//! - [`dependency`]: gold adjacency from governor edges, subword
//!   re-indexing and the dependency-constrained question encoder.
//! - [`model`]: the cross-modal transformer, training loop and checkpoints.
//! - [`harness`]: the synthetic temporal-ordering task, strategy sweeps and
//!   the sequence-length memory model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dependency;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod regularizer;
pub mod sampler;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use param::{Init, ParamId, ParamStore};
pub use tensor::{Precision, Tensor};
