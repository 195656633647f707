//! Self-labeling refinement for contrastive learning, at desk scale.
//!
//! The crate is `no_std` and only needs `alloc`; the optional `std` feature swaps
//! `libm` for the platform math library. It contains:
//!
//! - [`numerics`]: dense matrices, probability vectors, seeded random streams,
//!   Jacobi eigen/singular value solvers and finite-difference gradients.
//! - [`synthdata`]: corrupted clusterable datasets (unit-norm centers, crops in an
//!   ε-cap, per-center label corruption) and positive-pair sampling.
//! - [`shallow_net`]: the one-hidden-layer network `f(W, x) = vᵀφ(Wx)` with exact
//!   gradients and its Jacobian.
//! - [`contrastive`]: a small MLP encoder with manual backprop, momentum target
//!   encoder, FIFO key queue and the soft-label contrastive loss.
//! - [`refinery`]: label refinement from self-similarity estimates, the confidence
//!   schedule, momentum mixup and the combined training loss.
//! - [`theory`]: measurable counterparts of the recovery and generalization
//!   results: network covariance, support projections, Jacobian bimodality and
//!   the recovery / gap experiments.
//!
//! File formats, configuration and the command line live in the companion
//! `sane-lab` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod contrastive;
mod error;
mod fastmath;
mod float;
pub mod numerics;
pub mod refinery;
pub mod shallow_net;
pub mod synthdata;
pub mod theory;

pub use error::{Error, Result};
