//! Manifold-guided out-of-distribution sample generation.
//!
//! A conditional VAE learns the in-distribution manifold. Two kinds of
//! outliers are then synthesized from it:
//!
//! * **Type I** (off-manifold): training points pushed along a random unit
//!   direction in the left nullspace of the decoder Jacobian, i.e. normal to
//!   the manifold ([`offmanifold`]).
//! * **Type II** (on-manifold boundary): latent points on the 95%-coverage
//!   Mahalanobis ellipsoid of each class, decoded back to input space
//!   ([`onmanifold`]).
//!
//! Both feed the extra class of an `n + 1`-way softmax detector
//! ([`detector`]), evaluated with the usual OOD metrics ([`metrics`]).

pub mod batch;
pub mod cvae;
pub mod detector;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod offmanifold;
pub mod onmanifold;
pub mod rng;

pub use error::{Error, Result};
