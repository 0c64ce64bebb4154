//! Transformer encoders with an entropic optimal-transport interaction layer.
//!
//! Texts are finitely supported probability measures over an embedding space;
//! the relation between two texts is a coupling of the two measures. Two
//! encoder branches turn a pair of measures into an inner-product cost, and a
//! final Sinkhorn layer normalizes that cost into a coupling whose marginals
//! are the inputs — by construction, for any parameter values.
//!
//! The crate ships the pieces needed to build, train and verify that
//! architecture at desk scale:
//!
//! - [`measures`]: points, measures, couplings, densities, marginal checks;
//! - [`transport`]: log-domain Sinkhorn, entropic objectives, an exact
//!   Wasserstein-1 oracle (transportation simplex), stability probes;
//! - [`attention`]: measure-valued multi-head attention and encoders;
//! - [`approx`]: ball-cover partitions, block-averaged couplings, entropic
//!   representation round-trips, the mixing/re-solve regularization pipeline,
//!   and Schrödinger-potential perturbation probes;
//! - [`autodiff`]: a small reverse-mode tape;
//! - [`model`]: the end-to-end architecture, synthetic coupling families,
//!   losses, gradients through a fixed Sinkhorn unroll, and training;
//! - [`selftest`]: the runnable acceptance checks binding everything.
//!
//! All numerics are generic over the scalar via [`scalar::Real`] (`f32` or
//! `f64`); the aliases below fix the double-precision instantiations used by
//! the CLI and the file formats.

pub mod approx;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod io;
pub mod measures;
pub mod model;
pub mod scalar;
pub mod selftest;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases (the instantiation used by the CLI and file I/O).
pub type Point64 = measures::Point<f64>;
pub type Measure64 = measures::DiscreteMeasure<f64>;
pub type Coupling64 = measures::Coupling<f64>;
pub type Density64 = measures::Density<f64>;
pub type CostMatrix64 = transport::CostMatrix<f64>;
pub type SinkhornConfig64 = transport::SinkhornConfig<f64>;
pub type SinkhornSolution64 = transport::SinkhornSolution<f64>;
pub type EncoderParams64 = attention::EncoderParams<f64>;
pub type ModelParams64 = model::SinkhornTransformerParams<f64>;
pub type TrainConfig64 = model::TrainConfig<f64>;
