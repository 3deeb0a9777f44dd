//! Euclidean, hyperbolic and mixed-geometry pairwise cross-entropy losses
//! with analytic gradients, plus the tooling to train a small encoder with
//! them and inspect which negatives drive the gradient.
//!
//! - [`geometry`]: Poincaré-ball operations.
//! - [`loss`]: distance matrices, losses and triplet weights `p(x⁻)`.
//! - [`grad`]: analytic gradients, the per-triplet decomposition and a
//!   finite-difference oracle.
//! - [`training`]: data, encoder, sampler and optimizer loop.
//! - [`evaluation`]: Recall@K, hard-negative overlap, `p(x⁻)` profiles, sweeps.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grad;
pub mod loss;
pub mod parallel;
pub mod reports;
pub mod snapshot;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{BallConfig, BallPoint};
pub use loss::{DistanceKind, DistanceMatrix, HeadOutputs, LossConfig, LossMode, PairedBatch, Pairing, TripletWeightMatrix};
pub use training::data::{Dataset, FeatureFormat, SynthSpec};
pub use training::encoder::{EncoderConfig, EncoderParams};
pub use training::{TrainConfig, TrainOutcome};
