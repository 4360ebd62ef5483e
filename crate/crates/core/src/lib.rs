//! Graphical intra-class correlation (GICC) for repeated binary graphs.
//!
//! The model treats each edge indicator as a thresholded latent Gaussian with
//! a subject-level random effect, `y = μ + x_i + u_ij`, `x_i ~ N(0, Σ_x)`,
//! `u_ij ~ N(0, I)`, and summarizes reliability as
//! `GICC = tr(Σ_x) / (tr(Σ_x) + D)`. Parameters are fitted by Monte Carlo EM
//! with a data-augmented Gibbs sampler in the E-step.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ingest;
pub mod linalg;
pub mod mcem;
pub mod model;
pub mod normal;
pub mod oracle;
mod parallel;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
pub use ingest::{RawGraphDataset, RawRecord, SweepResult};
pub use mcem::{FitConfig, FitResult, LouisInfo, SufficientStats};
pub use model::{
    complete_loglik, devectorize_graph, gicc, probit_prob, vectorize_graph, BinaryGraphDataset,
    GraphShape, LatentState, ModelParams, SubjectGraphs,
};
pub use sampler::{GibbsConfig, Side, StreamSchedule, SubjectMoments};
