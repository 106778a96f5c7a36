//! Crowd trajectory forecasting with a hypergraph spatial-temporal
//! transformer.
//!
//! The pipeline turns an observed window of pedestrian positions into a set
//! of sampled futures:
//!
//! 1. pair-wise encoders ([`transformer`]) run masked attention across agents
//!    per timestep and across timesteps per agent;
//! 2. the group branch ([`hypergraph`]) builds multiscale KNN hypergraphs over
//!    trajectory embeddings and applies random-walk spectral convolution;
//! 3. [`fusion`] aligns the three feature sets with cross-modal attention;
//! 4. a CVAE head ([`cvae`]) samples latent codes and decodes displacements.
//!
//! Everything differentiable runs on the small reverse-mode engine in
//! [`tensor`].

// `!(x > 0.0)` checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod cvae;
pub mod data;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod hypergraph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use model::{HyperSttn, ModelConfig};
pub use tensor::{Tape, Tensor, TensorError, Var};
