//! Knowledge-graph embedding with stacked residual blocks whose outputs mix
//! learning functions of every non-linear order up to the network depth.
//!
//! The crate is organised bottom-up: [`numkernel`] provides dense matrices and
//! seeded randomness, [`layers`] the hand-differentiated building blocks,
//! [`model`] the full scorer, [`data`] triple ingestion and indices,
//! [`train`] the optimisation loop and [`eval`] filtered ranking.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod numkernel;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use layers::Mode;
pub use model::{DropoutSpec, FeatureBlockKind, Model, ModelConfig};
pub use numkernel::{Matrix, Precision, Rng, Scalar};
