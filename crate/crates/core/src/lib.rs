//! Latent normalizing-flow priors with an invertible shared-latent bridge for
//! many-to-many generation between two domains.

pub mod artifact;
pub mod autodiff;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flows;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synthia;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
