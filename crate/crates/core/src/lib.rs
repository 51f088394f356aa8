//! Mean-field dynamics of agents carrying a position and a label distribution.

pub mod ensemble;
pub mod explicit_scheme;
pub mod error;
pub mod fields;
pub mod harness;
pub mod label_geometry;
pub mod markov_geometry;
pub mod markov_prox;
mod lp;
pub mod par;
pub mod replicator_prox;
pub mod transport;

pub use error::{Error, Result};
