//! Lipschitz-bounded 1D convolutional networks.
//!
//! Every network built here is `ρ`-Lipschitz by construction: unconstrained
//! variables are mapped through Cayley transforms and controllability
//! Gramians to weights that satisfy a chain of layer-wise LMIs. The
//! certificate matrices fall out of the same construction and can be checked
//! independently with [`certify`].

pub mod cayley;
pub mod certify;
pub mod data;
pub mod error;
pub mod network;
pub mod numerics;
pub mod param;
pub mod robustness;
pub mod train;
pub mod statespace;

pub use error::{Error, Result};
