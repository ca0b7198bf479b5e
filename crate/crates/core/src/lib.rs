//! Lipschitz-bounded neural controlled differential equations for
//! treatment-effect estimation on irregular, confounded time series.
//!
//! The crate bundles a seeded synthetic generator ([`sim`]), the model
//! branches ([`spectral`], [`cde`], [`outcome`]), the assembled model and its
//! ablations ([`model`]), the training and evaluation harness ([`train`],
//! [`metrics`], [`experiment`]) and file plumbing ([`io`]).

pub mod error;
pub mod experiment;
pub mod io;
pub mod nn;
pub mod sim;
pub mod spectral;
pub mod cde;
pub mod metrics;
pub mod model;
pub mod outcome;
pub mod tape;
pub mod train;

pub use error::{LipCdeError, Result};
