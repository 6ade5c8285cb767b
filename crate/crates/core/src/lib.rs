//! Robust perception-based control through FIR system level synthesis.
//!
//! The crate covers the full pipeline: plant modelling ([`lti`]), FIR operator algebra and
//! controller realisation ([`fir`]), data-driven perception error profiles ([`error_model`]),
//! a dense LP solver ([`lp`]), the synthesis programs themselves ([`synthesis`]) and a closed-loop
//! quadrotor simulator with synthetic perception ([`sim`]).

pub mod error;
pub mod error_model;
pub mod exec;
pub mod experiment;
pub mod fir;
pub mod lp;
pub mod lti;
pub mod sim;
pub mod synthesis;
mod serde_matrix;

pub use error::{Error, Result};
