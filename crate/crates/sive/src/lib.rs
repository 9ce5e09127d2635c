//! Saturated instrumental-variable estimation: file formats, the command
//! line front end, a dense reference implementation, estimators on explicit
//! design matrices, and a Monte Carlo harness. The numerical core lives in
//! [`sive_core`].

pub mod app;
mod error;
pub mod generic;
pub mod io;
pub mod reference;
pub mod simulation;

pub use error::{Error, Result};
pub use sive_core;
