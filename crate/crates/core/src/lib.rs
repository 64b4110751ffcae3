//! Machine-unlearning workbench built around a from-scratch toy transformer.

pub mod corpus;
pub mod driver;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod tracing;
pub mod unlearn;

pub use error::{Error, Result};
