//! Change detection on bi-temporal imagery with fractal Tanimoto attention.

pub mod attention;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod ftnmt;
pub mod gradsuite;
pub mod inference;
pub mod mantis;
pub mod pipeline;
pub mod substrate;
pub mod trainer;

pub use error::{Error, Result};
