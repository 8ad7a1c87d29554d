//! Semi-supervised glottal closure instant detection by analysis-synthesis.

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod gci_eval;
pub mod lf_model;
pub mod losses;
pub mod models;
pub mod trainer;

pub use error::{GciError, Result};
