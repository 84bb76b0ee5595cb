//! Joint prediction of psychological constructs from multimodal sensor data.

pub mod domain;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod features;
pub mod hon;
pub mod impute;
pub mod ingest;
pub mod models;
pub mod par;
pub mod reduce;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
