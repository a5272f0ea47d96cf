//! Deterministic uncertainty models: an MLP encoder feeding either a
//! normalizing-flow evidential head or a sparse variational GP head, plus the
//! data pipeline, training phases and evaluation metrics around them.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flows;
pub mod gp;
pub mod model;
pub mod natpn;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
