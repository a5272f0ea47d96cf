//! Versioned JSON snapshots of a model. Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    model: Model,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let env = Envelope { version: CHECKPOINT_VERSION, model: model.clone() };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &env)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let env: Envelope = serde_json::from_reader(f)?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            env.version
        )));
    }
    Ok(env.model)
}
