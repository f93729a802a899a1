//! Versioned JSON snapshots of training state.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::TrainerState;
use crate::error::{Error, Result};
use crate::points::Points;
use crate::sm::SmState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdState {
    pub particles: Points,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Checkpoint {
    TrainDual { state: TrainerState },
    TrainSm { state: SmState },
    TrainMmd { state: MmdState },
}

impl Checkpoint {
    pub fn iteration(&self) -> u64 {
        match self {
            Checkpoint::TrainDual { state } => state.iteration,
            Checkpoint::TrainSm { state } => state.iteration,
            Checkpoint::TrainMmd { state } => state.iteration,
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    version: u32,
    checkpoint: &'a Checkpoint,
}

#[derive(Deserialize)]
struct Version {
    version: u32,
}

#[derive(Deserialize)]
struct Owned {
    checkpoint: Checkpoint,
}

pub fn to_json(cp: &Checkpoint) -> Result<String> {
    Ok(serde_json::to_string(&Envelope { version: CHECKPOINT_VERSION, checkpoint: cp })?)
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    let v: Version = serde_json::from_str(text)?;
    if v.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: v.version, expected: CHECKPOINT_VERSION });
    }
    let o: Owned = serde_json::from_str(text)?;
    Ok(o.checkpoint)
}

/// Writes through a temporary file so an interrupted save never leaves a
/// half-written checkpoint behind.
pub fn save(cp: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(to_json(cp)?.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Parse { path: path.to_path_buf(), message: j.to_string() },
        other => other,
    })
}
