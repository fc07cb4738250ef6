//! Neural network: a small reverse-mode autodiff engine, layers, the three
//! modality encoders, fusion and decoding, and checkpoints.

pub mod attention;
pub mod divr;
pub mod ecc;
pub mod layers;
pub mod params;
pub mod perceiver;
pub mod pointnet;
pub mod tape;
pub mod tensor;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use divr::{Branch, DivrModel, ForwardVars, ModelConfig, ModelInput, Prediction, Preset, Variant};
pub use ecc::{EncodedFrame, EncodedGraph};
pub use params::{ParamRecord, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Matrix;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "divr-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    variant: Variant,
    config: ModelConfig,
}

impl DivrModel {
    /// JSON lines: a header with variant and config, then one record per
    /// parameter in registration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            variant: self.variant,
            config: self.config,
        };
        let mut write_line = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
        write_line(serde_json::to_string(&header)?)?;
        for rec in self.params.to_records() {
            write_line(serde_json::to_string(&rec)?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Schema(format!("{}: empty checkpoint", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&first)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "{}: checkpoint format `{}`, expected `{CHECKPOINT_FORMAT}`",
                path.display(),
                header.format
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str::<ParamRecord>(&line)?);
            }
        }
        // seed is irrelevant: every value is overwritten
        let mut model = DivrModel::new(header.config, header.variant, 0)?;
        model.params.load_records(records)?;
        Ok(model)
    }
}
