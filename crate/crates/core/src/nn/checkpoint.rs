//! Versioned checkpoint files: a magic header line followed by a JSON body.
//!
//! Floats are written as shortest round-trip decimals, so a save/load cycle is
//! bit-exact for `f64` stacks.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{ArchSpec, Layer, LayerStack};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &str = "OSTTA-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub seed: u64,
    pub layers: Vec<Layer<f64>>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(stack: &LayerStack<T>, seed: u64) -> Result<Self> {
        let arch = stack
            .arch()
            .ok_or_else(|| Error::Checkpoint("stack is not a Dense→BN→ReLU perceptron".into()))?;
        Ok(Self { arch, seed, layers: stack.cast::<f64>().layers().to_vec() })
    }

    pub fn stack<T: Scalar>(&self) -> Result<LayerStack<T>> {
        let stack = LayerStack::from_layers(self.layers.clone())?;
        if stack.arch().as_ref() != Some(&self.arch) {
            return Err(Error::Checkpoint("recorded architecture disagrees with the layers".into()));
        }
        Ok(stack.cast())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} v{FORMAT_VERSION}")?;
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let version = header
            .trim_end()
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().strip_prefix('v'))
            .ok_or_else(|| Error::Checkpoint("missing magic header".into()))?
            .parse::<u32>()
            .map_err(|_| Error::Checkpoint("unreadable format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        serde_json::from_reader(reader).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
