use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Dense, Mlp};
use crate::error::{Error, Result};

pub const MLP_FORMAT_VERSION: u32 = 1;

/// Textual network record: widths, activation, seed and every layer's
/// weight (row-major, `fan_in × fan_out`) and bias in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for MlpCheckpoint {
    fn from(net: &Mlp) -> Self {
        Self {
            format_version: MLP_FORMAT_VERSION,
            widths: net.widths().to_vec(),
            activation: net.activation(),
            seed: net.seed(),
            weights: net.layers().iter().map(|l| l.weight.clone()).collect(),
            biases: net.layers().iter().map(|l| l.bias.clone()).collect(),
        }
    }
}

impl MlpCheckpoint {
    pub fn into_mlp(self) -> Result<Mlp> {
        if self.format_version != MLP_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported network format version {}",
                self.format_version
            )));
        }
        if self.widths.len() != self.weights.len() + 1 || self.weights.len() != self.biases.len() {
            return Err(Error::Format("layer count does not match widths".into()));
        }
        let layers = self
            .widths
            .windows(2)
            .zip(self.weights.into_iter().zip(self.biases))
            .map(|(w, (weight, bias))| Dense {
                weight,
                bias,
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect();
        Mlp::from_layers(layers, self.activation, self.seed)
    }
}

impl Mlp {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MlpCheckpoint::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<MlpCheckpoint>(s)?.into_mlp()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
