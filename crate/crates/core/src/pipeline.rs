//! Shared preparation steps: BN folding, quantizer insertion and calibration.

use crate::calibration::{calibrate_graph, CalibConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::graph::{fold_bn, insert_fake_quant_with, Graph};
use crate::quantizer::{BackendPreset, GraphPolicy};

/// How a float model becomes a fake-quantized one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prepare {
    pub preset: BackendPreset,
    /// Overrides the preset's placement policy.
    pub policy: Option<GraphPolicy>,
    /// Folding strategy; `None` follows the preset (strategy 0 when it folds).
    pub fold: Option<u8>,
}

impl Prepare {
    pub fn new(preset: BackendPreset) -> Self {
        Self {
            preset,
            policy: None,
            fold: None,
        }
    }

    pub fn fold_strategy(&self) -> Option<u8> {
        self.fold.or(self.preset.fold_bn.then_some(0))
    }

    /// Folds BN as configured and inserts fake-quant nodes (uncalibrated).
    pub fn apply(&self, g: &Graph) -> Result<Graph> {
        let g = match self.fold_strategy() {
            Some(s) => fold_bn(g, s)?,
            None => g.clone(),
        };
        insert_fake_quant_with(&g, &self.preset, self.policy.unwrap_or(self.preset.policy))
    }

    /// [`Prepare::apply`] followed by calibration on `data`.
    pub fn calibrated(&self, g: &Graph, data: &Dataset, cfg: &CalibConfig) -> Result<Graph> {
        calibrate_graph(&self.apply(g)?, data, cfg)
    }
}
