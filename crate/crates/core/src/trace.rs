//! Per-layer reduction records and their JSON form.
//!
//! All token references are original indices, so records stay meaningful as
//! tokens are removed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::GridPos;
use crate::config::{CompressionMode, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub source: usize,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceivedMass {
    pub target: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub layer: usize,
    /// Set when the local penalty was applied to `scores`.
    pub local_penalty: bool,
    /// Set when text rows were read (decoder variant).
    pub text_bridge: bool,
    /// Visual tokens that were scored, with their final (post-penalty) scores.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub discarded: Vec<usize>,
    pub assignments: Vec<Assignment>,
    /// Targets that received anything.
    pub received_mass: Vec<ReceivedMass>,
}

impl LayerRecord {
    pub fn empty(layer: usize) -> Self {
        Self { layer, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionTrace {
    pub variant: Variant,
    pub compression: CompressionMode,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Original index of the visual token in grid cell (0, 0).
    pub first_visual_index: usize,
    pub layers: Vec<LayerRecord>,
}

impl ReductionTrace {
    pub fn num_visual(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_visual(&self, original: usize) -> bool {
        original >= self.first_visual_index && original < self.first_visual_index + self.num_visual()
    }

    /// Grid cell of a visual token given by original index.
    pub fn cell_of(&self, original: usize) -> Option<GridPos> {
        self.is_visual(original).then(|| {
            let v = original - self.first_visual_index;
            GridPos { row: v / self.grid_cols, col: v % self.grid_cols }
        })
    }

    pub fn total_discarded(&self) -> usize {
        self.layers.iter().map(|l| l.discarded.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let trace: Self = serde_json::from_str(text)?;
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        for rec in &self.layers {
            if rec.candidates.len() != rec.scores.len() {
                return Err(Error::Trace(format!(
                    "layer {}: {} candidates but {} scores",
                    rec.layer,
                    rec.candidates.len(),
                    rec.scores.len()
                )));
            }
            for a in &rec.assignments {
                if a.targets.len() != a.weights.len() {
                    return Err(Error::Trace(format!(
                        "layer {}: source {} has {} targets but {} weights",
                        rec.layer,
                        a.source,
                        a.targets.len(),
                        a.weights.len()
                    )));
                }
            }
            if rec
                .discarded
                .iter()
                .chain(rec.assignments.iter().flat_map(|a| &a.targets))
                .any(|&i| !self.is_visual(i))
            {
                return Err(Error::Trace(format!(
                    "layer {}: reference to a non-visual token",
                    rec.layer
                )));
            }
        }
        Ok(())
    }
}

pub fn write_trace(path: impl AsRef<Path>, trace: &ReductionTrace) -> Result<()> {
    fs::write(path, trace.to_json())?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<ReductionTrace> {
    ReductionTrace::from_json(&fs::read_to_string(path)?)
}
