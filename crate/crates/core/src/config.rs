//! Run configuration: hyperparameters, schedule, and ablation switches.
//!
//! The on-disk form is a JSON object. Every key is optional; omitted keys take
//! their defaults and unknown keys are rejected. See `docs/config.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.35;
pub const DEFAULT_BETA: f64 = 0.6;
pub const DEFAULT_GAMMA: f64 = 0.6;
pub const DEFAULT_EPSILON: f64 = 0.998;
pub const DEFAULT_PENALTY_COEFFICIENT: f64 = 2.0;
pub const DEFAULT_WINDOW_SIZE: usize = 2;
pub const DEFAULT_GRID: usize = 24;
pub const DEFAULT_KEEP_BUDGET: usize = 64;

/// Which side of the model the reduction runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Vision encoder: bidirectional attention, CLS-anchored scores, local penalty.
    V,
    /// Language decoder: causal attention, text-anchored scores and correlations.
    L,
}

impl Variant {
    pub fn default_start_layer(self) -> usize {
        match self {
            Variant::V => 12,
            Variant::L => 4,
        }
    }

    pub fn default_num_layers(self) -> usize {
        match self {
            Variant::V => 24,
            Variant::L => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    ClsRow,
    KeyMeanEquivalent,
}

/// How sources are connected to targets in the correlate stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Token-wise quantile thresholds (many-to-many).
    Adaptive,
    /// Top-K per source; K = 0 degenerates to pruning.
    FixedK(usize),
    /// Each source feeds only its argmax target.
    ManyToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    Weighted,
    Average,
}

/// Reading of the visual-visual term of the redundancy score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyRead {
    /// Mean of row i of the visual block (attention token i gives).
    Row,
    /// Mean of column i of the visual block (attention token i receives).
    Column,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscardPlan {
    PerLayer(Vec<usize>),
    KeepBudget(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub window_size: usize,
    pub penalty_coefficient: f64,
    pub start_layer: usize,
    pub num_layers: usize,
    pub discard: DiscardPlan,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
    pub cls_mode: ClsMode,
    pub assignment: AssignmentMode,
    pub compression: CompressionMode,
    pub local_penalty: bool,
    pub redundancy_read: RedundancyRead,
    /// Feed-forward width for the cost summary; `None` means four times the embedding width.
    pub ffn_width: Option<usize>,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self::for_variant(Variant::V)
    }
}

impl ReductionConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            window_size: DEFAULT_WINDOW_SIZE,
            penalty_coefficient: DEFAULT_PENALTY_COEFFICIENT,
            start_layer: variant.default_start_layer(),
            num_layers: variant.default_num_layers(),
            discard: DiscardPlan::KeepBudget(DEFAULT_KEEP_BUDGET),
            grid_rows: DEFAULT_GRID,
            grid_cols: DEFAULT_GRID,
            seed: 0,
            cls_mode: ClsMode::ClsRow,
            assignment: AssignmentMode::Adaptive,
            compression: CompressionMode::Weighted,
            local_penalty: variant == Variant::V,
            redundancy_read: RedundancyRead::Row,
            ffn_width: None,
        }
    }

    pub fn num_visual(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let cfg = raw.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawConfig::from(self)).expect("config serializes")
    }

    /// Checks every invariant that does not depend on a workload.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("beta", self.beta)?;
        unit("gamma", self.gamma)?;
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config(format!("epsilon = {} outside (0, 1]", self.epsilon)));
        }
        if self.window_size == 0 {
            return Err(Error::config("window_size must be positive"));
        }
        if !(self.penalty_coefficient.is_finite() && self.penalty_coefficient > 0.0) {
            return Err(Error::config(format!(
                "penalty_coefficient = {} must be a positive real",
                self.penalty_coefficient
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be positive"));
        }
        if self.start_layer >= self.num_layers {
            return Err(Error::config(format!(
                "start_layer {} must be below num_layers {}",
                self.start_layer, self.num_layers
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::config("grid dimensions must be positive"));
        }
        if self.variant == Variant::L && self.local_penalty {
            return Err(Error::config("local_penalty is only available for variant V"));
        }
        if self.ffn_width == Some(0) {
            return Err(Error::config("ffn_width must be positive"));
        }
        let n = self.num_visual();
        match &self.discard {
            DiscardPlan::KeepBudget(k) if *k > n => Err(Error::config(format!(
                "keep_budget {k} exceeds grid token count {n}"
            ))),
            DiscardPlan::PerLayer(v) => {
                if v.len() != self.num_layers {
                    return Err(Error::config(format!(
                        "per_layer_discard has {} entries, num_layers is {}",
                        v.len(),
                        self.num_layers
                    )));
                }
                if v[..self.start_layer].iter().any(|&d| d != 0) {
                    return Err(Error::config("per_layer_discard must be zero before start_layer"));
                }
                let total: usize = v.iter().sum();
                if total > n {
                    return Err(Error::config(format!(
                        "per_layer_discard removes {total} tokens, grid has {n}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Checks the grid against the number of visual tokens in a workload.
    pub fn validate_against(&self, num_visual: usize) -> Result<()> {
        if self.num_visual() != num_visual {
            return Err(Error::config(format!(
                "grid {}x{} does not match {num_visual} visual tokens",
                self.grid_rows, self.grid_cols
            )));
        }
        Ok(())
    }
}

/// Unreadable files are reported as config errors, not I/O errors.
pub fn read_config(path: impl AsRef<Path>) -> Result<ReductionConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    ReductionConfig::from_json(&text)
}

pub fn write_config(path: impl AsRef<Path>, cfg: &ReductionConfig) -> Result<()> {
    fs::write(path, cfg.to_json() + "\n")?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<Variant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    penalty_coefficient: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    start_layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_layer_discard: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keep_budget: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_mode: Option<ClsMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<AssignmentMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compression: Option<CompressionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_penalty: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    redundancy_read: Option<RedundancyRead>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ffn_width: Option<usize>,
}

impl RawConfig {
    fn resolve(self) -> Result<ReductionConfig> {
        let variant = self.variant.unwrap_or(Variant::V);
        let base = ReductionConfig::for_variant(variant);
        let discard = match (self.per_layer_discard, self.keep_budget) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "per_layer_discard and keep_budget are mutually exclusive",
                ))
            }
            (Some(v), None) => DiscardPlan::PerLayer(v),
            (None, Some(k)) => DiscardPlan::KeepBudget(k),
            (None, None) => base.discard.clone(),
        };
        Ok(ReductionConfig {
            variant,
            lambda: self.lambda.unwrap_or(base.lambda),
            beta: self.beta.unwrap_or(base.beta),
            gamma: self.gamma.unwrap_or(base.gamma),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            window_size: self.window_size.unwrap_or(base.window_size),
            penalty_coefficient: self.penalty_coefficient.unwrap_or(base.penalty_coefficient),
            start_layer: self.start_layer.unwrap_or(base.start_layer),
            num_layers: self.num_layers.unwrap_or(base.num_layers),
            discard,
            grid_rows: self.grid_rows.unwrap_or(base.grid_rows),
            grid_cols: self.grid_cols.unwrap_or(base.grid_cols),
            seed: self.seed.unwrap_or(base.seed),
            cls_mode: self.cls_mode.unwrap_or(base.cls_mode),
            assignment: self.assignment.unwrap_or(base.assignment),
            compression: self.compression.unwrap_or(base.compression),
            local_penalty: self.local_penalty.unwrap_or(base.local_penalty),
            redundancy_read: self.redundancy_read.unwrap_or(base.redundancy_read),
            ffn_width: self.ffn_width.or(base.ffn_width),
        })
    }
}

impl From<&ReductionConfig> for RawConfig {
    fn from(c: &ReductionConfig) -> Self {
        let (per_layer_discard, keep_budget) = match &c.discard {
            DiscardPlan::PerLayer(v) => (Some(v.clone()), None),
            DiscardPlan::KeepBudget(k) => (None, Some(*k)),
        };
        Self {
            variant: Some(c.variant),
            lambda: Some(c.lambda),
            beta: Some(c.beta),
            gamma: Some(c.gamma),
            epsilon: Some(c.epsilon),
            window_size: Some(c.window_size),
            penalty_coefficient: Some(c.penalty_coefficient),
            start_layer: Some(c.start_layer),
            num_layers: Some(c.num_layers),
            per_layer_discard,
            keep_budget,
            grid_rows: Some(c.grid_rows),
            grid_cols: Some(c.grid_cols),
            seed: Some(c.seed),
            cls_mode: Some(c.cls_mode),
            assignment: Some(c.assignment),
            compression: Some(c.compression),
            local_penalty: Some(c.local_penalty),
            redundancy_read: Some(c.redundancy_read),
            ffn_width: c.ffn_width,
        }
    }
}
