//! Filter, correlate and compress token reduction over attention maps.
//!
//! The encoder variant (`Variant::V`) scores visual tokens from visual-visual
//! attention and the CLS row; the decoder variant (`Variant::L`) uses text
//! attention instead and bridges correlations through the text rows. Each
//! reducing layer discards the highest-scoring visual tokens and folds their
//! embeddings into correlated survivors.
//!
//! ```no_run
//! use ficoco::{gen_workload, run, ReductionConfig, SynthParams, SyntheticAttention};
//!
//! let w = gen_workload(&SynthParams::default()).unwrap();
//! let cfg = ReductionConfig::default();
//! let out = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
//! assert_eq!(out.summary.final_visual, 64);
//! ```

pub mod attention;
pub mod compress;
pub mod config;
pub mod correlate;
pub mod error;
pub mod filter;
pub mod flops;
pub mod pipeline;
pub mod synth;
pub mod tensor_io;
pub mod trace;
pub mod workload;

pub use attention::{AttentionView, GridPos, Layout, Role, TokenWorkspace};
pub use config::{
    read_config, write_config, AssignmentMode, ClsMode, CompressionMode, DiscardPlan,
    RedundancyRead, ReductionConfig, Variant,
};
pub use correlate::CorrelationPlan;
pub use error::{Error, Result};
pub use filter::{RedundancyScores, SourceTargetSplit};
pub use pipeline::{plan_schedule, replay, run, AttentionSource, LayerAttention, RunOutput, RunSummary, Schedule};
pub use synth::{gen_workload, plant_redundancy, SynthParams, SyntheticAttention, SyntheticWorkload};
pub use trace::{read_trace, write_trace, LayerRecord, ReductionTrace};
