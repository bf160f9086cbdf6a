//! Workload directories: initial embeddings plus a manifest saying where each
//! layer's attention comes from.
//!
//! ```text
//! workload/
//!   manifest.json
//!   embeddings.npy        (tokens, width)
//!   attention_04.npy      file mode only: (heads, n, n) or (n, n)
//!   keys_04.npy           optional: (heads, n, width) or (n, width)
//! ```
//!
//! In synthetic mode attention is regenerated from the current embeddings with
//! the recorded projection seeds. In file mode each reducing layer needs a
//! tensor over exactly the tokens alive at that layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionView, Role, TokenWorkspace};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::pipeline::{AttentionSource, LayerAttention};
use crate::synth::{SynthParams, SyntheticAttention, SyntheticWorkload};
use crate::tensor_io::{read_tensor, write_tensor, TensorFile};

pub const MANIFEST: &str = "manifest.json";
pub const EMBEDDINGS: &str = "embeddings.npy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFiles {
    pub attention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AttentionSpec {
    Synthetic { projection_seeds: Vec<u64>, heads: usize },
    /// Keyed by layer index.
    Files { layers: BTreeMap<usize, LayerFiles> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadManifest {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_text: usize,
    pub cls: bool,
    pub width: usize,
    pub embeddings: String,
    pub attention: AttentionSpec,
    /// Generator seed, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planted: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planted_from: Vec<usize>,
}

/// A loaded workload: the initial workspace and its attention source.
pub struct Workload {
    pub manifest: WorkloadManifest,
    pub workspace: TokenWorkspace,
    pub source: Box<dyn AttentionSource>,
}

impl std::fmt::Debug for Workload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workload").field("manifest", &self.manifest).finish_non_exhaustive()
    }
}

impl Workload {
    pub fn from_synthetic(w: &SyntheticWorkload) -> Self {
        Self {
            manifest: synthetic_manifest(w),
            workspace: w.workspace.clone(),
            source: Box::new(SyntheticAttention::new(w)),
        }
    }
}

fn synthetic_manifest(w: &SyntheticWorkload) -> WorkloadManifest {
    let p: &SynthParams = &w.params;
    WorkloadManifest {
        grid_rows: p.grid_rows,
        grid_cols: p.grid_cols,
        num_text: p.num_text,
        cls: p.cls,
        width: p.width,
        embeddings: EMBEDDINGS.into(),
        attention: AttentionSpec::Synthetic {
            projection_seeds: w.projection_seeds.clone(),
            heads: p.heads,
        },
        seed: Some(p.seed),
        planted: w.planted.clone(),
        planted_from: w.planted_from.clone(),
    }
}

/// Writes `manifest.json` and `embeddings.npy` into `dir`, creating it.
pub fn save_synthetic(dir: impl AsRef<Path>, w: &SyntheticWorkload) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_tensor(dir.join(EMBEDDINGS), &TensorFile::from_matrix(w.workspace.embeddings()))?;
    write_manifest(dir, &synthetic_manifest(w))
}

pub fn write_manifest(dir: impl AsRef<Path>, manifest: &WorkloadManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(dir.as_ref().join(MANIFEST), text)?;
    Ok(())
}

/// Loads a workload from its directory or from the manifest path itself.
pub fn load_workload(path: impl AsRef<Path>) -> Result<Workload> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().map_or_else(PathBuf::new, Path::to_path_buf), path.to_path_buf())
    };
    let manifest: WorkloadManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let embeddings = read_tensor(dir.join(&manifest.embeddings))?.to_matrix()?;
    if embeddings.ncols() != manifest.width {
        return Err(Error::shape(format!(
            "embeddings have width {}, manifest says {}",
            embeddings.ncols(),
            manifest.width
        )));
    }
    let workspace = TokenWorkspace::new(
        embeddings,
        manifest.cls,
        manifest.grid_rows,
        manifest.grid_cols,
        manifest.num_text,
    )?;
    let source: Box<dyn AttentionSource> = match &manifest.attention {
        AttentionSpec::Synthetic { projection_seeds, heads } => {
            if *heads == 0 {
                return Err(Error::config("workload heads must be positive"));
            }
            Box::new(SyntheticAttention::from_seeds(projection_seeds.clone(), manifest.width, *heads))
        }
        AttentionSpec::Files { layers } => Box::new(FileAttention { dir, layers: layers.clone() }),
    };
    Ok(Workload { manifest, workspace, source })
}

/// Tokens an attention map covers for the variant: CLS and visual for the
/// encoder, everything alive for the decoder.
pub fn attention_layout(
    ws: &TokenWorkspace,
    variant: Variant,
) -> (crate::attention::Layout, Vec<usize>) {
    match variant {
        Variant::V => ws.layout_where(|r| r != Role::Text),
        Variant::L => ws.layout_where(|_| true),
    }
}

/// Precomputed per-layer attention read from npy files.
#[derive(Debug, Clone)]
pub struct FileAttention {
    dir: PathBuf,
    layers: BTreeMap<usize, LayerFiles>,
}

impl AttentionSource for FileAttention {
    fn layer_attention(
        &mut self,
        layer: usize,
        workspace: &TokenWorkspace,
        variant: Variant,
    ) -> Result<LayerAttention> {
        let files = self
            .layers
            .get(&layer)
            .ok_or_else(|| Error::config(format!("workload has no attention for layer {layer}")))?;
        let weights = read_tensor(self.dir.join(&files.attention))?.to_stack()?;
        let (layout, _) = attention_layout(workspace, variant);
        let n = layout.len();
        let (_, r, c) = weights.dim();
        if r != n || c != n {
            return Err(Error::shape(format!(
                "layer {layer}: attention is {r}x{c} but {n} tokens are alive"
            )));
        }
        let keys = match &files.keys {
            None => None,
            Some(name) => {
                let keys = read_tensor(self.dir.join(name))?.to_stack()?;
                if keys.dim().1 != n {
                    return Err(Error::shape(format!(
                        "layer {layer}: keys cover {} tokens but {n} are alive",
                        keys.dim().1
                    )));
                }
                Some(keys)
            }
        };
        let view = AttentionView::new(weights, layout, variant == Variant::L)?;
        Ok(LayerAttention { view, keys })
    }
}

/// Wraps a source and keeps every attention it hands out.
pub struct RecordingSource<'a> {
    inner: &'a mut dyn AttentionSource,
    pub recorded: BTreeMap<usize, LayerAttention>,
}

impl<'a> RecordingSource<'a> {
    pub fn new(inner: &'a mut dyn AttentionSource) -> Self {
        Self { inner, recorded: BTreeMap::new() }
    }

    /// Writes the recorded tensors and a file-mode manifest for `initial`.
    pub fn save(&self, dir: impl AsRef<Path>, initial: &TokenWorkspace, base: &WorkloadManifest) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_tensor(dir.join(EMBEDDINGS), &TensorFile::from_matrix(initial.embeddings()))?;
        let mut layers = BTreeMap::new();
        for (&layer, att) in &self.recorded {
            let attention = format!("attention_{layer:02}.npy");
            write_tensor(dir.join(&attention), &TensorFile::from_stack(att.view.stack()))?;
            let keys = match &att.keys {
                Some(k) => {
                    let name = format!("keys_{layer:02}.npy");
                    write_tensor(dir.join(&name), &TensorFile::from_stack(k))?;
                    Some(name)
                }
                None => None,
            };
            layers.insert(layer, LayerFiles { attention, keys });
        }
        let manifest = WorkloadManifest {
            embeddings: EMBEDDINGS.into(),
            attention: AttentionSpec::Files { layers },
            ..base.clone()
        };
        write_manifest(dir, &manifest)
    }
}

impl AttentionSource for RecordingSource<'_> {
    fn layer_attention(
        &mut self,
        layer: usize,
        workspace: &TokenWorkspace,
        variant: Variant,
    ) -> Result<LayerAttention> {
        let att = self.inner.layer_attention(layer, workspace, variant)?;
        self.recorded.insert(layer, att.clone());
        Ok(att)
    }
}
