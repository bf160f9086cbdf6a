//! Seeded synthetic workloads.
//!
//! Embeddings are unit Gaussians rounded to `f32`, so a workload written to
//! disk and read back is identical to the in-memory one. Each layer gets its
//! own projection seed. The key projection is a scaled copy of the query
//! projection plus an independent Gaussian part, so tokens attend
//! preferentially to similar tokens.

use ndarray::{Array2, Array3, Axis};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{matmul, softmax_scores, AttentionView, Role, TokenWorkspace};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::pipeline::{AttentionSource, LayerAttention};

/// `W_k = KEY_SHARE · W_q + KEY_NOISE · G` with `G` an independent Gaussian.
const KEY_SHARE: f64 = 0.35;
const KEY_NOISE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthParams {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_text: usize,
    pub width: usize,
    pub layers: usize,
    pub seed: u64,
    pub cls: bool,
    /// Attention heads generated per layer.
    pub heads: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { grid_rows: 24, grid_cols: 24, num_text: 32, width: 64, layers: 24, seed: 0, cls: true, heads: 1 }
    }
}

impl SynthParams {
    pub fn num_visual(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn num_tokens(&self) -> usize {
        usize::from(self.cls) + self.num_visual() + self.num_text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorkload {
    pub params: SynthParams,
    pub workspace: TokenWorkspace,
    pub projection_seeds: Vec<u64>,
    /// Original indices of planted near-duplicates, ascending.
    pub planted: Vec<usize>,
    /// `planted_from[k]` is the original index `planted[k]` was copied from.
    pub planted_from: Vec<usize>,
}

fn gaussian_f32(rng: &mut impl Rng) -> f64 {
    let v: f64 = rng.sample(StandardNormal);
    v as f32 as f64
}

pub fn gen_workload(params: &SynthParams) -> Result<SyntheticWorkload> {
    if params.width == 0 {
        return Err(Error::config("width must be positive"));
    }
    if params.heads == 0 {
        return Err(Error::config("heads must be positive"));
    }
    if params.num_visual() == 0 {
        return Err(Error::config("grid must contain at least one visual token"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let embeddings =
        Array2::from_shape_simple_fn((params.num_tokens(), params.width), || gaussian_f32(&mut rng));
    let projection_seeds = (0..params.layers).map(|_| rng.next_u64()).collect();
    let workspace =
        TokenWorkspace::new(embeddings, params.cls, params.grid_rows, params.grid_cols, params.num_text)?;
    Ok(SyntheticWorkload {
        params: params.clone(),
        workspace,
        projection_seeds,
        planted: Vec::new(),
        planted_from: Vec::new(),
    })
}

/// Replaces `duplicate_count` visual tokens by noisy copies of randomly chosen
/// other visual tokens, and records them as ground truth.
pub fn plant_redundancy(
    workload: &SyntheticWorkload,
    duplicate_count: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticWorkload> {
    let visual = workload.workspace.positions_of(Role::Visual);
    if duplicate_count >= visual.len() {
        return Err(Error::config(format!(
            "cannot plant {duplicate_count} duplicates among {} visual tokens",
            visual.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma must be a non-negative real"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, visual.len(), duplicate_count).into_vec();
    chosen.sort_unstable();
    let mut is_planted = vec![false; visual.len()];
    for &c in &chosen {
        is_planted[c] = true;
    }
    let survivors: Vec<usize> = (0..visual.len()).filter(|&v| !is_planted[v]).collect();

    let mut out = workload.clone();
    let ws = &workload.workspace;
    let mut rows = Vec::with_capacity(duplicate_count);
    let mut values = Array2::zeros((duplicate_count, ws.width()));
    let mut planted_from = Vec::with_capacity(duplicate_count);
    for (k, &c) in chosen.iter().enumerate() {
        let from = visual[survivors[rng.random_range(0..survivors.len())]];
        let src = ws.embeddings().row(from);
        for (d, v) in values.row_mut(k).iter_mut().enumerate() {
            *v = src[d] + noise_sigma * gaussian_f32(&mut rng);
            *v = *v as f32 as f64;
        }
        rows.push(visual[c]);
        planted_from.push(ws.original_index()[from]);
    }
    out.workspace.set_rows(&rows, &values)?;
    out.planted = rows.iter().map(|&r| ws.original_index()[r]).collect();
    out.planted_from = planted_from;
    Ok(out)
}

/// Query and key projections for one layer.
pub fn projections(seed: u64, width: usize) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (width as f64).sqrt();
    let wq = Array2::from_shape_simple_fn((width, width), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    });
    let noise = Array2::from_shape_simple_fn((width, width), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    });
    let wk = &wq * KEY_SHARE + &(noise * KEY_NOISE);
    (wq, wk)
}

/// Projection seeds of each head. Head 0 uses the layer seed itself.
fn head_seeds(seed: u64, heads: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::once(seed).chain(std::iter::repeat_with(|| rng.next_u64())).take(heads).collect()
}

/// Attention recomputed from the current embeddings with seeded projections.
///
/// The encoder variant attends over CLS and visual tokens; the decoder variant
/// attends causally over every alive token.
#[derive(Debug, Clone)]
pub struct SyntheticAttention {
    seeds: Vec<u64>,
    width: usize,
    heads: usize,
}

impl SyntheticAttention {
    pub fn new(workload: &SyntheticWorkload) -> Self {
        Self::from_seeds(workload.projection_seeds.clone(), workload.params.width, workload.params.heads)
    }

    pub fn from_seeds(seeds: Vec<u64>, width: usize, heads: usize) -> Self {
        Self { seeds, width, heads: heads.max(1) }
    }
}

impl AttentionSource for SyntheticAttention {
    fn layer_attention(
        &mut self,
        layer: usize,
        workspace: &TokenWorkspace,
        variant: Variant,
    ) -> Result<LayerAttention> {
        let seed = *self.seeds.get(layer).ok_or_else(|| {
            Error::config(format!("workload has projections for {} layers, run needs layer {layer}", self.seeds.len()))
        })?;
        if workspace.width() != self.width {
            return Err(Error::shape("workspace width differs from the projection width"));
        }
        let (layout, rows) = match variant {
            Variant::V => workspace.layout_where(|r| r != Role::Text),
            Variant::L => workspace.layout_where(|_| true),
        };
        let causal = variant == Variant::L;
        let x = workspace.select_rows(&rows);
        let n = rows.len();
        let mut weights = Array3::zeros((self.heads, n, n));
        let mut keys = Array3::zeros((self.heads, n, self.width));
        for (h, head_seed) in head_seeds(seed, self.heads).into_iter().enumerate() {
            let (wq, wk) = projections(head_seed, self.width);
            let q = matmul(&x, &wq)?;
            let k = matmul(&x, &wk)?;
            weights.index_axis_mut(Axis(0), h).assign(&softmax_scores(&q, &k, causal)?);
            keys.index_axis_mut(Axis(0), h).assign(&k);
        }
        let view = AttentionView::new(weights, layout, causal)?;
        Ok(LayerAttention { view, keys: Some(keys) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthParams {
        SynthParams { grid_rows: 8, grid_cols: 8, num_text: 4, width: 16, layers: 3, seed, cls: true, heads: 1 }
    }

    #[test]
    fn deterministic_from_seed() {
        let a = gen_workload(&small(5)).unwrap();
        let b = gen_workload(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.workspace, gen_workload(&small(6)).unwrap().workspace);
    }

    #[test]
    fn embeddings_are_f32_exact() {
        let a = gen_workload(&small(1)).unwrap();
        assert!(a.workspace.embeddings().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn encoder_workloads_may_skip_text() {
        let p = SynthParams { num_text: 0, ..small(2) };
        assert_eq!(gen_workload(&p).unwrap().workspace.count(Role::Text), 0);
    }

    #[test]
    fn exact_copies_without_noise() {
        let p = SynthParams { grid_rows: 8, grid_cols: 8, ..small(3) };
        let w = plant_redundancy(&gen_workload(&p).unwrap(), 8, 0.0, 11).unwrap();
        assert_eq!(w.planted.len(), 8);
        let ws = &w.workspace;
        for (&dup, &from) in w.planted.iter().zip(&w.planted_from) {
            assert!(!w.planted.contains(&from));
            let a = ws.embeddings().row(ws.position_of_original(dup).unwrap()).to_owned();
            let b = ws.embeddings().row(ws.position_of_original(from).unwrap()).to_owned();
            assert_eq!(a, b);
        }
        assert!(plant_redundancy(&w, 64, 0.0, 1).is_err());
    }

    #[test]
    fn generated_attention_is_stochastic() {
        let w = gen_workload(&small(9)).unwrap();
        let mut src = SyntheticAttention::new(&w);
        for variant in [Variant::V, Variant::L] {
            let att = src.layer_attention(0, &w.workspace, variant).unwrap();
            let (err, bad) = att.view.stochasticity_error();
            assert!(err < 1e-6 && !bad, "{variant:?}: {err}");
        }
    }

    #[test]
    fn multi_head_stack() {
        let w = gen_workload(&SynthParams { heads: 12, grid_rows: 2, grid_cols: 4, ..small(7) }).unwrap();
        let att = SyntheticAttention::new(&w).layer_attention(0, &w.workspace, Variant::V).unwrap();
        assert_eq!(att.view.stack().dim(), (12, 9, 9));
        assert_eq!(att.keys.unwrap().dim(), (12, 9, 16));
        // head 0 is the single-head attention
        let single = SyntheticAttention::from_seeds(w.projection_seeds.clone(), 16, 1)
            .layer_attention(0, &w.workspace, Variant::V)
            .unwrap();
        assert_eq!(single.view.stack().index_axis(Axis(0), 0), att.view.stack().index_axis(Axis(0), 0));
    }
}
