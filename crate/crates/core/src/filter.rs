//! Filter stage: redundancy scores, local penalty, and source selection.
//!
//! Scores are indexed by the alive visual tokens in ascending original index.
//! Higher means more redundant; the top `n` are discarded.

use std::cmp::Ordering;

use ndarray::{Array2, Array3, Axis};

use crate::attention::{GridPos, Layout, Role};
use crate::config::{RedundancyRead, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyScores {
    pub values: Vec<f64>,
    pub variant: Variant,
}

impl RedundancyScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Discarded (`source`) and preserved (`target`) positions among the scored tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceTargetSplit {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Mean of row `i` (or column `i`) of a square block, summed in ascending order.
fn block_means(block: &Array2<f64>, read: RedundancyRead) -> Vec<f64> {
    let n = block.nrows();
    let axis = match read {
        RedundancyRead::Row => Axis(0),
        RedundancyRead::Column => Axis(1),
    };
    block
        .axis_iter(axis)
        .map(|lane| lane.iter().fold(0.0, |acc, &v| acc + v) / n as f64)
        .collect()
}

fn check_square(a_vv: &Array2<f64>) -> Result<usize> {
    if a_vv.nrows() != a_vv.ncols() {
        return Err(Error::shape(format!("visual block {:?} is not square", a_vv.shape())));
    }
    Ok(a_vv.nrows())
}

/// Encoder-side score: `λ · mean_j A[i,j] − (1 − λ) · anchor[i]`.
///
/// `anchor` is the CLS row over visual columns, or its key-mean substitute.
pub fn score_v(a_vv: &Array2<f64>, anchor: &[f64], lambda: f64) -> Result<RedundancyScores> {
    score_v_read(a_vv, anchor, lambda, RedundancyRead::Row)
}

pub fn score_v_read(
    a_vv: &Array2<f64>,
    anchor: &[f64],
    lambda: f64,
    read: RedundancyRead,
) -> Result<RedundancyScores> {
    let n = check_square(a_vv)?;
    if anchor.len() != n {
        return Err(Error::shape(format!(
            "anchor has {} entries for {n} visual tokens",
            anchor.len()
        )));
    }
    let values = block_means(a_vv, read)
        .into_iter()
        .zip(anchor)
        .map(|(m, &a)| lambda * m - (1.0 - lambda) * a)
        .collect();
    Ok(RedundancyScores { values, variant: Variant::V })
}

/// Decoder-side score: `β · mean_j A[i,j] − (1 − β) · mean_k A_tv[k,i]`.
///
/// The second term is the attention visual token `i` receives from the text rows.
pub fn score_l(a_vv: &Array2<f64>, a_tv: &Array2<f64>, beta: f64) -> Result<RedundancyScores> {
    score_l_read(a_vv, a_tv, beta, RedundancyRead::Row)
}

pub fn score_l_read(
    a_vv: &Array2<f64>,
    a_tv: &Array2<f64>,
    beta: f64,
    read: RedundancyRead,
) -> Result<RedundancyScores> {
    let n = check_square(a_vv)?;
    let m = a_tv.nrows();
    if m == 0 {
        return Err(Error::NoText);
    }
    if a_tv.ncols() != n {
        return Err(Error::shape(format!(
            "text block has {} columns for {n} visual tokens",
            a_tv.ncols()
        )));
    }
    let values = block_means(a_vv, read)
        .into_iter()
        .zip(a_tv.axis_iter(Axis(1)))
        .map(|(mean, col)| {
            let received = col.iter().fold(0.0, |acc, &v| acc + v) / m as f64;
            beta * mean - (1.0 - beta) * received
        })
        .collect();
    Ok(RedundancyScores { values, variant: Variant::L })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// CLS-free anchor: negative cosine similarity between each visual key and the
/// mean visual key, with keys first averaged over heads.
///
/// `keys` is `(heads, tokens, width)` over the tokens of `layout`. Zero-norm
/// vectors give a cosine of 0.
pub fn key_mean_equivalent(keys: &Array3<f64>, layout: &Layout) -> Result<Vec<f64>> {
    let (h, t, d) = keys.dim();
    if t != layout.len() {
        return Err(Error::shape(format!(
            "keys cover {t} tokens, layout has {}",
            layout.len()
        )));
    }
    if h == 0 || d == 0 {
        return Err(Error::shape("keys need at least one head and positive width"));
    }
    let visual = layout.positions_of(Role::Visual);
    if visual.is_empty() {
        return Err(Error::shape("no visual tokens to compare against"));
    }
    let mean_keys = keys.mean_axis(Axis(0)).expect("non-empty head axis");
    let patches = mean_keys.select(Axis(0), &visual);
    let mu = patches.mean_axis(Axis(0)).expect("non-empty patch axis").to_vec();
    Ok(patches
        .outer_iter()
        .map(|p| -cosine(&mu, &p.to_vec()))
        .collect())
}

/// Scales the maximum alive score of every `window × window` tile by `coefficient`.
///
/// `cells[i]` is the grid cell of scored token `i`. Cells without a scored
/// token act as `-inf` padding and never win a tile. Edge tiles may be smaller
/// than the window. Ties go to the lower token index.
pub fn local_penalty(
    scores: &[f64],
    cells: &[GridPos],
    grid: (usize, usize),
    window: usize,
    coefficient: f64,
) -> Result<Vec<f64>> {
    let (rows, cols) = grid;
    if scores.len() != cells.len() {
        return Err(Error::shape("every score needs a grid cell"));
    }
    if window == 0 {
        return Err(Error::config("window_size must be positive"));
    }
    let mut owner: Vec<Option<usize>> = vec![None; rows * cols];
    for (i, c) in cells.iter().enumerate() {
        if c.row >= rows || c.col >= cols {
            return Err(Error::shape(format!("cell ({}, {}) outside grid", c.row, c.col)));
        }
        let slot = &mut owner[c.row * cols + c.col];
        if slot.is_some() {
            return Err(Error::shape(format!("cell ({}, {}) assigned twice", c.row, c.col)));
        }
        *slot = Some(i);
    }

    let mut out = scores.to_vec();
    for tile_r in (0..rows).step_by(window) {
        for tile_c in (0..cols).step_by(window) {
            let mut best: Option<usize> = None;
            for r in tile_r..(tile_r + window).min(rows) {
                for c in tile_c..(tile_c + window).min(cols) {
                    let Some(i) = owner[r * cols + c] else { continue };
                    best = match best {
                        Some(b) if scores[b] > scores[i] || (scores[b] == scores[i] && b < i) => {
                            Some(b)
                        }
                        _ => Some(i),
                    };
                }
            }
            if let Some(b) = best {
                out[b] = scores[b] * coefficient;
            }
        }
    }
    Ok(out)
}

/// Picks the `n_discard` highest scores as sources; ties go to the lower index.
pub fn select_discarded(scores: &[f64], n_discard: usize) -> Result<SourceTargetSplit> {
    if n_discard > scores.len() {
        return Err(Error::Budget(format!(
            "cannot discard {n_discard} of {} visual tokens",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut source = order[..n_discard].to_vec();
    let mut target = order[n_discard..].to_vec();
    source.sort_unstable();
    target.sort_unstable();
    Ok(SourceTargetSplit { source, target })
}
