//! Token layout and attention maps.
//!
//! A [`TokenWorkspace`] owns the live token embeddings and their bookkeeping;
//! an [`AttentionView`] is one layer's attention over some subset of those
//! tokens. The block accessors copy raw softmax mass and never renormalize.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cls,
    Visual,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

/// Roles and original indices of the tokens an attention map covers, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    pub roles: Vec<Role>,
    pub original_index: Vec<usize>,
}

impl Layout {
    pub fn new(roles: Vec<Role>, original_index: Vec<usize>) -> Result<Self> {
        if roles.len() != original_index.len() {
            return Err(Error::shape("layout roles and indices differ in length"));
        }
        Ok(Self { roles, original_index })
    }

    /// Layout of consecutive tokens with the given roles, indexed from zero.
    pub fn from_roles(roles: Vec<Role>) -> Self {
        let original_index = (0..roles.len()).collect();
        Self { roles, original_index }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn positions_of(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cls_position(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == Role::Cls)
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }
}

/// Live tokens of one run.
///
/// Rows of `embeddings` are the alive tokens in ascending original index.
/// The CLS token, when present, has original index 0; visual tokens follow in
/// row-major grid order, then text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWorkspace {
    embeddings: Array2<f64>,
    roles: Vec<Role>,
    original_index: Vec<usize>,
    grid_pos: Vec<Option<GridPos>>,
    alive: Vec<bool>,
    grid_rows: usize,
    grid_cols: usize,
}

impl TokenWorkspace {
    /// Builds the standard layout `[CLS?] visual(row-major) text` for a fresh run.
    pub fn new(
        embeddings: Array2<f64>,
        has_cls: bool,
        grid_rows: usize,
        grid_cols: usize,
        num_text: usize,
    ) -> Result<Self> {
        let num_visual = grid_rows * grid_cols;
        let total = usize::from(has_cls) + num_visual + num_text;
        if embeddings.nrows() != total {
            return Err(Error::shape(format!(
                "embeddings have {} rows, layout needs {total}",
                embeddings.nrows()
            )));
        }
        if embeddings.ncols() == 0 {
            return Err(Error::shape("embedding width must be positive"));
        }
        let mut roles = Vec::with_capacity(total);
        let mut grid_pos = Vec::with_capacity(total);
        if has_cls {
            roles.push(Role::Cls);
            grid_pos.push(None);
        }
        for v in 0..num_visual {
            roles.push(Role::Visual);
            grid_pos.push(Some(GridPos { row: v / grid_cols, col: v % grid_cols }));
        }
        for _ in 0..num_text {
            roles.push(Role::Text);
            grid_pos.push(None);
        }
        Ok(Self {
            embeddings,
            roles,
            original_index: (0..total).collect(),
            grid_pos,
            alive: vec![true; total],
            grid_rows,
            grid_cols,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn original_index(&self) -> &[usize] {
        &self.original_index
    }

    pub fn grid_pos(&self) -> &[Option<GridPos>] {
        &self.grid_pos
    }

    /// Alive mask over the original index space.
    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }

    pub fn has_cls(&self) -> bool {
        self.roles.first() == Some(&Role::Cls)
    }

    /// Row positions of alive tokens with the given role.
    pub fn positions_of(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row position of the alive token with this original index.
    pub fn position_of_original(&self, original: usize) -> Option<usize> {
        self.original_index.binary_search(&original).ok()
    }

    /// Layout (and row positions) of alive tokens whose role passes `keep`.
    pub fn layout_where(&self, keep: impl Fn(Role) -> bool) -> (Layout, Vec<usize>) {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.roles[i])).collect();
        let layout = Layout {
            roles: rows.iter().map(|&i| self.roles[i]).collect(),
            original_index: rows.iter().map(|&i| self.original_index[i]).collect(),
        };
        (layout, rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Array2<f64> {
        self.embeddings.select(Axis(0), rows)
    }

    /// Overwrites the embedding rows at `rows` with the rows of `values`.
    pub fn set_rows(&mut self, rows: &[usize], values: &Array2<f64>) -> Result<()> {
        if values.nrows() != rows.len() || values.ncols() != self.width() {
            return Err(Error::shape(format!(
                "cannot write {}x{} values into {} rows of width {}",
                values.nrows(),
                values.ncols(),
                rows.len(),
                self.width()
            )));
        }
        for (k, &r) in rows.iter().enumerate() {
            self.embeddings.row_mut(r).assign(&values.row(k));
        }
        Ok(())
    }

    /// Drops the tokens at the given row positions and marks them dead.
    pub fn remove(&mut self, rows: &[usize]) {
        if rows.is_empty() {
            return;
        }
        let mut drop = vec![false; self.len()];
        for &r in rows {
            drop[r] = true;
            self.alive[self.original_index[r]] = false;
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !drop[i]).collect();
        self.embeddings = self.embeddings.select(Axis(0), &keep);
        self.roles = keep.iter().map(|&i| self.roles[i]).collect();
        self.original_index = keep.iter().map(|&i| self.original_index[i]).collect();
        self.grid_pos = keep.iter().map(|&i| self.grid_pos[i]).collect();
    }
}

/// One layer's attention over the tokens of `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionView {
    /// `(heads, n, n)`; a single-head map has one leading slice.
    weights: Array3<f64>,
    layout: Layout,
    causal: bool,
}

impl AttentionView {
    pub fn new(weights: Array3<f64>, layout: Layout, causal: bool) -> Result<Self> {
        let (_, r, c) = weights.dim();
        if r != c || r != layout.len() {
            return Err(Error::shape(format!(
                "attention of shape {:?} does not cover a layout of {} tokens",
                weights.shape(),
                layout.len()
            )));
        }
        if weights.dim().0 == 0 {
            return Err(Error::shape("attention has no heads"));
        }
        Ok(Self { weights, layout, causal })
    }

    pub fn single(weights: Array2<f64>, layout: Layout, causal: bool) -> Result<Self> {
        Self::new(weights.insert_axis(Axis(0)), layout, causal)
    }

    pub fn heads(&self) -> usize {
        self.weights.dim().0
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn stack(&self) -> &Array3<f64> {
        &self.weights
    }

    /// The attention matrix of a single-head view.
    pub fn matrix(&self) -> Result<ArrayView2<'_, f64>> {
        if self.heads() != 1 {
            return Err(Error::shape(format!(
                "view has {} heads; average them with head_mean first",
                self.heads()
            )));
        }
        Ok(self.weights.index_axis(Axis(0), 0))
    }

    /// Largest deviation of any row from unit mass over its permitted columns,
    /// together with a flag for entries outside [0, 1].
    pub fn stochasticity_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut out_of_range = false;
        for head in self.weights.outer_iter() {
            for (i, row) in head.outer_iter().enumerate() {
                let limit = if self.causal { i + 1 } else { row.len() };
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&v) || (j >= limit && v != 0.0) {
                        out_of_range = true;
                    }
                    sum += v;
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
        (worst, out_of_range)
    }
}

/// Deterministic matrix product: fixed summation order, no runtime kernel dispatch.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.nrows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let aip = a_s[i * k + p];
            let brow = &b_s[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    Ok(Array2::from_shape_vec((n, m), out).expect("sized above"))
}

/// Row-wise softmax of `Q Kᵀ / √d` where `d` is the key width.
///
/// With `causal`, entries above the diagonal are masked to exactly zero.
pub fn softmax_scores(q: &Array2<f64>, k: &Array2<f64>, causal: bool) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() || q.nrows() != k.nrows() {
        return Err(Error::shape(format!(
            "query {:?} and key {:?} shapes differ",
            q.shape(),
            k.shape()
        )));
    }
    let n = q.nrows();
    let d = q.ncols();
    if n == 0 || d == 0 {
        return Err(Error::shape("attention needs at least one token and positive width"));
    }
    let q = q.as_standard_layout();
    let k = k.as_standard_layout();
    let q_s = q.as_slice().expect("standard layout");
    let k_s = k.as_slice().expect("standard layout");
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let qi = &q_s[i * d..(i + 1) * d];
        let limit = if causal { i + 1 } else { n };
        let mut max = f64::NEG_INFINITY;
        for (j, slot) in row.iter_mut().enumerate().take(limit) {
            let kj = &k_s[j * d..(j + 1) * d];
            let mut dot = 0.0;
            for (a, b) in qi.iter().zip(kj) {
                dot += a * b;
            }
            *slot = dot * scale;
            max = max.max(*slot);
        }
        let mut sum = 0.0;
        for slot in row.iter_mut().take(limit) {
            *slot = (*slot - max).exp();
            sum += *slot;
        }
        for slot in row.iter_mut().take(limit) {
            *slot /= sum;
        }
    });
    Ok(Array2::from_shape_vec((n, n), out).expect("sized above"))
}

/// `Softmax(Q Kᵀ / √D)` with `Q = X Wq`, `K = X Wk`.
pub fn attention_from_projections(
    x: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    layout: Layout,
    causal: bool,
) -> Result<AttentionView> {
    if x.nrows() == 0 {
        return Err(Error::shape("no tokens to attend over"));
    }
    if wq.nrows() != x.ncols() || wk.nrows() != x.ncols() {
        return Err(Error::shape(format!(
            "projections {:?}/{:?} do not match embedding width {}",
            wq.shape(),
            wk.shape(),
            x.ncols()
        )));
    }
    let q = matmul(x, wq)?;
    let k = matmul(x, wk)?;
    AttentionView::single(softmax_scores(&q, &k, causal)?, layout, causal)
}

/// Uniform mean over the head axis.
pub fn head_mean(view: &AttentionView) -> AttentionView {
    let h = view.heads();
    let n = view.len();
    let mut acc = Array2::<f64>::zeros((n, n));
    for head in view.weights.outer_iter() {
        acc += &head;
    }
    acc /= h as f64;
    AttentionView {
        weights: acc.insert_axis(Axis(0)),
        layout: view.layout.clone(),
        causal: view.causal,
    }
}

/// Visual rows over visual columns, copied verbatim.
pub fn visual_block(view: &AttentionView) -> Result<Array2<f64>> {
    let a = view.matrix()?;
    let vis = view.layout.positions_of(Role::Visual);
    Ok(a.select(Axis(0), &vis).select(Axis(1), &vis))
}

/// The CLS token's attention over the visual columns.
pub fn cls_row(view: &AttentionView) -> Result<Array1<f64>> {
    let a = view.matrix()?;
    let cls = view.layout.cls_position().ok_or(Error::AbsentCls)?;
    let vis = view.layout.positions_of(Role::Visual);
    Ok(a.slice(s![cls, ..]).select(Axis(0), &vis))
}

/// Text rows over visual columns; `0 x N` when the layout has no text.
pub fn text_to_visual_block(view: &AttentionView) -> Result<Array2<f64>> {
    let a = view.matrix()?;
    let vis = view.layout.positions_of(Role::Visual);
    let txt = view.layout.positions_of(Role::Text);
    Ok(a.select(Axis(0), &txt).select(Axis(1), &vis))
}
