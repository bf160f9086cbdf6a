#![allow(dead_code)]

pub mod oracle;

use ficoco::{AttentionView, Layout, Role};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use oracle::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Array2<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_mat(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

/// Row-stochastic attention over `n` tokens, optionally lower-triangular.
pub fn random_attention(rng: &mut impl Rng, n: usize, causal: bool) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, n), |(i, j)| {
        if causal && j > i {
            0.0
        } else {
            // heavy-ish tail so quantiles see spread-out rows
            rng.random::<f64>().powi(3) + 1e-3
        }
    });
    for mut row in a.outer_iter_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    a
}

/// Encoder-style view over `[CLS] + n` visual tokens.
pub fn encoder_view(rng: &mut impl Rng, n: usize) -> AttentionView {
    let mut roles = vec![Role::Cls];
    roles.extend(std::iter::repeat_n(Role::Visual, n));
    let a = random_attention(rng, n + 1, false);
    AttentionView::single(a, Layout::from_roles(roles), false).unwrap()
}

/// Decoder-style view over `n` visual then `m` text tokens.
pub fn decoder_view(rng: &mut impl Rng, n: usize, m: usize, causal: bool) -> AttentionView {
    let mut roles = vec![Role::Visual; n];
    roles.extend(std::iter::repeat_n(Role::Text, m));
    let a = random_attention(rng, n + m, causal);
    AttentionView::single(a, Layout::from_roles(roles), causal).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}
