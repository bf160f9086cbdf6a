//! Compress stage: fold discarded embeddings into their correlated targets.

use ndarray::{Array1, Array2};

use crate::correlate::CorrelationPlan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionResult {
    pub updated_targets: Array2<f64>,
    /// `Σ_{i ∈ I_j} α_ij` per target.
    pub received_mass: Vec<f64>,
    /// `(source, α_ij)` per target, ascending by source.
    pub provenance: Vec<Vec<(usize, f64)>>,
}

fn check(targets: &Array2<f64>, sources: &Array2<f64>, plan: &CorrelationPlan) -> Result<()> {
    if targets.nrows() != plan.num_targets() || sources.nrows() != plan.num_sources() {
        return Err(Error::shape(format!(
            "plan is {}x{}, got {} sources and {} targets",
            plan.num_sources(),
            plan.num_targets(),
            sources.nrows(),
            targets.nrows()
        )));
    }
    if targets.ncols() != sources.ncols() {
        return Err(Error::shape(format!(
            "source width {} differs from target width {}",
            sources.ncols(),
            targets.ncols()
        )));
    }
    Ok(())
}

/// `X_j ← (X_j + Σ_{i∈I_j} α_ij X_i) / (1 + Σ_{i∈I_j} α_ij)`.
///
/// Targets that receive nothing are returned bit-for-bit unchanged.
pub fn weighted_compress(
    targets: &Array2<f64>,
    sources: &Array2<f64>,
    plan: &CorrelationPlan,
) -> Result<CompressionResult> {
    compress_with(targets, sources, plan, <[_]>::to_vec)
}

/// Ablation baseline: `X_j ← (X_j + Σ_{i∈I_j} X_i) / (1 + |I_j|)`, ignoring α.
pub fn average_compress(
    targets: &Array2<f64>,
    sources: &Array2<f64>,
    plan: &CorrelationPlan,
) -> Result<CompressionResult> {
    compress_with(targets, sources, plan, |incoming| {
        incoming.iter().map(|&(i, _)| (i, 1.0)).collect()
    })
}

fn compress_with(
    targets: &Array2<f64>,
    sources: &Array2<f64>,
    plan: &CorrelationPlan,
    coefficients: impl Fn(&[(usize, f64)]) -> Vec<(usize, f64)>,
) -> Result<CompressionResult> {
    check(targets, sources, plan)?;
    let mut updated = targets.clone();
    let mut received_mass = Vec::with_capacity(targets.nrows());
    let mut provenance = Vec::with_capacity(targets.nrows());
    for j in 0..targets.nrows() {
        let incoming = plan.incoming(j);
        received_mass.push(incoming.iter().fold(0.0, |acc, &(_, a)| acc + a));
        if !incoming.is_empty() {
            let coeffs = coefficients(&incoming);
            let mut acc: Array1<f64> = targets.row(j).to_owned();
            let mut denom = 1.0;
            for &(i, w) in &coeffs {
                acc.scaled_add(w, &sources.row(i));
                denom += w;
            }
            acc /= denom;
            updated.row_mut(j).assign(&acc);
        }
        provenance.push(incoming);
    }
    Ok(CompressionResult { updated_targets: updated, received_mass, provenance })
}
