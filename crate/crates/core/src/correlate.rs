//! Correlate stage: source-to-target correlation, token-wise quantile
//! thresholds, and the resulting many-to-many assignment sets.
//!
//! Rows of every matrix here are sources (discarded tokens) and columns are
//! targets (preserved tokens), both in the order of the [`SourceTargetSplit`].

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::filter::SourceTargetSplit;

/// Correlation matrix plus the assignment sets and weights derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPlan {
    pub correlation: Array2<f64>,
    /// Per-source thresholds; `None` for the fixed-K and many-to-one modes.
    pub tau: Option<Vec<f64>>,
    /// `targets[i]`: ascending target positions receiving from source `i`.
    pub targets: Vec<Vec<usize>>,
    /// `weights[i][k]` is the weight of `targets[i][k]`.
    pub weights: Vec<Vec<f64>>,
    /// `sources[j]`: ascending source positions feeding target `j`.
    pub sources: Vec<Vec<usize>>,
}

impl CorrelationPlan {
    pub fn num_sources(&self) -> usize {
        self.correlation.nrows()
    }

    pub fn num_targets(&self) -> usize {
        self.correlation.ncols()
    }

    /// `(source, weight)` pairs flowing into target `j`, by ascending source.
    pub fn incoming(&self, j: usize) -> Vec<(usize, f64)> {
        self.sources[j]
            .iter()
            .map(|&i| {
                let k = self.targets[i]
                    .binary_search(&j)
                    .expect("source and target sets are transposes");
                (i, self.weights[i][k])
            })
            .collect()
    }

    /// A plan that assigns nothing: every source is pruned.
    pub fn pruning(correlation: Array2<f64>) -> Self {
        let (s, t) = correlation.dim();
        Self {
            correlation,
            tau: None,
            targets: vec![Vec::new(); s],
            weights: vec![Vec::new(); s],
            sources: vec![Vec::new(); t],
        }
    }

    /// Rebuilds a plan from recorded targets and weights. The correlation
    /// matrix is not recorded, so it is left zero.
    pub fn from_weights(
        num_targets: usize,
        targets: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if targets.len() != weights.len() {
            return Err(Error::shape("targets and weights differ in length"));
        }
        let mut sources = vec![Vec::new(); num_targets];
        for (i, (js, ws)) in targets.iter().zip(&weights).enumerate() {
            if js.len() != ws.len() || js.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape(format!("source {i}: targets must be ascending, one weight each")));
            }
            for &j in js {
                if j >= num_targets {
                    return Err(Error::shape(format!("source {i}: target {j} out of range")));
                }
                sources[j].push(i);
            }
        }
        let correlation = Array2::zeros((targets.len(), num_targets));
        Ok(Self { correlation, tau: None, targets, weights, sources })
    }

    fn from_targets(correlation: Array2<f64>, tau: Option<Vec<f64>>, targets: Vec<Vec<usize>>) -> Self {
        let weights = targets
            .iter()
            .enumerate()
            .map(|(i, js)| normalized(js.iter().map(|&j| correlation[[i, j]])))
            .collect();
        let mut sources = vec![Vec::new(); correlation.ncols()];
        for (i, js) in targets.iter().enumerate() {
            for &j in js {
                sources[j].push(i);
            }
        }
        Self { correlation, tau, targets, weights, sources }
    }
}

/// `c / Σc`, falling back to uniform weights when the sum is zero.
fn normalized(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let values: Vec<f64> = values.collect();
    let total = values.iter().fold(0.0, |acc, &v| acc + v);
    if total > 0.0 {
        values.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / values.len() as f64; values.len()]
    }
}

fn check_split(n: usize, split: &SourceTargetSplit) -> Result<()> {
    if split.source.iter().chain(&split.target).any(|&p| p >= n) {
        return Err(Error::shape(format!("split refers past {n} visual tokens")));
    }
    Ok(())
}

/// Direct correlation: `C[i,j] = A[source_i, target_j]`.
pub fn correlation_v(a_vv: &Array2<f64>, split: &SourceTargetSplit) -> Result<Array2<f64>> {
    check_split(a_vv.nrows().min(a_vv.ncols()), split)?;
    Ok(Array2::from_shape_fn((split.source.len(), split.target.len()), |(i, j)| {
        a_vv[[split.source[i], split.target[j]]]
    }))
}

/// Direct plus text-bridged correlation:
/// `C[i,j] = γ · direct(s,t) + (1 − γ) · (1/M) Σ_k A_tv[k,s] · A_tv[k,t]`.
///
/// For a causal block the direct term is `max(A[s,t], A[t,s])`, since only one
/// of the two is unmasked. For a bidirectional block it is `A[s,t]`.
pub fn correlation_l(
    a_vv: &Array2<f64>,
    a_tv: &Array2<f64>,
    split: &SourceTargetSplit,
    gamma: f64,
    causal: bool,
) -> Result<Array2<f64>> {
    let n = a_vv.nrows();
    let m = a_tv.nrows();
    if m == 0 {
        return Err(Error::NoText);
    }
    if a_vv.ncols() != n || a_tv.ncols() != n {
        return Err(Error::shape(format!(
            "visual block {:?} and text block {:?} disagree",
            a_vv.shape(),
            a_tv.shape()
        )));
    }
    check_split(n, split)?;
    Ok(Array2::from_shape_fn((split.source.len(), split.target.len()), |(i, j)| {
        let (s, t) = (split.source[i], split.target[j]);
        let direct = if causal { a_vv[[s, t]].max(a_vv[[t, s]]) } else { a_vv[[s, t]] };
        let mut bridge = 0.0;
        for k in 0..m {
            bridge += a_tv[[k, s]] * a_tv[[k, t]];
        }
        gamma * direct + (1.0 - gamma) * (bridge / m as f64)
    }))
}

/// Linear-interpolation empirical quantile (type 7) of an unsorted slice.
pub fn quantile(values: &[f64], epsilon: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::shape("quantile of an empty row"));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::config(format!("epsilon = {epsilon} outside (0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = epsilon * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (h.ceil() as usize).min(v.len() - 1);
    let tau = v[lo] + (h - lo as f64) * (v[hi] - v[lo]);
    // interpolation never leaves [v[lo], v[hi]]
    Ok(tau.clamp(v[lo], v[hi]))
}

/// Per-row `ε`-quantile thresholds.
pub fn thresholds(c: &Array2<f64>, epsilon: f64) -> Result<Vec<f64>> {
    c.outer_iter()
        .map(|row| quantile(row.as_slice().unwrap_or(&row.to_vec()), epsilon))
        .collect()
}

/// Token-adaptive assignment: source `i` feeds every target with `C[i,j] ≥ τ_i`,
/// weighted by `C[i,j] / Σ_{j ∈ J_i} C[i,j]`.
pub fn assignments(c: Array2<f64>, tau: Vec<f64>) -> Result<CorrelationPlan> {
    if tau.len() != c.nrows() {
        return Err(Error::shape(format!(
            "{} thresholds for {} sources",
            tau.len(),
            c.nrows()
        )));
    }
    let targets = c
        .outer_iter()
        .zip(&tau)
        .map(|(row, &t)| (0..row.len()).filter(|&j| row[j] >= t).collect())
        .collect();
    Ok(CorrelationPlan::from_targets(c, Some(tau), targets))
}

/// Thresholds and assignments in one step.
pub fn adaptive_plan(c: Array2<f64>, epsilon: f64) -> Result<CorrelationPlan> {
    let tau = thresholds(&c, epsilon)?;
    assignments(c, tau)
}

fn ranked(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Fixed top-K per source. `K = 0` prunes every source.
pub fn fixed_k_assignments(c: Array2<f64>, k: usize) -> Result<CorrelationPlan> {
    if k > c.ncols() {
        return Err(Error::config(format!("K = {k} exceeds {} targets", c.ncols())));
    }
    let targets = c
        .outer_iter()
        .map(|row| {
            let mut top = ranked(&row.to_vec())[..k].to_vec();
            top.sort_unstable();
            top
        })
        .collect();
    Ok(CorrelationPlan::from_targets(c, None, targets))
}

/// Each source feeds only its most correlated target, with weight 1.
pub fn many_to_one_assignments(c: Array2<f64>) -> Result<CorrelationPlan> {
    if c.ncols() == 0 && c.nrows() > 0 {
        return Err(Error::shape("many-to-one needs at least one target"));
    }
    let targets = c.outer_iter().map(|row| vec![ranked(&row.to_vec())[0]]).collect();
    Ok(CorrelationPlan::from_targets(c, None, targets))
}
