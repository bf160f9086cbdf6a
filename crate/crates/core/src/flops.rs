//! Analytical FLOPs model of a transformer layer, before and after reduction.
//!
//! All counts are exact `u128` integers; overflow is an error, never a wrap.
//! A layer over `P` tokens costs `4PD² + 2P²D + 2PDH`. The encoder variant
//! counts only visual tokens (`P = N`); the decoder counts `P = N + M`.

use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::error::{Error, Result};

pub type Flops = u128;

fn mul(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::Overflow("multiplication"))
}

fn add(a: u128, b: u128) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow("addition"))
}

fn sub(a: u128, b: u128) -> Result<u128> {
    a.checked_sub(b).ok_or(Error::Overflow("subtraction"))
}

fn prod(factors: &[u128]) -> Result<u128> {
    factors.iter().try_fold(1u128, |acc, &f| mul(acc, f))
}

/// `4PD² + 2P²D + 2PDH`.
pub fn layer_flops(tokens: u64, width: u64, ffn_width: u64) -> Result<Flops> {
    let (p, d, h) = (tokens as u128, width as u128, ffn_width as u128);
    let projections = prod(&[4, p, d, d])?;
    let attention = prod(&[2, p, p, d])?;
    let ffn = prod(&[2, p, d, h])?;
    add(add(projections, attention)?, ffn)
}

/// Per-layer cost parameters. `discarded` tokens leave this layer; the
/// remaining `visual - discarded` are the targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCostParams {
    pub width: u64,
    pub ffn_width: u64,
    pub visual: u64,
    pub discarded: u64,
    pub text: u64,
}

impl LayerCostParams {
    pub fn targets(&self) -> u64 {
        self.visual - self.discarded
    }

    fn validate(&self) -> Result<()> {
        if self.discarded > self.visual {
            return Err(Error::config(format!(
                "cannot discard {} of {} visual tokens",
                self.discarded, self.visual
            )));
        }
        Ok(())
    }

    fn tokens(&self, variant: Variant, visual: u64) -> Result<u64> {
        match variant {
            Variant::V => Ok(visual),
            Variant::L => visual.checked_add(self.text).ok_or(Error::Overflow("token count")),
        }
    }
}

/// A printed closed form that disagrees with the definitional difference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedFormWarning {
    pub variant: Variant,
    pub closed_form: Flops,
    pub actual: Flops,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub before: Flops,
    pub after: Flops,
    /// `before - after`.
    pub delta: Flops,
    /// The published closed form for the same parameters.
    pub closed_form: Flops,
    pub warning: Option<ClosedFormWarning>,
}

/// Published closed forms:
/// encoder `4N_sD² + 2(N·N_s − N_s²)D + 2N_sDH`,
/// decoder `4N_sD² + 2(2N·N_s − N_s²)D + 2N_sDH`.
pub fn closed_form_delta(params: &LayerCostParams, variant: Variant) -> Result<Flops> {
    params.validate()?;
    let (n, ns, d, h) = (
        params.visual as u128,
        params.discarded as u128,
        params.width as u128,
        params.ffn_width as u128,
    );
    let cross = match variant {
        Variant::V => mul(n, ns)?,
        Variant::L => prod(&[2, n, ns])?,
    };
    let middle = prod(&[2, sub(cross, mul(ns, ns)?)?, d])?;
    add(add(prod(&[4, ns, d, d])?, middle)?, prod(&[2, ns, d, h])?)
}

/// Savings from dropping `discarded` tokens in one layer.
///
/// The delta is always the exact difference of [`layer_flops`]; the closed
/// form is evaluated alongside and a warning is attached when they differ.
pub fn reduction_delta(params: &LayerCostParams, variant: Variant) -> Result<DeltaReport> {
    params.validate()?;
    let before = layer_flops(params.tokens(variant, params.visual)?, params.width, params.ffn_width)?;
    let after = layer_flops(
        params.tokens(variant, params.targets())?,
        params.width,
        params.ffn_width,
    )?;
    let delta = sub(before, after)?;
    let closed_form = closed_form_delta(params, variant)?;
    let warning = (closed_form != delta).then(|| ClosedFormWarning {
        variant,
        closed_form,
        actual: delta,
        message: match variant {
            Variant::V => format!(
                "encoder closed form gives {closed_form}, exact difference is {delta}: \
                 its attention term 2(N*Ns - Ns^2)D should be 2(2N*Ns - Ns^2)D"
            ),
            Variant::L => format!(
                "decoder closed form gives {closed_form}, exact difference is {delta}: \
                 its attention term omits the text contribution 4*M*Ns*D"
            ),
        },
    });
    Ok(DeltaReport { before, after, delta, closed_form, warning })
}

/// Cost of the reduction itself.
///
/// Encoder `N² + 2N + N_s(N_t + 2D + 1) + D`; the decoder adds another `N² + 2N`
/// for the text-bridged correlation.
pub fn overhead_flops(params: &LayerCostParams, variant: Variant) -> Result<Flops> {
    params.validate()?;
    let (n, ns, nt, d) = (
        params.visual as u128,
        params.discarded as u128,
        params.targets() as u128,
        params.width as u128,
    );
    let scoring = add(mul(n, n)?, mul(2, n)?)?;
    let scoring = match variant {
        Variant::V => scoring,
        Variant::L => mul(2, scoring)?,
    };
    let per_source = add(add(nt, mul(2, d)?)?, 1)?;
    add(add(scoring, mul(ns, per_source)?)?, d)
}

/// Model dimensions for costing a whole schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub width: u64,
    pub ffn_width: u64,
    pub visual: u64,
    pub text: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub visual_in: u64,
    pub discarded: u64,
    pub before: Flops,
    pub after: Flops,
    pub overhead: Flops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCost {
    pub variant: Variant,
    pub total_before: Flops,
    pub total_after: Flops,
    pub total_delta: Flops,
    pub total_overhead: Flops,
    pub percent_reduction: f64,
    pub layers: Vec<LayerCost>,
    pub warnings: Vec<ClosedFormWarning>,
}

/// Sums layer costs along a discard schedule.
///
/// A layer that discards tokens is costed at its post-reduction count, and
/// every later layer sees the reduced count. Overhead is charged on the
/// pre-reduction count of each reducing layer and reported separately.
pub fn pipeline_cost(schedule: &[usize], dims: ModelDims, variant: Variant) -> Result<PipelineCost> {
    let total_discard: u64 = schedule.iter().map(|&d| d as u64).sum();
    if total_discard > dims.visual {
        return Err(Error::Budget(format!(
            "schedule removes {total_discard} of {} visual tokens",
            dims.visual
        )));
    }
    let mut visual = dims.visual;
    let mut layers = Vec::with_capacity(schedule.len());
    let mut warnings = Vec::new();
    let (mut total_before, mut total_after, mut total_overhead) = (0u128, 0u128, 0u128);
    for (layer, &discarded) in schedule.iter().enumerate() {
        let params = LayerCostParams {
            width: dims.width,
            ffn_width: dims.ffn_width,
            visual,
            discarded: discarded as u64,
            text: dims.text,
        };
        let full = layer_flops(params.tokens(variant, dims.visual)?, dims.width, dims.ffn_width)?;
        let report = reduction_delta(&params, variant)?;
        let overhead = if discarded > 0 { overhead_flops(&params, variant)? } else { 0 };
        if let Some(w) = report.warning {
            if warnings.is_empty() {
                warnings.push(w);
            }
        }
        total_before = add(total_before, full)?;
        total_after = add(total_after, report.after)?;
        total_overhead = add(total_overhead, overhead)?;
        layers.push(LayerCost {
            layer,
            visual_in: visual,
            discarded: discarded as u64,
            before: full,
            after: report.after,
            overhead,
        });
        visual -= discarded as u64;
    }
    let total_delta = sub(total_before, total_after)?;
    let percent_reduction = if total_before == 0 {
        0.0
    } else {
        100.0 * total_delta as f64 / total_before as f64
    };
    Ok(PipelineCost {
        variant,
        total_before,
        total_after,
        total_delta,
        total_overhead,
        percent_reduction,
        layers,
        warnings,
    })
}
