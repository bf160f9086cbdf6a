//! Layer-by-layer orchestration of filter, correlate, and compress.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{
    cls_row, head_mean, text_to_visual_block, visual_block, AttentionView, Role, TokenWorkspace,
};
use crate::compress::{average_compress, weighted_compress, CompressionResult};
use crate::config::{AssignmentMode, ClsMode, CompressionMode, DiscardPlan, ReductionConfig, Variant};
use crate::correlate::{
    adaptive_plan, correlation_l, correlation_v, fixed_k_assignments, many_to_one_assignments,
    CorrelationPlan,
};
use crate::error::{Error, Result};
use crate::filter::{key_mean_equivalent, local_penalty, score_l_read, score_v_read, select_discarded};
use crate::flops::{pipeline_cost, ModelDims, PipelineCost};
use crate::trace::{Assignment, LayerRecord, ReceivedMass, ReductionTrace};

/// Number of visual tokens to discard at each layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub per_layer_discard: Vec<usize>,
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.per_layer_discard.iter().sum()
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer_discard.len()
    }
}

/// Validates an explicit schedule, or splits `initial - keep` as evenly as
/// possible over layers `[start_layer, num_layers)`, earlier layers first.
pub fn plan_schedule(
    initial_visual: usize,
    plan: &DiscardPlan,
    start_layer: usize,
    num_layers: usize,
) -> Result<Schedule> {
    match plan {
        DiscardPlan::PerLayer(v) => {
            if v.len() != num_layers {
                return Err(Error::Budget(format!(
                    "schedule has {} entries for {num_layers} layers",
                    v.len()
                )));
            }
            if v.iter().take(start_layer).any(|&d| d > 0) {
                return Err(Error::Budget("discards scheduled before the start layer".into()));
            }
            let total: usize = v.iter().sum();
            if total > initial_visual {
                return Err(Error::Budget(format!(
                    "schedule discards {total} of {initial_visual} visual tokens"
                )));
            }
            Ok(Schedule { per_layer_discard: v.clone() })
        }
        DiscardPlan::KeepBudget(keep) => {
            if *keep > initial_visual {
                return Err(Error::Budget(format!(
                    "keep budget {keep} exceeds {initial_visual} visual tokens"
                )));
            }
            let total = initial_visual - keep;
            let mut per_layer = vec![0; num_layers];
            let active = num_layers.saturating_sub(start_layer);
            if total > 0 && active == 0 {
                return Err(Error::Budget("no layers left after the start layer".into()));
            }
            if let Some(base) = total.checked_div(active) {
                let extra = total % active;
                for (k, slot) in per_layer[start_layer..].iter_mut().enumerate() {
                    *slot = base + usize::from(k < extra);
                }
            }
            Ok(Schedule { per_layer_discard: per_layer })
        }
    }
}

/// Attention for one layer, plus keys when the source can provide them.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub view: AttentionView,
    /// `(heads, tokens, width)` over the same layout as `view`.
    pub keys: Option<Array3<f64>>,
}

/// Supplies each layer's attention for the current workspace.
pub trait AttentionSource {
    fn layer_attention(
        &mut self,
        layer: usize,
        workspace: &TokenWorkspace,
        variant: Variant,
    ) -> Result<LayerAttention>;
}

/// Visual positions in the workspace, in the order the view lists them.
fn visual_rows(view: &AttentionView, ws: &TokenWorkspace) -> Result<Vec<usize>> {
    let layout = view.layout();
    let from_view: Vec<usize> = layout
        .positions_of(Role::Visual)
        .into_iter()
        .map(|p| layout.original_index[p])
        .collect();
    let expected = ws.positions_of(Role::Visual);
    if from_view.len() != expected.len()
        || from_view
            .iter()
            .zip(&expected)
            .any(|(&o, &row)| ws.original_index()[row] != o)
    {
        return Err(Error::shape(format!(
            "attention covers {} visual tokens that do not match the {} alive ones",
            from_view.len(),
            expected.len()
        )));
    }
    Ok(expected)
}

fn build_plan(c: Array2<f64>, cfg: &ReductionConfig) -> Result<CorrelationPlan> {
    if c.ncols() == 0 {
        return Ok(CorrelationPlan::pruning(c));
    }
    match cfg.assignment {
        AssignmentMode::Adaptive => adaptive_plan(c, cfg.epsilon),
        AssignmentMode::FixedK(k) => fixed_k_assignments(c, k),
        AssignmentMode::ManyToOne => many_to_one_assignments(c),
    }
}

fn compress(
    targets: &Array2<f64>,
    sources: &Array2<f64>,
    plan: &CorrelationPlan,
    mode: CompressionMode,
) -> Result<CompressionResult> {
    match mode {
        CompressionMode::Weighted => weighted_compress(targets, sources, plan),
        CompressionMode::Average => average_compress(targets, sources, plan),
    }
}

struct Stages {
    scores: Vec<f64>,
    a_vv: Array2<f64>,
    a_tv: Option<Array2<f64>>,
    penalized: bool,
}

/// Applies the split, plan and compression to the workspace and builds the record.
fn finish_layer(
    ws: &TokenWorkspace,
    layer: usize,
    vis_rows: &[usize],
    stages: Stages,
    cfg: &ReductionConfig,
    n_discard: usize,
    view_causal: bool,
) -> Result<(TokenWorkspace, LayerRecord)> {
    let split = select_discarded(&stages.scores, n_discard)?;
    let c = match &stages.a_tv {
        None => correlation_v(&stages.a_vv, &split)?,
        Some(a_tv) => correlation_l(&stages.a_vv, a_tv, &split, cfg.gamma, view_causal)?,
    };
    let plan = build_plan(c, cfg)?;

    let source_rows: Vec<usize> = split.source.iter().map(|&p| vis_rows[p]).collect();
    let target_rows: Vec<usize> = split.target.iter().map(|&p| vis_rows[p]).collect();
    let result = compress(
        &ws.select_rows(&target_rows),
        &ws.select_rows(&source_rows),
        &plan,
        cfg.compression,
    )?;

    let orig = |row: usize| ws.original_index()[row];
    let record = LayerRecord {
        layer,
        local_penalty: stages.penalized,
        text_bridge: stages.a_tv.is_some(),
        candidates: vis_rows.iter().map(|&r| orig(r)).collect(),
        scores: stages.scores,
        discarded: source_rows.iter().map(|&r| orig(r)).collect(),
        assignments: (0..plan.num_sources())
            .map(|i| Assignment {
                source: orig(source_rows[i]),
                targets: plan.targets[i].iter().map(|&j| orig(target_rows[j])).collect(),
                weights: plan.weights[i].clone(),
            })
            .collect(),
        received_mass: result
            .received_mass
            .iter()
            .enumerate()
            .filter(|(j, _)| !result.provenance[*j].is_empty())
            .map(|(j, &mass)| ReceivedMass { target: orig(target_rows[j]), mass })
            .collect(),
    };

    let mut next = ws.clone();
    next.set_rows(&target_rows, &result.updated_targets)?;
    next.remove(&source_rows);
    Ok((next, record))
}

fn single_head(view: &AttentionView) -> AttentionView {
    if view.heads() == 1 {
        view.clone()
    } else {
        head_mean(view)
    }
}

/// One encoder-side reduction step: score, penalize, select, correlate,
/// compress, and drop the sources.
pub fn reduce_layer_v(
    ws: &TokenWorkspace,
    layer: usize,
    attention: &LayerAttention,
    cfg: &ReductionConfig,
    n_discard: usize,
) -> Result<(TokenWorkspace, LayerRecord)> {
    if n_discard == 0 {
        return Ok((ws.clone(), LayerRecord::empty(layer)));
    }
    let view = single_head(&attention.view);
    let vis_rows = visual_rows(&view, ws)?;
    let a_vv = visual_block(&view)?;
    let anchor = match cfg.cls_mode {
        ClsMode::ClsRow => cls_row(&view)?.to_vec(),
        ClsMode::KeyMeanEquivalent => {
            let keys = attention.keys.as_ref().ok_or_else(|| {
                Error::config("key_mean_equivalent needs keys for every reducing layer")
            })?;
            key_mean_equivalent(keys, view.layout())?
        }
    };
    let mut scores = score_v_read(&a_vv, &anchor, cfg.lambda, cfg.redundancy_read)?.values;
    if cfg.local_penalty {
        let cells = vis_rows
            .iter()
            .map(|&r| ws.grid_pos()[r].ok_or_else(|| Error::shape("visual token without grid cell")))
            .collect::<Result<Vec<_>>>()?;
        scores = local_penalty(
            &scores,
            &cells,
            ws.grid_dims(),
            cfg.window_size,
            cfg.penalty_coefficient,
        )?;
    }
    let stages = Stages { scores, a_vv, a_tv: None, penalized: cfg.local_penalty };
    finish_layer(ws, layer, &vis_rows, stages, cfg, n_discard, view.is_causal())
}

/// One decoder-side reduction step. Text tokens are never discarded and the
/// local penalty is never applied.
pub fn reduce_layer_l(
    ws: &TokenWorkspace,
    layer: usize,
    attention: &LayerAttention,
    cfg: &ReductionConfig,
    n_discard: usize,
) -> Result<(TokenWorkspace, LayerRecord)> {
    if ws.count(Role::Text) == 0 {
        return Err(Error::NoText);
    }
    if n_discard == 0 {
        return Ok((ws.clone(), LayerRecord::empty(layer)));
    }
    let view = single_head(&attention.view);
    let vis_rows = visual_rows(&view, ws)?;
    let a_vv = visual_block(&view)?;
    let a_tv = text_to_visual_block(&view)?;
    let scores = score_l_read(&a_vv, &a_tv, cfg.beta, cfg.redundancy_read)?.values;
    let stages = Stages { scores, a_vv, a_tv: Some(a_tv), penalized: false };
    finish_layer(ws, layer, &vis_rows, stages, cfg, n_discard, view.is_causal())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub initial_visual: usize,
    pub final_visual: usize,
    pub final_tokens: usize,
    pub text_tokens: usize,
    /// Alive visual count after each layer.
    pub visual_per_layer: Vec<usize>,
    pub schedule: Vec<usize>,
    pub flops: PipelineCost,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub workspace: TokenWorkspace,
    pub trace: ReductionTrace,
    pub summary: RunSummary,
}

/// Runs every layer of the configured schedule.
pub fn run(
    initial: &TokenWorkspace,
    source: &mut dyn AttentionSource,
    cfg: &ReductionConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let initial_visual = initial.count(Role::Visual);
    cfg.validate_against(initial_visual)?;
    if initial.grid_dims() != (cfg.grid_rows, cfg.grid_cols) {
        return Err(Error::config("workspace grid differs from configured grid"));
    }
    if cfg.variant == Variant::L && initial.count(Role::Text) == 0 {
        return Err(Error::NoText);
    }
    let schedule = plan_schedule(initial_visual, &cfg.discard, cfg.start_layer, cfg.num_layers)?;

    let mut ws = initial.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut visual_per_layer = Vec::with_capacity(cfg.num_layers);
    for (layer, &n_discard) in schedule.per_layer_discard.iter().enumerate() {
        let (next, record) = if n_discard == 0 {
            (ws, LayerRecord::empty(layer))
        } else {
            let attention = source.layer_attention(layer, &ws, cfg.variant)?;
            match cfg.variant {
                Variant::V => reduce_layer_v(&ws, layer, &attention, cfg, n_discard)?,
                Variant::L => reduce_layer_l(&ws, layer, &attention, cfg, n_discard)?,
            }
        };
        ws = next;
        visual_per_layer.push(ws.count(Role::Visual));
        layers.push(record);
    }

    let width = initial.width() as u64;
    let dims = ModelDims {
        width,
        ffn_width: cfg.ffn_width.map_or(4 * width, |h| h as u64),
        visual: initial_visual as u64,
        text: initial.count(Role::Text) as u64,
    };
    let flops = pipeline_cost(&schedule.per_layer_discard, dims, cfg.variant)?;
    let first_visual_index = initial
        .positions_of(Role::Visual)
        .first()
        .map_or(0, |&r| initial.original_index()[r]);
    let trace = ReductionTrace {
        variant: cfg.variant,
        compression: cfg.compression,
        grid_rows: cfg.grid_rows,
        grid_cols: cfg.grid_cols,
        first_visual_index,
        layers,
    };
    let summary = RunSummary {
        variant: cfg.variant,
        initial_visual,
        final_visual: ws.count(Role::Visual),
        final_tokens: ws.len(),
        text_tokens: ws.count(Role::Text),
        visual_per_layer,
        schedule: schedule.per_layer_discard,
        flops,
    };
    Ok(RunOutput { workspace: ws, trace, summary })
}

/// Re-applies the recorded discards and weights to the initial workspace.
pub fn replay(initial: &TokenWorkspace, trace: &ReductionTrace) -> Result<TokenWorkspace> {
    let mut ws = initial.clone();
    for rec in &trace.layers {
        if rec.discarded.is_empty() {
            continue;
        }
        let row_of = |o: usize| {
            ws.position_of_original(o)
                .filter(|&r| ws.roles()[r] == Role::Visual)
                .ok_or_else(|| Error::Trace(format!("layer {}: token {o} is not alive", rec.layer)))
        };
        let source_rows = rec.discarded.iter().map(|&o| row_of(o)).collect::<Result<Vec<_>>>()?;
        let target_rows: Vec<usize> = ws
            .positions_of(Role::Visual)
            .into_iter()
            .filter(|r| !source_rows.contains(r))
            .collect();
        let target_pos = |o: usize| {
            let r = row_of(o)?;
            target_rows
                .binary_search(&r)
                .map_err(|_| Error::Trace(format!("layer {}: target {o} was discarded", rec.layer)))
        };
        let mut targets = vec![Vec::new(); source_rows.len()];
        let mut weights = vec![Vec::new(); source_rows.len()];
        for a in &rec.assignments {
            let i = rec
                .discarded
                .iter()
                .position(|&d| d == a.source)
                .ok_or_else(|| Error::Trace(format!("layer {}: unknown source {}", rec.layer, a.source)))?;
            targets[i] = a.targets.iter().map(|&o| target_pos(o)).collect::<Result<Vec<_>>>()?;
            weights[i] = a.weights.clone();
        }
        let plan = CorrelationPlan::from_weights(target_rows.len(), targets, weights)?;
        let result = compress(
            &ws.select_rows(&target_rows),
            &ws.select_rows(&source_rows),
            &plan,
            trace.compression,
        )?;
        ws.set_rows(&target_rows, &result.updated_targets)?;
        ws.remove(&source_rows);
    }
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Layout;
    use ndarray::array;

    #[test]
    fn keep_everything_is_zero_schedule() {
        let s = plan_schedule(16, &DiscardPlan::KeepBudget(16), 0, 4).unwrap();
        assert_eq!(s.per_layer_discard, vec![0; 4]);
    }

    #[test]
    fn even_split_remainder_first() {
        let s = plan_schedule(576, &DiscardPlan::KeepBudget(64), 12, 24).unwrap();
        let mut expected = vec![0; 12];
        expected.extend([43, 43, 43, 43, 43, 43, 43, 43, 42, 42, 42, 42]);
        assert_eq!(s.per_layer_discard, expected);
        assert_eq!(s.total(), 512);
    }

    #[test]
    fn infeasible_schedules() {
        assert!(plan_schedule(4, &DiscardPlan::PerLayer(vec![0, 3, 2]), 1, 3).is_err());
        assert!(plan_schedule(4, &DiscardPlan::KeepBudget(5), 0, 3).is_err());
        assert!(plan_schedule(4, &DiscardPlan::PerLayer(vec![1, 0]), 1, 2).is_err());
    }

    fn toy_workspace() -> TokenWorkspace {
        // CLS + 2x2 grid + 1 text token, width 2
        let x = array![[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [4.0, 0.0], [7.0, 7.0]];
        TokenWorkspace::new(x, true, 2, 2, 1).unwrap()
    }

    fn toy_attention() -> LayerAttention {
        let a = array![
            [0.1, 0.4, 0.1, 0.3, 0.1],
            [0.1, 0.5, 0.2, 0.1, 0.1],
            [0.2, 0.1, 0.4, 0.2, 0.1],
            [0.1, 0.1, 0.1, 0.6, 0.1],
            [0.3, 0.1, 0.1, 0.1, 0.4],
        ];
        let layout = Layout::new(
            vec![Role::Cls, Role::Visual, Role::Visual, Role::Visual, Role::Visual],
            vec![0, 1, 2, 3, 4],
        )
        .unwrap();
        LayerAttention { view: AttentionView::single(a, layout, false).unwrap(), keys: None }
    }

    #[test]
    fn zero_discard_is_identity() {
        let ws = toy_workspace();
        let cfg = ReductionConfig::default();
        let (next, rec) = reduce_layer_v(&ws, 3, &toy_attention(), &cfg, 0).unwrap();
        assert_eq!(next, ws);
        assert_eq!(rec, LayerRecord::empty(3));
    }

    #[test]
    fn encoder_step_removes_and_records() {
        let ws = toy_workspace();
        let cfg = ReductionConfig { local_penalty: false, ..ReductionConfig::default() };
        let (next, rec) = reduce_layer_v(&ws, 0, &toy_attention(), &cfg, 1).unwrap();
        assert_eq!(next.count(Role::Visual), 3);
        assert_eq!(next.count(Role::Cls), 1);
        assert_eq!(next.count(Role::Text), 1);
        assert_eq!(rec.discarded.len(), 1);
        let a = &rec.assignments[0];
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(!a.targets.contains(&rec.discarded[0]));
    }

    #[test]
    fn shape_drift_detected() {
        let mut ws = toy_workspace();
        ws.remove(&[2]);
        let cfg = ReductionConfig::default();
        let err = reduce_layer_v(&ws, 0, &toy_attention(), &cfg, 1).unwrap_err();
        assert_eq!(err.class(), "shape");
    }

    #[test]
    fn decoder_requires_text() {
        let x = Array2::zeros((4, 2));
        let ws = TokenWorkspace::new(x, false, 2, 2, 0).unwrap();
        let cfg = ReductionConfig::for_variant(Variant::L);
        let err = reduce_layer_l(&ws, 0, &toy_attention(), &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::NoText));
    }
}
