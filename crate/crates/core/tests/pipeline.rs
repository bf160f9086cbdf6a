//! End-to-end behaviour of the layer loop.

mod common;

use common::oracle::*;
use common::{max_abs_diff_mat, to_mat};
use ficoco::attention::{text_to_visual_block, visual_block};
use ficoco::config::{ClsMode, DiscardPlan};
use ficoco::workload::{attention_layout, load_workload, RecordingSource, Workload};
use ficoco::{
    gen_workload, plan_schedule, read_trace, replay, run, write_trace, AttentionSource, AttentionView, Error,
    LayerAttention, ReductionConfig, Role, SynthParams, SyntheticAttention, TokenWorkspace, Variant,
};
use ndarray::Array2;

fn small(seed: u64, cls: bool, num_text: usize) -> ficoco::SyntheticWorkload {
    gen_workload(&SynthParams { grid_rows: 6, grid_cols: 6, num_text, width: 16, layers: 6, seed, cls, heads: 2 })
        .unwrap()
}

fn config(variant: Variant, keep: usize) -> ReductionConfig {
    ReductionConfig {
        grid_rows: 6,
        grid_cols: 6,
        start_layer: 1,
        num_layers: 6,
        discard: DiscardPlan::KeepBudget(keep),
        ..ReductionConfig::for_variant(variant)
    }
}

/// Fixed attention keyed on original indices, so both variants read the same
/// numbers. Rows are normalized over every alive token and the encoder view
/// drops the text rows and columns as they are.
struct TableSource;

fn table(a: usize, b: usize) -> f64 {
    let h = (a as u64 * 2654435761 + b as u64 * 40503 + 17) % 1009;
    1.0 + h as f64
}

impl AttentionSource for TableSource {
    fn layer_attention(&mut self, _: usize, ws: &TokenWorkspace, variant: Variant) -> ficoco::Result<LayerAttention> {
        let orig = ws.original_index();
        let n = ws.len();
        let mut full = Array2::from_shape_fn((n, n), |(i, j)| table(orig[i], orig[j]));
        for mut row in full.outer_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let (layout, rows) = attention_layout(ws, variant);
        let sub = full.select(ndarray::Axis(0), &rows).select(ndarray::Axis(1), &rows);
        Ok(LayerAttention { view: AttentionView::single(sub, layout, false)?, keys: None })
    }
}

#[test]
fn zero_schedule_is_identity() {
    let w = small(1, true, 4);
    for variant in [Variant::V, Variant::L] {
        let cfg = ReductionConfig { discard: DiscardPlan::PerLayer(vec![0; 4]), num_layers: 4, ..config(variant, 0) };
        let out = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
        assert_eq!(out.workspace, w.workspace);
        assert!(out.trace.layers.iter().all(|l| l.discarded.is_empty()));
        assert_eq!(out.summary.flops.total_delta, 0);
    }
}

#[test]
fn runs_are_deterministic() {
    let w = small(2, true, 5);
    for variant in [Variant::V, Variant::L] {
        let cfg = config(variant, 10);
        let a = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
        let b = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
        assert_eq!(a.trace.to_json(), b.trace.to_json());
        assert_eq!(a.workspace, b.workspace);
    }
}

#[test]
fn variants_record_their_own_stages() {
    let w = small(3, true, 5);
    let v = run(&w.workspace, &mut SyntheticAttention::new(&w), &config(Variant::V, 12)).unwrap();
    let l = run(&w.workspace, &mut SyntheticAttention::new(&w), &config(Variant::L, 12)).unwrap();
    let active = |t: &ficoco::ReductionTrace| t.layers.iter().filter(|r| !r.discarded.is_empty()).count();
    assert_eq!(active(&v.trace), 5);
    assert_eq!(active(&l.trace), 5);
    for r in v.trace.layers.iter().filter(|r| !r.discarded.is_empty()) {
        assert!(r.local_penalty && !r.text_bridge);
    }
    for r in l.trace.layers.iter().filter(|r| !r.discarded.is_empty()) {
        assert!(!r.local_penalty && r.text_bridge);
    }
    assert_eq!(v.workspace.count(Role::Text), 5);
    assert_eq!(l.workspace.count(Role::Text), 5);
}

#[test]
fn smaller_budgets_keep_fewer_tokens() {
    let w = small(4, false, 3);
    for variant in [Variant::V, Variant::L] {
        let mut previous = usize::MAX;
        for keep in [30, 20, 10, 1] {
            let cfg = ReductionConfig { cls_mode: ClsMode::KeyMeanEquivalent, ..config(variant, keep) };
            let out = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
            assert_eq!(out.summary.final_visual, keep);
            assert!(out.summary.flops.total_after <= previous as u128 || previous == usize::MAX);
            assert!(out.summary.visual_per_layer.windows(2).all(|p| p[0] >= p[1]));
            previous = out.summary.flops.total_after as usize;
        }
    }
}

#[test]
fn pure_redundancy_variants_agree() {
    // λ = β = γ = 1 and no penalty: both variants read only the visual block
    let w = small(5, true, 4);
    let v_cfg = ReductionConfig { lambda: 1.0, local_penalty: false, ..config(Variant::V, 9) };
    let l_cfg = ReductionConfig { beta: 1.0, gamma: 1.0, ..config(Variant::L, 9) };
    let v = run(&w.workspace, &mut TableSource, &v_cfg).unwrap();
    let l = run(&w.workspace, &mut TableSource, &l_cfg).unwrap();
    for (a, b) in v.trace.layers.iter().zip(&l.trace.layers) {
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.discarded, b.discarded);
        assert_eq!(a.assignments, b.assignments);
    }
    assert_eq!(v.workspace, l.workspace);
}

#[test]
fn single_decoder_step_matches_oracle() {
    let w = gen_workload(&SynthParams { grid_rows: 2, grid_cols: 2, num_text: 3, width: 8, layers: 1, seed: 3, cls: false, heads: 1 })
        .unwrap();
    let cfg = ReductionConfig {
        grid_rows: 2,
        grid_cols: 2,
        start_layer: 0,
        num_layers: 1,
        discard: DiscardPlan::KeepBudget(2),
        epsilon: 0.5,
        ..ReductionConfig::for_variant(Variant::L)
    };
    let mut synth = SyntheticAttention::new(&w);
    let mut rec = RecordingSource::new(&mut synth);
    let out = run(&w.workspace, &mut rec, &cfg).unwrap();
    let view = &rec.recorded[&0].view;

    let a_vv = to_mat(&visual_block(view).unwrap());
    let a_tv = to_mat(&text_to_visual_block(view).unwrap());
    let scores = oracle_score_l(&a_vv, &a_tv, cfg.beta);
    let (source, target) = oracle_select(&scores, 2);
    let c = oracle_correlation_l(&a_vv, &a_tv, &source, &target, cfg.gamma, true);
    let tau = oracle_thresholds(&c, cfg.epsilon);
    let (js, alpha) = oracle_assignments(&c, &tau);
    let emb = to_mat(w.workspace.embeddings());
    let pick = |idx: &[usize]| idx.iter().map(|&i| emb[i].clone()).collect::<Mat>();
    let expected = oracle_compress(&pick(&target), &pick(&source), &js, &alpha);

    assert_eq!(out.trace.layers[0].discarded, source);
    let kept = to_mat(&out.workspace.select_rows(&[0, 1]));
    assert!(max_abs_diff_mat(&kept, &expected) < 1e-12);
    assert_eq!(to_mat(&out.workspace.select_rows(&[2, 3, 4])), pick(&[4, 5, 6]));
}

#[test]
fn single_encoder_step_matches_oracle() {
    let w = gen_workload(&SynthParams { grid_rows: 2, grid_cols: 2, num_text: 0, width: 8, layers: 1, seed: 3, cls: true, heads: 1 })
        .unwrap();
    let cfg = ReductionConfig {
        grid_rows: 2,
        grid_cols: 2,
        start_layer: 0,
        num_layers: 1,
        discard: DiscardPlan::KeepBudget(3),
        ..ReductionConfig::for_variant(Variant::V)
    };
    let mut synth = SyntheticAttention::new(&w);
    let mut rec = RecordingSource::new(&mut synth);
    let out = run(&w.workspace, &mut rec, &cfg).unwrap();
    let full = to_mat(&rec.recorded[&0].view.matrix().unwrap().to_owned());

    let a_vv: Mat = full[1..].iter().map(|r| r[1..].to_vec()).collect();
    let raw = oracle_score_v(&a_vv, &full[0][1..], cfg.lambda);
    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let scores = oracle_penalty(&raw, &cells, cfg.window_size, cfg.penalty_coefficient);
    let (source, target) = oracle_select(&scores, 1);
    let c = oracle_correlation_v(&a_vv, &source, &target);
    let tau = oracle_thresholds(&c, cfg.epsilon);
    let (js, alpha) = oracle_assignments(&c, &tau);
    let emb = to_mat(w.workspace.embeddings());
    let pick = |idx: &[usize]| idx.iter().map(|&i| emb[i + 1].clone()).collect::<Mat>();
    let expected = oracle_compress(&pick(&target), &pick(&source), &js, &alpha);

    let rec0 = &out.trace.layers[0];
    assert_eq!(rec0.scores, scores);
    assert_eq!(rec0.discarded, vec![source[0] + 1]);
    assert!((rec0.assignments[0].weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let kept = to_mat(&out.workspace.select_rows(&[1, 2, 3]));
    assert!(max_abs_diff_mat(&kept, &expected) < 1e-12);
    assert_eq!(out.workspace.embeddings().row(0), w.workspace.embeddings().row(0));
}

#[test]
fn recorded_attention_replays_from_files() {
    let w = small(6, true, 4);
    let cfg = config(Variant::V, 8);
    let mut synth = SyntheticAttention::new(&w);
    let mut rec = RecordingSource::new(&mut synth);
    let live = run(&w.workspace, &mut rec, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let base = Workload::from_synthetic(&w).manifest;
    rec.save(dir.path(), &w.workspace, &base).unwrap();
    let mut loaded = load_workload(dir.path()).unwrap();
    assert_eq!(loaded.workspace, w.workspace);
    let again = run(&loaded.workspace, loaded.source.as_mut(), &cfg).unwrap();
    // attention is stored as f32, so only decisions are expected to match exactly
    for (a, b) in again.trace.layers.iter().zip(&live.trace.layers) {
        assert_eq!(a.discarded, b.discarded);
        assert_eq!(a.candidates, b.candidates);
        assert!(common::max_abs_diff(&a.scores, &b.scores) < 1e-6);
    }
    assert_eq!(again.workspace.original_index(), live.workspace.original_index());
    let diff = max_abs_diff_mat(&to_mat(again.workspace.embeddings()), &to_mat(live.workspace.embeddings()));
    assert!(diff < 1e-5, "{diff}");

    // a different schedule makes the stored maps stale
    let mut loaded = load_workload(dir.path()).unwrap();
    let drift = ReductionConfig { discard: DiscardPlan::KeepBudget(20), ..cfg };
    let err = run(&loaded.workspace, loaded.source.as_mut(), &drift).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn decoder_without_text_is_rejected() {
    let w = small(7, true, 0);
    let err = run(&w.workspace, &mut SyntheticAttention::new(&w), &config(Variant::L, 10)).unwrap_err();
    assert!(matches!(err, Error::NoText));
}

#[test]
fn cls_row_needs_a_cls_token() {
    let w = small(8, false, 2);
    let err = run(&w.workspace, &mut SyntheticAttention::new(&w), &config(Variant::V, 10)).unwrap_err();
    assert!(matches!(err, Error::AbsentCls));
    let cfg = ReductionConfig { cls_mode: ClsMode::KeyMeanEquivalent, ..config(Variant::V, 10) };
    let out = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
    assert_eq!(out.summary.final_visual, 10);
}

#[test]
fn trace_roundtrip_and_replay() {
    let w = small(9, true, 3);
    let cfg = ReductionConfig {
        start_layer: 0,
        num_layers: 2,
        discard: DiscardPlan::PerLayer(vec![2, 0]),
        ..config(Variant::V, 0)
    };
    let out = run(&w.workspace, &mut SyntheticAttention::new(&w), &cfg).unwrap();
    assert_eq!(out.trace.layers.len(), 2);
    assert_eq!(out.trace.layers[0].discarded.len(), 2);
    assert!(out.trace.layers[1].discarded.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.json");
    write_trace(&path, &out.trace).unwrap();
    let back = read_trace(&path).unwrap();
    assert_eq!(back, out.trace);
    assert_eq!(replay(&w.workspace, &back).unwrap(), out.workspace);
}

#[test]
fn even_split_puts_remainder_first() {
    let s = plan_schedule(576, &DiscardPlan::KeepBudget(64), 12, 24).unwrap();
    assert_eq!(&s.per_layer_discard[..12], &[0; 12]);
    assert_eq!(&s.per_layer_discard[12..20], &[43; 8]);
    assert_eq!(&s.per_layer_discard[20..], &[42; 4]);
    assert_eq!(s.total(), 512);
    assert!(plan_schedule(576, &DiscardPlan::KeepBudget(600), 12, 24).is_err());
    assert!(plan_schedule(10, &DiscardPlan::PerLayer(vec![1, 0]), 1, 2).is_err());
}
