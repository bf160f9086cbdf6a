//! Text, CSV and JSON views of summaries and traces.

use std::fmt::Write;

use ficoco::{ReductionTrace, RunSummary};
use serde::Serialize;

pub const ALIVE: char = '#';
pub const DISCARDED: char = 'x';
pub const DEAD: char = '.';
pub const TRACKED: char = '@';

pub fn summary_text(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "variant {:?}: {} -> {} visual tokens, {} tokens in total",
        s.variant, s.initial_visual, s.final_visual, s.final_tokens
    );
    let active: Vec<String> = s
        .schedule
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0)
        .map(|(l, d)| format!("{l}:{d}"))
        .collect();
    let _ = writeln!(out, "discards (layer:count): {}", active.join(" "));
    let f = &s.flops;
    let _ = writeln!(
        out,
        "flops: before {} after {} saved {} ({:.2}%), overhead {}",
        f.total_before, f.total_after, f.total_delta, f.percent_reduction, f.total_overhead
    );
    if !f.warnings.is_empty() {
        let _ = writeln!(out, "warning: closed form disagrees with the exact difference, layers affected: {}", f.warnings.len());
    }
    out
}

/// Per-layer state of every grid cell after the layer has run.
enum Cell {
    Alive,
    Discarded,
    Dead,
}

struct Replay<'a> {
    trace: &'a ReductionTrace,
    dead: Vec<bool>,
}

impl<'a> Replay<'a> {
    fn new(trace: &'a ReductionTrace) -> Self {
        Self { trace, dead: vec![false; trace.num_visual()] }
    }

    /// States after layer `k`; must be called in layer order.
    fn advance(&mut self, k: usize) -> Vec<Cell> {
        let rec = &self.trace.layers[k];
        let now: Vec<usize> = rec.discarded.iter().map(|&o| o - self.trace.first_visual_index).collect();
        let cells = (0..self.dead.len())
            .map(|v| {
                if now.contains(&v) {
                    Cell::Discarded
                } else if self.dead[v] {
                    Cell::Dead
                } else {
                    Cell::Alive
                }
            })
            .collect();
        for v in now {
            self.dead[v] = true;
        }
        cells
    }
}

fn grid_rows(trace: &ReductionTrace, cells: &[Cell], tracked: Option<usize>) -> Vec<String> {
    let tracked = tracked.map(|t| t - trace.first_visual_index);
    (0..trace.grid_rows)
        .map(|r| {
            (0..trace.grid_cols)
                .map(|c| {
                    let v = r * trace.grid_cols + c;
                    match &cells[v] {
                        Cell::Alive if tracked == Some(v) => TRACKED,
                        Cell::Alive => ALIVE,
                        Cell::Discarded => DISCARDED,
                        Cell::Dead => DEAD,
                    }
                })
                .collect()
        })
        .collect()
}

pub fn grid(trace: &ReductionTrace, tracked: Option<usize>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {:?} trace, {}x{} grid: '{ALIVE}' alive, '{DISCARDED}' discarded at this layer, '{DEAD}' discarded earlier, '{TRACKED}' tracked token",
        trace.variant, trace.grid_rows, trace.grid_cols
    );
    let mut replay = Replay::new(trace);
    let mut dead = 0;
    for (k, rec) in trace.layers.iter().enumerate() {
        let cells = replay.advance(k);
        dead += rec.discarded.len();
        let _ = writeln!(
            out,
            "layer {}: discarded {}, alive {}, dead {}",
            rec.layer,
            rec.discarded.len(),
            trace.num_visual() - dead,
            dead
        );
        for row in grid_rows(trace, &cells, tracked) {
            let _ = writeln!(out, "{row}");
        }
    }
    out
}

pub fn csv(trace: &ReductionTrace) -> String {
    let mut out = String::from("layer,token,row,col,state,score\n");
    let mut replay = Replay::new(trace);
    for (k, rec) in trace.layers.iter().enumerate() {
        let cells = replay.advance(k);
        for (v, cell) in cells.iter().enumerate() {
            let token = trace.first_visual_index + v;
            let (row, col) = (v / trace.grid_cols, v % trace.grid_cols);
            let state = match cell {
                Cell::Alive => "alive",
                Cell::Discarded => "discarded",
                Cell::Dead => "dead",
            };
            let score = rec
                .candidates
                .iter()
                .position(|&c| c == token)
                .map_or(String::new(), |p| rec.scores[p].to_string());
            let _ = writeln!(out, "{},{token},{row},{col},{state},{score}", rec.layer);
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Received {
    pub layer: usize,
    pub mass: f64,
}

#[derive(Debug, Serialize)]
pub struct TokenReport {
    pub token: usize,
    pub row: usize,
    pub col: usize,
    /// Layer at which the token was discarded, if it was.
    pub discarded_at: Option<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    pub received: Vec<Received>,
}

pub fn token_report(trace: &ReductionTrace, token: usize) -> TokenReport {
    let cell = trace.cell_of(token).expect("caller checked the token");
    let mut report = TokenReport {
        token,
        row: cell.row,
        col: cell.col,
        discarded_at: None,
        targets: Vec::new(),
        weights: Vec::new(),
        weight_sum: 0.0,
        received: Vec::new(),
    };
    for rec in &trace.layers {
        if let Some(m) = rec.received_mass.iter().find(|m| m.target == token) {
            report.received.push(Received { layer: rec.layer, mass: m.mass });
        }
        if let Some(a) = rec.assignments.iter().find(|a| a.source == token) {
            report.discarded_at = Some(rec.layer);
            report.targets = a.targets.clone();
            report.weights = a.weights.clone();
            report.weight_sum = a.weights.iter().sum();
        } else if rec.discarded.contains(&token) {
            report.discarded_at = Some(rec.layer);
        }
    }
    report
}

pub fn token_text(trace: &ReductionTrace, token: usize) -> String {
    let r = token_report(trace, token);
    let mut out = format!("token {} at ({}, {})\n", r.token, r.row, r.col);
    for m in &r.received {
        let _ = writeln!(out, "  layer {}: received mass {}", m.layer, m.mass);
    }
    match r.discarded_at {
        None => out.push_str("  survives every layer\n"),
        Some(layer) if r.targets.is_empty() => {
            let _ = writeln!(out, "  layer {layer}: discarded without targets (pruned)");
        }
        Some(layer) => {
            let _ = writeln!(out, "  layer {layer}: discarded, merged into {} targets (weights sum {})", r.targets.len(), r.weight_sum);
            for (t, w) in r.targets.iter().zip(&r.weights) {
                let c = trace.cell_of(*t).expect("targets are visual");
                let _ = writeln!(out, "    target {t} at ({}, {}) weight {w}", c.row, c.col);
            }
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct LayerView {
    pub layer: usize,
    pub discarded: Vec<usize>,
    pub alive: usize,
    pub grid: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct TraceView {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub layers: Vec<LayerView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<TokenReport>,
}

pub fn trace_json(trace: &ReductionTrace, tracked: Option<usize>) -> TraceView {
    let mut replay = Replay::new(trace);
    let mut dead = 0;
    let layers = trace
        .layers
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let cells = replay.advance(k);
            dead += rec.discarded.len();
            LayerView {
                layer: rec.layer,
                discarded: rec.discarded.clone(),
                alive: trace.num_visual() - dead,
                grid: grid_rows(trace, &cells, tracked),
            }
        })
        .collect();
    TraceView {
        grid_rows: trace.grid_rows,
        grid_cols: trace.grid_cols,
        layers,
        token: tracked.map(|t| token_report(trace, t)),
    }
}
