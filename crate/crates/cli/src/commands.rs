use std::fs;
use std::path::Path;

use ficoco::flops::{overhead_flops, pipeline_cost, reduction_delta, Flops, LayerCostParams, ModelDims};
use ficoco::tensor_io::{write_tensor, TensorFile};
use ficoco::workload::{load_workload, save_synthetic, RecordingSource, Workload, MANIFEST};
use ficoco::{
    gen_workload, plant_redundancy, read_config, read_trace, run, write_trace, AttentionSource, Error,
    ReductionConfig, RunOutput, SynthParams, SyntheticAttention, SyntheticWorkload, Variant,
};
use serde::{Deserialize, Serialize};

use crate::render;
use crate::{CliError, CliResult, FlopsArgs, GenArgs, ReduceArgs, SynthArgs, TraceArgs};

pub const OUT_EMBEDDINGS: &str = "embeddings.npy";
pub const OUT_TRACE: &str = "trace.json";
pub const OUT_SUMMARY: &str = "summary.json";

fn synthesize(gen: &GenArgs, grid: (usize, usize), layers: usize, seed: u64) -> CliResult<SyntheticWorkload> {
    let params = SynthParams {
        grid_rows: grid.0,
        grid_cols: grid.1,
        num_text: gen.text,
        width: gen.width,
        layers,
        seed,
        cls: !gen.no_cls,
        heads: gen.heads,
    };
    let w = gen_workload(&params)?;
    if gen.plant == 0 {
        return Ok(w);
    }
    let plant_seed = gen.plant_seed.unwrap_or(seed.wrapping_add(1));
    Ok(plant_redundancy(&w, gen.plant, gen.sigma, plant_seed)?)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")
}

pub fn reduce(args: &ReduceArgs) -> CliResult<()> {
    let cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => ReductionConfig::for_variant(args.variant.map_or(Variant::V, Into::into)),
    };
    let mut workload = match &args.workload {
        Some(path) => load_workload(path)?,
        None => {
            let seed = args.gen.seed.unwrap_or(cfg.seed);
            Workload::from_synthetic(&synthesize(&args.gen, (cfg.grid_rows, cfg.grid_cols), cfg.num_layers, seed)?)
        }
    };

    let out = match &args.save_attention {
        Some(dir) => {
            let mut rec = RecordingSource::new(workload.source.as_mut());
            let out = run(&workload.workspace, &mut rec, &cfg)?;
            rec.save(dir, &workload.workspace, &workload.manifest)?;
            out
        }
        None => run(&workload.workspace, workload.source.as_mut(), &cfg)?,
    };

    if let Some(dir) = &args.out {
        write_outputs(dir, &out)?;
    }
    if args.json {
        print!("{}", to_json(&out.summary)?);
    } else {
        print!("{}", render::summary_text(&out.summary));
    }
    Ok(())
}

fn write_outputs(dir: &Path, out: &RunOutput) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    write_tensor(dir.join(OUT_EMBEDDINGS), &TensorFile::from_matrix(out.workspace.embeddings()))?;
    write_trace(dir.join(OUT_TRACE), &out.trace)?;
    fs::write(dir.join(OUT_SUMMARY), to_json(&out.summary)?)?;
    Ok(())
}

/// Either one layer (`discarded`) or a whole `schedule`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlopsParams {
    #[serde(default = "default_variant")]
    variant: Variant,
    width: u64,
    /// Defaults to 4 × width.
    ffn_width: Option<u64>,
    visual: u64,
    #[serde(default)]
    text: u64,
    discarded: Option<u64>,
    schedule: Option<Vec<usize>>,
}

fn default_variant() -> Variant {
    Variant::V
}

#[derive(Debug, Serialize)]
struct LayerReport {
    variant: Variant,
    before: Flops,
    after: Flops,
    delta: Flops,
    closed_form: Flops,
    overhead: Flops,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
}

fn read_params(raw: &str) -> CliResult<FlopsParams> {
    let text = if raw.trim_start().starts_with('{') {
        raw.to_string()
    } else {
        fs::read_to_string(raw).map_err(|e| Error::Config(format!("cannot read params {raw}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Engine(Error::Config(format!("flops params: {e}"))))
}

pub fn flops(args: &FlopsArgs) -> CliResult<()> {
    let p = read_params(&args.params)?;
    let ffn_width = p.ffn_width.unwrap_or(4 * p.width);
    match (p.discarded, &p.schedule) {
        (Some(discarded), None) => {
            if discarded > p.visual {
                return Err(Error::Budget(format!("cannot discard {discarded} of {} visual tokens", p.visual)).into());
            }
            let params = LayerCostParams { width: p.width, ffn_width, visual: p.visual, discarded, text: p.text };
            let delta = reduction_delta(&params, p.variant)?;
            let report = LayerReport {
                variant: p.variant,
                before: delta.before,
                after: delta.after,
                delta: delta.delta,
                closed_form: delta.closed_form,
                overhead: overhead_flops(&params, p.variant)?,
                warning: delta.warning.map(|w| w.message),
            };
            if args.json {
                print!("{}", to_json(&report)?);
            } else {
                println!("before={} after={} delta={}", report.before, report.after, report.delta);
                println!("closed_form={} overhead={}", report.closed_form, report.overhead);
                if let Some(w) = &report.warning {
                    println!("warning: {w}");
                }
            }
        }
        (None, Some(schedule)) => {
            let dims = ModelDims { width: p.width, ffn_width, visual: p.visual, text: p.text };
            let cost = pipeline_cost(schedule, dims, p.variant)?;
            if args.json {
                print!("{}", to_json(&cost)?);
            } else {
                println!(
                    "before={} after={} delta={} ({:.2}% reduction)",
                    cost.total_before, cost.total_after, cost.total_delta, cost.percent_reduction
                );
                println!("overhead={}", cost.total_overhead);
                if !cost.warnings.is_empty() {
                    println!("warning: closed form disagrees with the exact difference, layers affected: {}", cost.warnings.len());
                }
            }
        }
        _ => {
            return Err(Error::Config("flops params need exactly one of `discarded` and `schedule`".into()).into())
        }
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let seed = args.gen.seed.unwrap_or(0);
    let w = synthesize(&args.gen, (args.grid_rows, args.grid_cols), args.layers, seed)?;
    save_synthetic(&args.out, &w)?;
    if let Some(layer) = args.preview {
        let variant = args.variant.into();
        let att = SyntheticAttention::new(&w).layer_attention(layer, &w.workspace, variant)?;
        let name = format!("preview_attention_{layer:02}.npy");
        write_tensor(args.out.join(name), &TensorFile::from_stack(att.view.stack()))?;
    }
    let manifest = Workload::from_synthetic(&w).manifest;
    if args.json {
        print!("{}", to_json(&manifest)?);
    } else {
        println!(
            "wrote {} ({} tokens: {}{}x{} visual + {} text, width {}, {} layers, {} planted)",
            args.out.join(MANIFEST).display(),
            w.workspace.len(),
            if w.params.cls { "CLS + " } else { "" },
            w.params.grid_rows,
            w.params.grid_cols,
            w.params.num_text,
            w.params.width,
            w.params.layers,
            w.planted.len()
        );
    }
    Ok(())
}

pub fn trace(args: &TraceArgs) -> CliResult<()> {
    let trace = read_trace(&args.trace)?;
    if let Some(token) = args.token {
        if !trace.is_visual(token) {
            let first = trace.first_visual_index;
            return Err(CliError::Usage(format!(
                "token {token} is not a visual token of this trace; valid range is {first}..={}",
                first + trace.num_visual() - 1
            )));
        }
    }
    let text = match (args.json, args.format) {
        (true, _) => to_json(&render::trace_json(&trace, args.token))?,
        (false, crate::Format::Grid) => render::grid(&trace, args.token),
        (false, crate::Format::Csv) => render::csv(&trace),
    };
    print!("{text}");
    if let (false, Some(token)) = (args.json, args.token) {
        print!("{}", render::token_text(&trace, token));
    }
    Ok(())
}
