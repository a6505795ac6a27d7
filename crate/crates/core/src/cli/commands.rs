use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Format, FusedMode, RunConfig};
use super::render::{self, on_off, SweepRow};
use super::{CliError, Report, EXIT_VERIFY_FAILED};
use crate::instance::Instance;
use crate::model::{HardwareProfile, ModelConfig};
use crate::perfmodel::{
    layer_report, naive_expert_gemm_launches, LayerReport, TrafficConvention, TrafficReport, Verdict,
    EXPERT_SCALING_GRID,
};
use crate::pipeline::{dense_moe_oracle, max_relative_error, moe_forward};
use crate::router::{route, RoutingResult};
use crate::scheduler::{build_block_schedule, expert_histogram, expert_offsets, ExpertOffsets, ScheduleEntry};
use crate::skew::{imbalance_metrics, synthesize_routing, Distribution, ImbalanceMetrics, RoutingDump, SkewSpec};

/// Largest accepted max relative error in `verify`.
pub const VERIFY_TOLERANCE: f64 = 1e-5;

const DEFAULT_BATCH: usize = 512;
const VERIFY_BATCH: usize = 16;

fn default_skews() -> [Distribution; 3] {
    [
        Distribution::Uniform,
        Distribution::Zipf { alpha: 1.2 },
        Distribution::Zipf { alpha: 2.0 },
    ]
}

// ---------------------------------------------------------------- verify

/// Same E, k and gating with `d` replaced and `d_ffn` scaled to keep the
/// `d_ffn / d` ratio.
pub fn shrink(config: &ModelConfig, d: usize) -> Result<ModelConfig, CliError> {
    if d == 0 {
        return Err(CliError::Config("--verify-dim must be >= 1".into()));
    }
    let f = (config.ffn_dim as f64 * d as f64 / config.hidden_dim as f64).round() as usize;
    let c = ModelConfig {
        hidden_dim: d,
        ffn_dim: f.max(1),
        ..config.clone()
    };
    c.validate()?;
    Ok(c)
}

/// Smallest `block_m >= 2` that leaves some expert with a partial row tile.
fn non_dividing_block_m(counts: &[usize]) -> usize {
    if counts.iter().all(|&c| c == 0) {
        return 2;
    }
    (2..).find(|&m| counts.iter().any(|&c| c % m != 0)).expect("some count is nonzero")
}

fn partial_tiles(offsets: &ExpertOffsets, block_m: usize) -> Result<usize, CliError> {
    let s = build_block_schedule(offsets, block_m)?;
    Ok(s.entries.iter().filter(|&&e| s.rows(e, offsets).len() < block_m).count())
}

#[derive(Debug, Clone, Serialize)]
struct VerifyRun {
    batch: usize,
    seed: u64,
    block_m: usize,
    block_n: usize,
    block_k: usize,
    fused: bool,
    max_rel_error: f64,
    partial_tiles: usize,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    model: &'a str,
    config: ModelConfig,
    tolerance: f64,
    passed: bool,
    runs: Vec<VerifyRun>,
}

pub fn cmd_verify(rc: &RunConfig, instances: usize, dim: usize) -> Result<Report, CliError> {
    let cfg = shrink(&rc.model, dim)?;
    let fused = rc.fused.unwrap_or(FusedMode::Both);
    let mut runs = Vec::new();
    for b in rc.batches_or(&[VERIFY_BATCH]) {
        for i in 0..instances.max(1) as u64 {
            let seed = rc.seed.wrapping_add(i);
            let inst = Instance::random(&cfg, b, seed);
            let reference = dense_moe_oracle(&inst.tokens, &inst.router_weight, &inst.weights, &cfg)?;
            let routing = route(&inst.tokens, &inst.router_weight, &cfg)?;
            let counts = expert_histogram(&routing, cfg.num_experts)?;
            let offsets = expert_offsets(&counts);

            let mut tiles = vec![(rc.block_m, rc.block_n, rc.block_k)];
            if partial_tiles(&offsets, rc.block_m)? == 0 || b == 0 {
                tiles.push((non_dividing_block_m(&counts), 5, 7));
            }
            for (bm, bn, bk) in tiles {
                for &f in fused.variants() {
                    let params = crate::pipeline::PipelineParams::new(bm, bn, bk, f)?;
                    let (out, _) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &cfg, &params)?;
                    let err = max_relative_error(&out, &reference);
                    runs.push(VerifyRun {
                        batch: b,
                        seed,
                        block_m: bm,
                        block_n: bn,
                        block_k: bk,
                        fused: f,
                        max_rel_error: err,
                        partial_tiles: partial_tiles(&offsets, bm)?,
                        pass: err <= VERIFY_TOLERANCE,
                    });
                }
            }
        }
    }
    let passed = runs.iter().all(|r| r.pass);
    let text = match rc.format.unwrap_or(Format::Md) {
        Format::Json => render::json(&VerifyReport {
            model: &rc.model_name,
            config: cfg.clone(),
            tolerance: VERIFY_TOLERANCE,
            passed,
            runs,
        }),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &runs {
                w.serialize(r).map_err(|e| CliError::Config(e.to_string()))?;
            }
            String::from_utf8(w.into_inner().map_err(|e| CliError::Config(e.to_string()))?)
                .expect("csv output is utf-8")
        }
        Format::Md => {
            let rows: Vec<Vec<String>> = runs
                .iter()
                .map(|r| {
                    vec![
                        r.batch.to_string(),
                        r.seed.to_string(),
                        format!("{}x{}x{}", r.block_m, r.block_n, r.block_k),
                        on_off(r.fused).into(),
                        format!("{:.3e}", r.max_rel_error),
                        r.partial_tiles.to_string(),
                        if r.pass { "pass" } else { "FAIL" }.into(),
                    ]
                })
                .collect();
            let ok = runs.iter().filter(|r| r.pass).count();
            format!(
                "# verify {} (E={}, k={}, d={}, d_ffn={})\n\n{}\n{ok}/{} runs within {VERIFY_TOLERANCE:e}: {}\n",
                rc.model_name,
                cfg.num_experts,
                cfg.top_k,
                cfg.hidden_dim,
                cfg.ffn_dim,
                render::md_table(
                    &["batch", "seed", "tile", "fused", "max rel error", "partial tiles", "result"],
                    &rows
                ),
                runs.len(),
                if passed { "PASS" } else { "FAIL" },
            )
        }
    };
    let mut report = Report::ok(text, rc.out.clone());
    if !passed {
        report.exit_code = EXIT_VERIFY_FAILED;
    }
    Ok(report)
}

// ---------------------------------------------------------------- shared

fn synthesize(config: &ModelConfig, dist: Distribution, seed: u64, batch: usize) -> Result<(RoutingResult, Vec<usize>), CliError> {
    let spec = SkewSpec::new(dist, seed, batch, config);
    let routing = synthesize_routing(&spec)?;
    let counts = expert_histogram(&routing, config.num_experts)?;
    Ok((routing, counts))
}

fn metrics_or_zero(counts: &[usize]) -> ImbalanceMetrics {
    imbalance_metrics(counts).unwrap_or(ImbalanceMetrics {
        max_over_mean: 0.0,
        gini: 0.0,
        active_experts: 0,
    })
}

/// Seed-averaged imbalance; active experts become a mean too.
#[derive(Debug, Clone, Copy, Default, Serialize)]
struct MeanImbalance {
    max_over_mean: f64,
    gini: f64,
    active_experts: f64,
}

impl MeanImbalance {
    fn of(metrics: &[ImbalanceMetrics]) -> Self {
        let n = metrics.len().max(1) as f64;
        Self {
            max_over_mean: metrics.iter().map(|m| m.max_over_mean).sum::<f64>() / n,
            gini: metrics.iter().map(|m| m.gini).sum::<f64>() / n,
            active_experts: metrics.iter().map(|m| m.active_experts as f64).sum::<f64>() / n,
        }
    }
}

struct RowContext<'a> {
    label: &'a str,
    dist: Distribution,
    seed: u64,
    imbalance: MeanImbalance,
}

fn verdict_for(ai: f64, hw: &HardwareProfile) -> Verdict {
    if ai >= hw.ridge_point() {
        Verdict::ComputeBound
    } else {
        Verdict::MemoryBound
    }
}

/// Rows for one layer report: optional per-stage rows, the expert FFN
/// aggregate, then the layer total. Minimal-traffic convention throughout.
fn layer_rows(ctx: &RowContext, rep: &LayerReport, fused_variants: &[bool], per_stage: bool) -> Vec<SweepRow> {
    let c = &rep.config;
    let row = |fused: bool, stage: &'static str, flops: u64, bytes: u64, secs: f64| {
        let ai = if bytes > 0 { flops as f64 / bytes as f64 } else { 0.0 };
        SweepRow {
            model: ctx.label.to_string(),
            num_experts: c.num_experts,
            k: c.top_k,
            d: c.hidden_dim,
            d_ffn: c.ffn_dim,
            batch: rep.num_tokens,
            fused: on_off(fused),
            distribution: ctx.dist.name(),
            alpha: ctx.dist.alpha(),
            seed: ctx.seed,
            stage,
            flops,
            bytes,
            ai,
            verdict: verdict_for(ai, &rep.hardware).name(),
            predicted_seconds: secs,
            max_over_mean: ctx.imbalance.max_over_mean,
            gini: ctx.imbalance.gini,
            active_experts: ctx.imbalance.active_experts,
            launches_naive: rep.launches_naive,
            launches_pipeline: rep.launches_pipeline,
        }
    };
    let mut rows = Vec::new();
    for &fused in fused_variants {
        if per_stage {
            for s in rep.stats(TrafficConvention::Minimal, fused) {
                rows.push(row(fused, s.stage.name(), s.flops, s.bytes, s.predicted_seconds));
            }
            let ffn: Vec<_> = rep
                .stats(TrafficConvention::Minimal, fused)
                .filter(|s| s.stage.is_expert_ffn())
                .collect();
            rows.push(row(
                fused,
                "expert_ffn",
                ffn.iter().map(|s| s.flops).sum(),
                ffn.iter().map(|s| s.bytes).sum(),
                ffn.iter().map(|s| s.predicted_seconds).sum(),
            ));
        }
        rows.push(row(
            fused,
            "total",
            rep.total_flops(TrafficConvention::Minimal, fused),
            rep.total_bytes(TrafficConvention::Minimal, fused),
            rep.total_seconds(TrafficConvention::Minimal, fused),
        ));
    }
    rows
}

fn rows_md(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.num_experts.to_string(),
                r.k.to_string(),
                r.d_ffn.to_string(),
                r.batch.to_string(),
                r.fused.into(),
                if r.alpha > 0.0 { format!("zipf:{}", r.alpha) } else { r.distribution.into() },
                r.stage.into(),
                format!("{:.1}", r.ai),
                r.verdict.into(),
                render::micros(r.predicted_seconds),
                format!("{:.3}", r.max_over_mean),
                format!("{:.3}", r.gini),
            ]
        })
        .collect();
    render::md_table(
        &[
            "model", "E", "k", "d_ffn", "batch", "fused", "routing", "stage", "AI", "verdict",
            "predicted (us)", "max/mean", "gini",
        ],
        &body,
    )
}

fn render_rows(rows: &[SweepRow], format: Format) -> Result<String, CliError> {
    match format {
        Format::Csv => render::sweep_csv(rows),
        Format::Json => Ok(render::json(&rows)),
        Format::Md => Ok(rows_md(rows)),
    }
}

// ---------------------------------------------------------------- analyze

#[derive(Serialize)]
struct AnalyzeCell {
    model: String,
    distribution: Distribution,
    seed: u64,
    imbalance: Option<ImbalanceMetrics>,
    naive_expert_gemm_launches: u64,
    report: LayerReport,
}

fn traffic_row(name: &str, t: &TrafficReport) -> Vec<String> {
    vec![
        name.into(),
        t.unfused_bytes.to_string(),
        t.fused_bytes.to_string(),
        t.savings_bytes.to_string(),
        format!("{:.1}%", 100.0 * t.savings_ratio),
    ]
}

fn analyze_md(cell: &AnalyzeCell, fused_variants: &[bool]) -> String {
    let r = &cell.report;
    let c = &r.config;
    let mut s = format!(
        "## {}: B={}, {} routing, seed {}\n\n",
        cell.model, r.num_tokens, cell.distribution, cell.seed
    );
    s.push_str(&format!(
        "E={}, k={}, d={}, d_ffn={}, tiles {}x{}x{}; {} (ridge {:.1} FLOP/B)\n\n",
        c.num_experts,
        c.top_k,
        c.hidden_dim,
        c.ffn_dim,
        r.params.block_m,
        r.params.block_n,
        r.params.block_k,
        r.hardware.name,
        r.hardware.ridge_point()
    ));
    let mut rows = Vec::new();
    for &fused in fused_variants {
        for st in r.stats(TrafficConvention::Minimal, fused) {
            let traced = r
                .stage(st.stage, TrafficConvention::TileTrace, fused)
                .map_or(0, |t| t.bytes);
            rows.push(vec![
                st.stage.name().to_string(),
                on_off(fused).into(),
                st.flops.to_string(),
                st.bytes.to_string(),
                format!("{:.1}", st.arithmetic_intensity),
                st.verdict.name().into(),
                render::micros(st.predicted_seconds),
                traced.to_string(),
            ]);
        }
    }
    s.push_str(&render::md_table(
        &["stage", "fused", "FLOPs", "bytes", "AI", "verdict", "predicted (us)", "tile-trace bytes"],
        &rows,
    ));
    s.push_str(&format!(
        "\nExpert FFN AI: fused {:.1} ({}), unfused {:.1} ({})\n",
        r.expert_ffn_fused.arithmetic_intensity,
        r.expert_ffn_fused.verdict.name(),
        r.expert_ffn_unfused.arithmetic_intensity,
        r.expert_ffn_unfused.verdict.name()
    ));
    s.push_str(&format!(
        "Predicted time share (fused): expert FFN {:.1}%, permute+unpermute {:.2}%\n",
        100.0 * r.expert_ffn_share,
        100.0 * r.permute_share
    ));
    s.push_str(&format!(
        "Kernel launches: per-expert loop {} ({} expert GEMMs), pipeline {}\n",
        r.launches_naive, cell.naive_expert_gemm_launches, r.launches_pipeline
    ));
    if let Some(m) = &cell.imbalance {
        s.push_str(&format!(
            "Imbalance: max/mean {:.3}, gini {:.3}, active experts {}\n",
            m.max_over_mean, m.gini, m.active_experts
        ));
    }
    s.push_str("\nGate+up activation traffic (bytes):\n\n");
    s.push_str(&render::md_table(
        &["source", "unfused", "fused", "savings", "ratio"],
        &[
            traffic_row("closed form", &r.traffic_closed_form),
            traffic_row("tile trace", &r.traffic_tile_trace),
            traffic_row("tile trace, all buffers", &r.traffic_all_buffers),
        ],
    ));
    s
}

pub fn cmd_analyze(rc: &RunConfig) -> Result<Report, CliError> {
    let hw = rc.hardware()?;
    let fused = rc.fused.unwrap_or(FusedMode::Both).variants();
    let mut cells = Vec::new();
    for b in rc.batches_or(&[DEFAULT_BATCH]) {
        for dist in rc.skew_or(&[Distribution::Uniform]) {
            let (_, counts) = synthesize(&rc.model, dist, rc.seed, b)?;
            cells.push(AnalyzeCell {
                model: rc.model_name.clone(),
                distribution: dist,
                seed: rc.seed,
                imbalance: imbalance_metrics(&counts).ok(),
                naive_expert_gemm_launches: naive_expert_gemm_launches(rc.model.num_experts),
                report: layer_report(&rc.model, b, &counts, &hw, &rc.params(true)?)?,
            });
        }
    }
    let text = match rc.format.unwrap_or(Format::Md) {
        Format::Json => render::json(&cells),
        Format::Md => {
            let parts: Vec<String> = cells.iter().map(|c| analyze_md(c, fused)).collect();
            format!("# analyze {}\n\n{}", rc.model_name, parts.join("\n"))
        }
        Format::Csv => {
            let mut rows = Vec::new();
            for c in &cells {
                let ctx = RowContext {
                    label: &c.model,
                    dist: c.distribution,
                    seed: c.seed,
                    imbalance: MeanImbalance::of(&c.imbalance.into_iter().collect::<Vec<_>>()),
                };
                rows.extend(layer_rows(&ctx, &c.report, fused, true));
            }
            render::sweep_csv(&rows)?
        }
    };
    Ok(Report::ok(text, rc.out.clone()))
}

// ---------------------------------------------------------------- sweep

pub fn cmd_sweep(rc: &RunConfig, expert_grid: bool, per_stage: bool) -> Result<Report, CliError> {
    if !expert_grid && rc.batch_sizes.is_empty() {
        return Err(CliError::Config(
            "sweep needs a sweep axis: --batch and/or --expert-grid".into(),
        ));
    }
    let hw = rc.hardware()?;
    let configs: Vec<(String, ModelConfig)> = if expert_grid {
        EXPERT_SCALING_GRID
            .iter()
            .map(|&(e, k, f)| {
                let c = ModelConfig {
                    num_experts: e,
                    top_k: k,
                    ffn_dim: f,
                    ..rc.model.clone()
                };
                c.validate().map(|_| (format!("grid-e{e}-k{k}"), c))
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![(rc.model_name.clone(), rc.model.clone())]
    };
    let fused = rc.fused.unwrap_or(FusedMode::On).variants();
    let params = rc.params(true)?;
    let mut rows = Vec::new();
    for (label, config) in &configs {
        for b in rc.batches_or(&[DEFAULT_BATCH]) {
            for dist in rc.skew_or(&[Distribution::Uniform]) {
                let (_, counts) = synthesize(config, dist, rc.seed, b)?;
                let rep = layer_report(config, b, &counts, &hw, &params)?;
                let ctx = RowContext {
                    label,
                    dist,
                    seed: rc.seed,
                    imbalance: MeanImbalance::of(&[metrics_or_zero(&counts)]),
                };
                rows.extend(layer_rows(&ctx, &rep, fused, per_stage));
            }
        }
    }
    let text = render_rows(&rows, rc.format.unwrap_or(Format::Csv))?;
    Ok(Report::ok(text, rc.out.clone()))
}

// ---------------------------------------------------------------- skew

fn dump_path(base: &Path, dist: Distribution, batch: usize, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("routing");
    let tag = match dist {
        Distribution::Uniform => "uniform".to_string(),
        Distribution::Zipf { alpha } => format!("zipf{alpha}"),
    };
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{tag}-b{batch}.{ext}"),
        None => format!("{stem}-{tag}-b{batch}"),
    };
    base.with_file_name(name)
}

pub fn cmd_skew(rc: &RunConfig, seeds: usize, per_stage: bool, dump: Option<&Path>) -> Result<Report, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let hw = rc.hardware()?;
    let fused = rc.fused.unwrap_or(FusedMode::On).variants();
    let params = rc.params(true)?;
    let batches = rc.batches_or(&[DEFAULT_BATCH]);
    let dists = rc.skew_or(&default_skews());
    let many = batches.len() * dists.len() > 1;
    let mut rows = Vec::new();
    for &b in &batches {
        for &dist in &dists {
            let (routing, counts) = synthesize(&rc.model, dist, rc.seed, b)?;
            debug_assert_eq!(counts.iter().sum::<usize>(), b * rc.model.top_k);
            let mut metrics = vec![metrics_or_zero(&counts)];
            for s in 1..seeds as u64 {
                let (_, c) = synthesize(&rc.model, dist, rc.seed.wrapping_add(s), b)?;
                metrics.push(metrics_or_zero(&c));
            }
            if let Some(base) = dump {
                let path = dump_path(base, dist, b, many);
                let spec = SkewSpec::new(dist, rc.seed, b, &rc.model);
                std::fs::write(&path, RoutingDump::new(&routing, spec).to_json())
                    .map_err(|e| CliError::io(&path, e))?;
            }
            let rep = layer_report(&rc.model, b, &counts, &hw, &params)?;
            let ctx = RowContext {
                label: &rc.model_name,
                dist,
                seed: rc.seed,
                imbalance: MeanImbalance::of(&metrics),
            };
            rows.extend(layer_rows(&ctx, &rep, fused, per_stage));
        }
    }
    let text = render_rows(&rows, rc.format.unwrap_or(Format::Csv))?;
    Ok(Report::ok(text, rc.out.clone()))
}

// ---------------------------------------------------------------- schedule

#[derive(Debug, Serialize)]
struct ScheduleDump {
    source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distribution: Option<Distribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    num_experts: usize,
    block_m: usize,
    histogram: Vec<usize>,
    offsets: ExpertOffsets,
    entry_count: usize,
    expected_entry_count: usize,
    schedule: Vec<ScheduleEntry>,
}

fn schedule_dump(source: &'static str, counts: Vec<usize>, block_m: usize) -> Result<ScheduleDump, CliError> {
    let offsets = expert_offsets(&counts);
    let schedule = build_block_schedule(&offsets, block_m)?;
    let expected: usize = counts.iter().map(|c| c.div_ceil(block_m)).sum();
    if schedule.len() != expected {
        return Err(CliError::Moe(crate::MoeError::ScheduleMismatch(format!(
            "{} entries, histogram implies {expected}",
            schedule.len()
        ))));
    }
    Ok(ScheduleDump {
        source,
        model: None,
        batch: None,
        distribution: None,
        seed: None,
        num_experts: counts.len(),
        block_m,
        histogram: counts,
        offsets,
        entry_count: schedule.len(),
        expected_entry_count: expected,
        schedule: schedule.entries,
    })
}

pub fn cmd_schedule(rc: &RunConfig, counts: Option<&[usize]>, routing: Option<&Path>) -> Result<Report, CliError> {
    if matches!(rc.format, Some(Format::Csv | Format::Md)) {
        return Err(CliError::Config("schedule output is json only".into()));
    }
    let text = if let Some(counts) = counts {
        if counts.is_empty() {
            return Err(CliError::Config("--counts needs at least one expert".into()));
        }
        render::json(&schedule_dump("counts", counts.to_vec(), rc.block_m)?)
    } else if let Some(path) = routing {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let dump = RoutingDump::from_json(&text)?;
        let r = dump.routing()?;
        let mut out = schedule_dump("routing", expert_histogram(&r, dump.spec.num_experts)?, rc.block_m)?;
        out.batch = Some(dump.spec.num_tokens);
        out.distribution = Some(dump.spec.distribution);
        out.seed = Some(dump.spec.seed);
        render::json(&out)
    } else {
        let dist = rc.skew_or(&[Distribution::Uniform])[0];
        let mut dumps = Vec::new();
        for b in rc.batches_or(&[DEFAULT_BATCH]) {
            let (_, c) = synthesize(&rc.model, dist, rc.seed, b)?;
            let mut out = schedule_dump("synthetic", c, rc.block_m)?;
            out.model = Some(rc.model_name.clone());
            out.batch = Some(b);
            out.distribution = Some(dist);
            out.seed = Some(rc.seed);
            dumps.push(out);
        }
        if dumps.len() == 1 {
            render::json(&dumps[0])
        } else {
            render::json(&dumps)
        }
    };
    Ok(Report::ok(text, rc.out.clone()))
}
