//! Analytical traffic, FLOP and roofline model of the dispatch pipeline.
//!
//! Two byte-count conventions are kept side by side:
//!
//! * **minimal**: every tensor is read or written exactly once per stage and
//!   only experts that received tokens have their weights loaded;
//! * **tile trace**: the counts recorded by the tile executor, where each
//!   schedule entry reloads its expert's weight tiles. With many small
//!   per-expert batches this is what makes weight loading dominate.
//!
//! Predicted stage time is the plain roofline `max(flops / peak, bytes / bw)`
//! with no overlap or efficiency factor. The model is meant for orderings and
//! bounds, not absolute latencies.

use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::model::{HardwareProfile, ModelConfig};
use crate::pipeline::{plan_trace, PipelineParams, PipelineTrace, Stage, StageTrace, SILU_FLOPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    MemoryBound,
    ComputeBound,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::MemoryBound => "memory_bound",
            Verdict::ComputeBound => "compute_bound",
        }
    }
}

/// A (FLOPs, bytes) pair placed on a hardware roofline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub flops: u64,
    pub bytes: u64,
    pub arithmetic_intensity: f64,
    pub verdict: Verdict,
    pub predicted_seconds: f64,
}

/// Places a stage on the roofline. A stage at exactly the ridge point counts
/// as compute-bound.
pub fn roofline(flops: u64, bytes: u64, hw: &HardwareProfile) -> Result<RooflinePoint> {
    if flops == 0 && bytes == 0 {
        return Err(MoeError::DegenerateStage);
    }
    let ai = if bytes > 0 {
        flops as f64 / bytes as f64
    } else {
        f64::INFINITY
    };
    let verdict = if ai >= hw.ridge_point() {
        Verdict::ComputeBound
    } else {
        Verdict::MemoryBound
    };
    let predicted_seconds = (flops as f64 / hw.peak_flops).max(bytes as f64 / hw.mem_bandwidth);
    Ok(RooflinePoint {
        flops,
        bytes,
        arithmetic_intensity: ai,
        verdict,
        predicted_seconds,
    })
}

/// Like [`roofline`] but maps an idle stage to a zero-time memory-bound point.
fn roofline_or_idle(flops: u64, bytes: u64, hw: &HardwareProfile) -> RooflinePoint {
    roofline(flops, bytes, hw).unwrap_or(RooflinePoint {
        flops: 0,
        bytes: 0,
        arithmetic_intensity: 0.0,
        verdict: Verdict::MemoryBound,
        predicted_seconds: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficConvention {
    Minimal,
    TileTrace,
}

impl TrafficConvention {
    pub fn name(self) -> &'static str {
        match self {
            TrafficConvention::Minimal => "minimal",
            TrafficConvention::TileTrace => "tile_trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: Stage,
    pub fused: bool,
    pub convention: TrafficConvention,
    pub flops: u64,
    pub bytes: u64,
    pub arithmetic_intensity: f64,
    pub verdict: Verdict,
    pub predicted_seconds: f64,
}

impl StageStats {
    fn from_point(stage: Stage, fused: bool, convention: TrafficConvention, p: RooflinePoint) -> Self {
        Self {
            stage,
            fused,
            convention,
            flops: p.flops,
            bytes: p.bytes,
            arithmetic_intensity: p.arithmetic_intensity,
            verdict: p.verdict,
            predicted_seconds: p.predicted_seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficSource {
    /// The closed-form gate+up activation formulas.
    ClosedForm,
    /// Tile-trace counters grouped into the closed form's terms: A reads plus
    /// `gate_out`/`up_out` writes and read-backs for the unfused path, A reads
    /// plus the intermediate write for the fused path.
    TileTrace,
    /// Tile-trace counters over every activation buffer touched, including
    /// the unfused path's intermediate write.
    TileTraceAllBuffers,
}

/// Gate+up activation traffic, unfused vs fused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub unfused_bytes: u64,
    pub fused_bytes: u64,
    pub savings_bytes: u64,
    pub savings_ratio: f64,
    pub source: TrafficSource,
}

impl TrafficReport {
    fn new(unfused_bytes: u64, fused_bytes: u64, source: TrafficSource) -> Self {
        let savings_bytes = unfused_bytes.saturating_sub(fused_bytes);
        let savings_ratio = if unfused_bytes > 0 {
            savings_bytes as f64 / unfused_bytes as f64
        } else {
            0.0
        };
        Self {
            unfused_bytes,
            fused_bytes,
            savings_bytes,
            savings_ratio,
            source,
        }
    }
}

/// Unfused `8TF + 4Td` and fused `2TF + 2Td` bytes. Those formulas assume
/// 2-byte elements, so they are scaled by `element_bytes / 2`.
pub fn activation_traffic_closed_form(t: u64, f: u64, d: u64, element_bytes: u64) -> TrafficReport {
    // (8TF + 4Td) * eb / 2 == (4TF + 2Td) * eb, which stays exact for odd eb
    let unfused = (4 * t * f + 2 * t * d) * element_bytes;
    let fused = (t * f + t * d) * element_bytes;
    TrafficReport::new(unfused, fused, TrafficSource::ClosedForm)
}

/// Traffic report built from gate+up stage traces, on the closed form's term
/// set.
pub fn activation_traffic_from_traces(fused: &StageTrace, unfused: &StageTrace) -> TrafficReport {
    let unfused_bytes =
        unfused.input_read_bytes + unfused.scratch_write_bytes + unfused.scratch_read_bytes;
    let fused_bytes = fused.input_read_bytes + fused.output_write_bytes;
    TrafficReport::new(unfused_bytes, fused_bytes, TrafficSource::TileTrace)
}

/// Traffic report over all activation buffers the two gate+up variants touch.
pub fn activation_traffic_all_buffers(fused: &StageTrace, unfused: &StageTrace) -> TrafficReport {
    TrafficReport::new(
        unfused.activation_bytes(),
        fused.activation_bytes(),
        TrafficSource::TileTraceAllBuffers,
    )
}

/// FLOPs of one stage for `num_tokens` tokens.
pub fn stage_flops(stage: Stage, config: &ModelConfig, num_tokens: usize) -> u64 {
    let b = num_tokens as u64;
    let (k, d, e, f) = (
        config.top_k as u64,
        config.hidden_dim as u64,
        config.num_experts as u64,
        config.ffn_dim as u64,
    );
    let t = b * k;
    match stage {
        Stage::Router => 2 * b * d * e,
        Stage::Permute | Stage::HostSchedule => 0,
        Stage::GateUp => 2 * t * d * f * 2 + SILU_FLOPS * t * f,
        Stage::Down => 2 * t * f * d,
        Stage::Unpermute => 2 * t * d,
    }
}

/// Minimal-traffic bytes of one stage. `counts` is the expert histogram and
/// decides which experts' weights are loaded.
pub fn stage_bytes(
    stage: Stage,
    config: &ModelConfig,
    num_tokens: usize,
    counts: &[usize],
    fused: bool,
) -> u64 {
    let b = num_tokens as u64;
    let (k, d, e, f) = (
        config.top_k as u64,
        config.hidden_dim as u64,
        config.num_experts as u64,
        config.ffn_dim as u64,
    );
    let t = b * k;
    let active = counts.iter().filter(|&&c| c > 0).count() as u64;
    let elements = match stage {
        Stage::Router if b == 0 => 0,
        Stage::Router => b * d + d * e + b * e,
        Stage::Permute => 2 * t * d,
        Stage::GateUp => {
            let base = t * d + active * 2 * d * f + t * f;
            if fused {
                base
            } else {
                base + 4 * t * f + t * d
            }
        }
        Stage::Down => t * f + active * f * d + t * d,
        Stage::Unpermute => t * d + b * d,
        Stage::HostSchedule => 0,
    };
    elements * config.element_bytes as u64
}

/// Launch style for kernel-count accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaunchImpl {
    /// Separate gate, up and down GEMMs per expert plus four glue kernels.
    NaiveLoop,
    /// Router, permute, gate+up, down, unpermute.
    Pipeline,
}

/// Kernel launches per layer. `num_experts` must be at least 1.
pub fn kernel_launch_count(num_experts: usize, imp: LaunchImpl) -> u64 {
    match imp {
        LaunchImpl::NaiveLoop => naive_expert_gemm_launches(num_experts) + 4,
        LaunchImpl::Pipeline => 5,
    }
}

/// The per-expert GEMM part of the naive launch count (`3E`).
pub fn naive_expert_gemm_launches(num_experts: usize) -> u64 {
    3 * num_experts as u64
}

/// Rows of the expert-scaling study: (experts, top-k, ffn dim).
pub const EXPERT_SCALING_GRID: [(usize, usize, usize); 6] = [
    (8, 2, 14336),
    (16, 2, 8192),
    (32, 4, 4096),
    (64, 4, 2560),
    (128, 8, 2048),
    (256, 8, 2048),
];

/// Per-stage model output for one layer at one batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub config: ModelConfig,
    pub num_tokens: usize,
    pub hardware: HardwareProfile,
    pub params: PipelineParams,
    /// Device stages under both conventions and both gate+up variants.
    pub stages: Vec<StageStats>,
    pub traffic_closed_form: TrafficReport,
    pub traffic_tile_trace: TrafficReport,
    pub traffic_all_buffers: TrafficReport,
    pub launches_naive: u64,
    pub launches_pipeline: u64,
    /// Gate+up and down combined, minimal convention, fused then unfused.
    pub expert_ffn_fused: RooflinePoint,
    pub expert_ffn_unfused: RooflinePoint,
    /// Fraction of predicted device time in gate+up and down (fused, minimal).
    pub expert_ffn_share: f64,
    /// Fraction of predicted device time in permute and unpermute.
    pub permute_share: f64,
}

impl LayerReport {
    pub fn stats(&self, convention: TrafficConvention, fused: bool) -> impl Iterator<Item = &StageStats> {
        self.stages
            .iter()
            .filter(move |s| s.convention == convention && s.fused == fused)
    }

    pub fn stage(&self, stage: Stage, convention: TrafficConvention, fused: bool) -> Option<&StageStats> {
        self.stats(convention, fused).find(|s| s.stage == stage)
    }

    /// Sum of predicted stage times for one variant.
    pub fn total_seconds(&self, convention: TrafficConvention, fused: bool) -> f64 {
        self.stats(convention, fused).map(|s| s.predicted_seconds).sum()
    }

    pub fn total_flops(&self, convention: TrafficConvention, fused: bool) -> u64 {
        self.stats(convention, fused).map(|s| s.flops).sum()
    }

    pub fn total_bytes(&self, convention: TrafficConvention, fused: bool) -> u64 {
        self.stats(convention, fused).map(|s| s.bytes).sum()
    }

    /// Total FLOPs over total predicted time.
    pub fn effective_flops_per_second(&self, convention: TrafficConvention, fused: bool) -> f64 {
        let secs = self.total_seconds(convention, fused);
        if secs > 0.0 {
            self.total_flops(convention, fused) as f64 / secs
        } else {
            0.0
        }
    }
}

fn minimal_stats(
    config: &ModelConfig,
    num_tokens: usize,
    counts: &[usize],
    hw: &HardwareProfile,
    fused: bool,
) -> Vec<StageStats> {
    Stage::DEVICE
        .iter()
        .map(|&stage| {
            let flops = stage_flops(stage, config, num_tokens);
            let bytes = stage_bytes(stage, config, num_tokens, counts, fused);
            StageStats::from_point(
                stage,
                fused,
                TrafficConvention::Minimal,
                roofline_or_idle(flops, bytes, hw),
            )
        })
        .collect()
}

fn traced_stats(trace: &PipelineTrace, hw: &HardwareProfile) -> Vec<StageStats> {
    trace
        .device_stages()
        .map(|s| {
            StageStats::from_point(
                s.stage,
                trace.fused,
                TrafficConvention::TileTrace,
                roofline_or_idle(s.flops, s.total_bytes(), hw),
            )
        })
        .collect()
}

/// Builds the per-stage report for one layer and batch from its expert
/// histogram.
pub fn layer_report(
    config: &ModelConfig,
    num_tokens: usize,
    counts: &[usize],
    hw: &HardwareProfile,
    params: &PipelineParams,
) -> Result<LayerReport> {
    config.validate()?;
    hw.validate()?;
    let fused_params = PipelineParams { fused: true, ..*params };
    let unfused_params = PipelineParams { fused: false, ..*params };
    let fused_trace = plan_trace(config, num_tokens, counts, &fused_params)?;
    let unfused_trace = plan_trace(config, num_tokens, counts, &unfused_params)?;

    let mut stages = minimal_stats(config, num_tokens, counts, hw, true);
    stages.extend(minimal_stats(config, num_tokens, counts, hw, false));
    stages.extend(traced_stats(&fused_trace, hw));
    stages.extend(traced_stats(&unfused_trace, hw));

    let gu_fused = fused_trace.stage(Stage::GateUp).expect("planned trace has gate_up");
    let gu_unfused = unfused_trace.stage(Stage::GateUp).expect("planned trace has gate_up");
    let t = (num_tokens * config.top_k) as u64;

    let ffn_point = |fused: bool| {
        let (flops, bytes) = stages
            .iter()
            .filter(|s| s.convention == TrafficConvention::Minimal && s.fused == fused && s.stage.is_expert_ffn())
            .fold((0, 0), |(f, b), s| (f + s.flops, b + s.bytes));
        roofline_or_idle(flops, bytes, hw)
    };
    let expert_ffn_fused = ffn_point(true);
    let expert_ffn_unfused = ffn_point(false);

    let share = |pred: fn(Stage) -> bool| {
        let (part, total) = stages
            .iter()
            .filter(|s| s.convention == TrafficConvention::Minimal && s.fused)
            .fold((0.0, 0.0), |(p, tot), s| {
                let x = s.predicted_seconds;
                (if pred(s.stage) { p + x } else { p }, tot + x)
            });
        if total > 0.0 {
            part / total
        } else {
            0.0
        }
    };
    let expert_ffn_share = share(Stage::is_expert_ffn);
    let permute_share = share(|s| matches!(s, Stage::Permute | Stage::Unpermute));

    Ok(LayerReport {
        config: config.clone(),
        num_tokens,
        hardware: hw.clone(),
        params: *params,
        stages,
        traffic_closed_form: activation_traffic_closed_form(
            t,
            config.ffn_dim as u64,
            config.hidden_dim as u64,
            config.element_bytes as u64,
        ),
        traffic_tile_trace: activation_traffic_from_traces(gu_fused, gu_unfused),
        traffic_all_buffers: activation_traffic_all_buffers(gu_fused, gu_unfused),
        launches_naive: kernel_launch_count(config.num_experts, LaunchImpl::NaiveLoop),
        launches_pipeline: kernel_launch_count(config.num_experts, LaunchImpl::Pipeline),
        expert_ffn_fused,
        expert_ffn_unfused,
        expert_ffn_share,
        permute_share,
    })
}

/// Histogram with `B*k` expanded tokens spread as evenly as possible, lower
/// expert ids taking the remainder.
pub fn balanced_counts(config: &ModelConfig, num_tokens: usize) -> Vec<usize> {
    let t = num_tokens * config.top_k;
    let e = config.num_experts;
    (0..e).map(|i| t / e + usize::from(i < t % e)).collect()
}
