use super::trace::{PipelineTrace, Stage, StageTrace};
use super::{PipelineParams, SILU_FLOPS};
use crate::error::{MoeError, Result};
use crate::model::ModelConfig;
use crate::scheduler::{build_block_schedule, expert_offsets};

/// Counts the trace a forward pass would record for the given expert
/// histogram, without doing any arithmetic. Used for full-size layers where
/// running the numeric pipeline is too expensive.
///
/// Sums per schedule entry rather than per tile; the forward pass counts per
/// tile, and the two must agree.
pub fn plan_trace(
    config: &ModelConfig,
    num_tokens: usize,
    counts: &[usize],
    params: &PipelineParams,
) -> Result<PipelineTrace> {
    config.validate()?;
    params.validate()?;
    let (b, k, d, e, f) = (
        num_tokens,
        config.top_k,
        config.hidden_dim,
        config.num_experts,
        config.ffn_dim,
    );
    if counts.len() != e {
        return Err(crate::error::shape_err("histogram length", e, counts.len()));
    }
    let t: usize = counts.iter().sum();
    if t != b * k {
        return Err(MoeError::InvalidSpec(format!(
            "histogram sums to {t}, expected B*k = {}",
            b * k
        )));
    }
    let eb = config.element_bytes as u64;
    let u = |x: usize| x as u64;

    let mut router = StageTrace::new(Stage::Router);
    if b > 0 {
        router.tiles = u(b);
        router.flops = 2 * u(b * d * e);
        router.input_read_bytes = u(b * d) * eb;
        router.weight_read_bytes = u(d * e) * eb;
        router.output_write_bytes = u(b * e) * eb;
    }

    let mut permute = StageTrace::new(Stage::Permute);
    permute.tiles = u(t);
    permute.input_read_bytes = u(t * d) * eb;
    permute.output_write_bytes = u(t * d) * eb;

    let offsets = expert_offsets(counts);
    let schedule = build_block_schedule(&offsets, params.block_m)?;
    let gu_tiles = u(d.div_ceil(params.block_k) * f.div_ceil(params.block_n));
    let down_tiles = u(f.div_ceil(params.block_k) * d.div_ceil(params.block_n));

    let mut gate_up = StageTrace::with_experts(Stage::GateUp, e);
    let mut down = StageTrace::with_experts(Stage::Down, e);
    for &entry in &schedule.entries {
        let m = schedule.rows(entry, &offsets).len();
        if params.fused {
            gate_up.tiles += gu_tiles;
            gate_up.input_read_bytes += u(m * d) * eb;
            gate_up.flops += 4 * u(m * d * f) + SILU_FLOPS * u(m * f);
            gate_up.output_write_bytes += u(m * f) * eb;
        } else {
            gate_up.tiles += 2 * gu_tiles;
            gate_up.input_read_bytes += 2 * u(m * d) * eb;
            gate_up.flops += 4 * u(m * d * f);
            gate_up.scratch_write_bytes += 2 * u(m * f) * eb;
        }
        gate_up.add_weight_read(entry.expert, 2 * u(d * f) * eb);

        down.tiles += down_tiles;
        down.input_read_bytes += u(m * f) * eb;
        down.add_weight_read(entry.expert, u(f * d) * eb);
        down.flops += 2 * u(m * f * d);
        down.output_write_bytes += u(m * d) * eb;
    }
    if !params.fused {
        gate_up.scratch_read_bytes += 2 * u(t * f) * eb;
        gate_up.output_write_bytes += u(t * f) * eb;
        gate_up.flops += SILU_FLOPS * u(t * f);
    }

    let mut unpermute = StageTrace::new(Stage::Unpermute);
    unpermute.tiles = u(b);
    unpermute.flops = 2 * u(t * d);
    unpermute.input_read_bytes = u(t * d) * eb;
    unpermute.output_write_bytes = u(b * d) * eb;

    Ok(PipelineTrace {
        element_bytes: config.element_bytes,
        fused: params.fused,
        stages: vec![
            router,
            permute,
            gate_up,
            down,
            unpermute,
            StageTrace::new(Stage::HostSchedule),
        ],
    })
}
