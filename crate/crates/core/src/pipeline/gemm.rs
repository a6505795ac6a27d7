//! Block-scheduled grouped GEMM and the gate+up projection kernels.
//!
//! Each schedule entry owns a row panel of at most `block_m` permuted rows of
//! one expert. The panel walks K in `block_k` steps; every K step loads the
//! panel's A tile once and then visits the `block_n`-wide weight tiles of that
//! step. Each output element therefore accumulates in ascending K order, the
//! same order [`dense_matmul`](super::dense_matmul) uses, so results are
//! bitwise identical to the dense product regardless of tile sizes.

use super::trace::{Stage, StageTrace};
use super::{silu, PipelineParams, SILU_FLOPS};
use crate::error::{shape_err, Result};
use crate::model::{ExpertWeights, Matrix};
use crate::scheduler::{BlockSchedule, ExpertOffsets};

/// Where a GEMM's output lands, for traffic accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sink {
    Output,
    Scratch,
}

fn check_inputs(
    input: &Matrix,
    weights: &Matrix,
    n_dim: usize,
    schedule: &BlockSchedule,
    offsets: &ExpertOffsets,
    params: &PipelineParams,
) -> Result<()> {
    params.validate()?;
    if schedule.block_m != params.block_m {
        return Err(crate::MoeError::ScheduleMismatch(format!(
            "schedule built with block_m={}, params say {}",
            schedule.block_m, params.block_m
        )));
    }
    schedule.check_against(offsets)?;
    if input.rows() != offsets.total() {
        return Err(shape_err("grouped GEMM input rows", offsets.total(), input.rows()));
    }
    let want = (offsets.num_experts() * input.cols(), n_dim);
    if weights.shape() != want {
        return Err(shape_err(
            "expert weight stack",
            format!("{}x{}", want.0, want.1),
            format!("{}x{}", weights.rows(), weights.cols()),
        ));
    }
    Ok(())
}

/// Panel product for one schedule entry; `acc` is `rows x n_dim`.
#[allow(clippy::too_many_arguments)]
fn panel_product(
    input: &Matrix,
    rows: std::ops::Range<usize>,
    weights: &Matrix,
    expert: usize,
    params: &PipelineParams,
    acc: &mut [f32],
    trace: &mut StageTrace,
    eb: u64,
) {
    let k_dim = input.cols();
    let n_dim = weights.cols();
    let m = rows.len();
    let base = expert * k_dim;
    for k0 in (0..k_dim).step_by(params.block_k) {
        let kk = params.block_k.min(k_dim - k0);
        trace.input_read_bytes += (m * kk) as u64 * eb;
        for n0 in (0..n_dim).step_by(params.block_n) {
            let nn = params.block_n.min(n_dim - n0);
            trace.tiles += 1;
            trace.add_weight_read(expert, (kk * nn) as u64 * eb);
            trace.flops += 2 * (m * kk * nn) as u64;
            for (i, r) in rows.clone().enumerate() {
                let a_row = input.row(r);
                let out = &mut acc[i * n_dim + n0..i * n_dim + n0 + nn];
                for kx in k0..k0 + kk {
                    let a = a_row[kx];
                    let w = &weights.row(base + kx)[n0..n0 + nn];
                    for (o, &b) in out.iter_mut().zip(w) {
                        *o += a * b;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grouped_gemm_into(
    input: &Matrix,
    weights: &Matrix,
    schedule: &BlockSchedule,
    offsets: &ExpertOffsets,
    params: &PipelineParams,
    trace: &mut StageTrace,
    eb: u64,
    sink: Sink,
) -> Result<Matrix> {
    let n_dim = weights.cols();
    check_inputs(input, weights, n_dim, schedule, offsets, params)?;
    if trace.expert_weight_bytes.len() < offsets.num_experts() {
        trace.expert_weight_bytes.resize(offsets.num_experts(), 0);
    }
    let mut out = Matrix::zeros(input.rows(), n_dim);
    for &entry in &schedule.entries {
        let rows = schedule.rows(entry, offsets);
        let m = rows.len();
        let mut acc = vec![0.0_f32; m * n_dim];
        panel_product(input, rows.clone(), weights, entry.expert, params, &mut acc, trace, eb);
        out.data_mut()[rows.start * n_dim..rows.end * n_dim].copy_from_slice(&acc);
        let written = (m * n_dim) as u64 * eb;
        match sink {
            Sink::Output => trace.output_write_bytes += written,
            Sink::Scratch => trace.scratch_write_bytes += written,
        }
    }
    Ok(out)
}

/// Grouped GEMM over an expert-contiguous input (`offsets.total() x K`)
/// against an expert-stacked weight matrix (`E*K x N`).
pub fn grouped_gemm(
    input: &Matrix,
    weights: &Matrix,
    schedule: &BlockSchedule,
    offsets: &ExpertOffsets,
    params: &PipelineParams,
    trace: &mut StageTrace,
    element_bytes: usize,
) -> Result<Matrix> {
    grouped_gemm_into(
        input,
        weights,
        schedule,
        offsets,
        params,
        trace,
        element_bytes as u64,
        Sink::Output,
    )
}

fn check_gate_up(weights: &ExpertWeights) -> Result<()> {
    if weights.gate.shape() != weights.up.shape() {
        return Err(shape_err(
            "gate/up stacks",
            format!("{}x{}", weights.gate.rows(), weights.gate.cols()),
            format!("{}x{}", weights.up.rows(), weights.up.cols()),
        ));
    }
    Ok(())
}

/// Both SwiGLU projections in one pass over a shared A tile per K step,
/// writing only `silu(gate) * up`.
pub fn fused_gate_up(
    input: &Matrix,
    weights: &ExpertWeights,
    schedule: &BlockSchedule,
    offsets: &ExpertOffsets,
    params: &PipelineParams,
    trace: &mut StageTrace,
    element_bytes: usize,
) -> Result<Matrix> {
    check_gate_up(weights)?;
    let ffn = weights.gate.cols();
    check_inputs(input, &weights.gate, ffn, schedule, offsets, params)?;
    let eb = element_bytes as u64;
    if trace.expert_weight_bytes.len() < offsets.num_experts() {
        trace.expert_weight_bytes.resize(offsets.num_experts(), 0);
    }
    let k_dim = input.cols();
    let mut out = Matrix::zeros(input.rows(), ffn);
    for &entry in &schedule.entries {
        let rows = schedule.rows(entry, offsets);
        let m = rows.len();
        let base = entry.expert * k_dim;
        let mut acc_gate = vec![0.0_f32; m * ffn];
        let mut acc_up = vec![0.0_f32; m * ffn];
        for k0 in (0..k_dim).step_by(params.block_k) {
            let kk = params.block_k.min(k_dim - k0);
            // one A load serves both weight streams
            trace.input_read_bytes += (m * kk) as u64 * eb;
            for n0 in (0..ffn).step_by(params.block_n) {
                let nn = params.block_n.min(ffn - n0);
                trace.tiles += 1;
                trace.add_weight_read(entry.expert, 2 * (kk * nn) as u64 * eb);
                trace.flops += 4 * (m * kk * nn) as u64;
                for (i, r) in rows.clone().enumerate() {
                    let a_row = input.row(r);
                    let span = i * ffn + n0..i * ffn + n0 + nn;
                    for kx in k0..k0 + kk {
                        let a = a_row[kx];
                        let wg = &weights.gate.row(base + kx)[n0..n0 + nn];
                        let wu = &weights.up.row(base + kx)[n0..n0 + nn];
                        for ((g, u), (&bg, &bu)) in acc_gate[span.clone()]
                            .iter_mut()
                            .zip(acc_up[span.clone()].iter_mut())
                            .zip(wg.iter().zip(wu))
                        {
                            *g += a * bg;
                            *u += a * bu;
                        }
                    }
                }
            }
        }
        let dst = &mut out.data_mut()[rows.start * ffn..rows.end * ffn];
        for ((o, &g), &u) in dst.iter_mut().zip(&acc_gate).zip(&acc_up) {
            *o = silu(g) * u;
        }
        trace.flops += SILU_FLOPS * (m * ffn) as u64;
        trace.output_write_bytes += (m * ffn) as u64 * eb;
    }
    Ok(out)
}

/// Two separate grouped GEMMs materializing `gate_out` and `up_out`, then an
/// elementwise pass that reads both back and writes `silu(gate) * up`.
pub fn unfused_gate_up(
    input: &Matrix,
    weights: &ExpertWeights,
    schedule: &BlockSchedule,
    offsets: &ExpertOffsets,
    params: &PipelineParams,
    trace: &mut StageTrace,
    element_bytes: usize,
) -> Result<Matrix> {
    check_gate_up(weights)?;
    let eb = element_bytes as u64;
    let gate_out = grouped_gemm_into(
        input, &weights.gate, schedule, offsets, params, trace, eb, Sink::Scratch,
    )?;
    let up_out = grouped_gemm_into(
        input, &weights.up, schedule, offsets, params, trace, eb, Sink::Scratch,
    )?;
    let n = gate_out.data().len() as u64;
    let data = gate_out
        .data()
        .iter()
        .zip(up_out.data())
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    trace.scratch_read_bytes += 2 * n * eb;
    trace.output_write_bytes += n * eb;
    trace.flops += SILU_FLOPS * n;
    Matrix::from_vec(gate_out.rows(), gate_out.cols(), data)
}

pub(crate) fn new_gemm_trace(stage: Stage, num_experts: usize) -> StageTrace {
    StageTrace::with_experts(stage, num_experts)
}
