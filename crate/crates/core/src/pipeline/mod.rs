//! Numeric forward pass of the five-stage dispatch pipeline
//! (router, permute, gate+up, down, unpermute) and the dense
//! loop-over-experts reference it is checked against.

mod gemm;
mod plan;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MoeError, Result};
use crate::model::{ExpertWeights, Matrix, ModelConfig};
use crate::router::{self, RoutingResult};
use crate::scheduler::{
    build_block_schedule, build_permutation, expert_histogram, expert_offsets, Permutation,
};

pub use gemm::{fused_gate_up, grouped_gemm, unfused_gate_up};
pub use plan::plan_trace;
pub use trace::{PipelineTrace, Stage, StageTrace};

/// FLOPs charged per element for `silu(g) * u` (exp, add, divide, multiply).
pub const SILU_FLOPS: u64 = 4;

/// Tile sizes for one pipeline run. `block_m` is fixed for the whole run
/// because the block schedule is built from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub block_m: usize,
    pub block_n: usize,
    pub block_k: usize,
    pub fused: bool,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            block_m: 64,
            block_n: 64,
            block_k: 32,
            fused: true,
        }
    }
}

impl PipelineParams {
    pub fn new(block_m: usize, block_n: usize, block_k: usize, fused: bool) -> Result<Self> {
        let p = Self {
            block_m,
            block_n,
            block_k,
            fused,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_m == 0 {
            return Err(MoeError::InvalidBlockM);
        }
        if self.block_n == 0 || self.block_k == 0 {
            return Err(MoeError::InvalidParams("block_n and block_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// `a * b` with each output element summed in ascending inner index.
pub fn dense_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape_err("dense_matmul inner dim", a.cols(), b.rows()));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (kx, &av) in a_row.iter().enumerate() {
            for (o, &bv) in c_row.iter_mut().zip(b.row(kx)) {
                *o += av * bv;
            }
        }
    }
    Ok(c)
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * router::sigmoid(x)
}

/// Gathers token rows into expert-contiguous order: output row `r` is
/// `tokens[forward[r] / k]`.
pub fn permute_tokens(tokens: &Matrix, routing: &RoutingResult, perm: &Permutation) -> Result<Matrix> {
    if tokens.rows() != routing.num_tokens {
        return Err(shape_err("permute tokens", routing.num_tokens, tokens.rows()));
    }
    if perm.len() != routing.expanded_len() {
        return Err(shape_err("permutation length", routing.expanded_len(), perm.len()));
    }
    let k = routing.top_k;
    let d = tokens.cols();
    let mut out = Matrix::zeros(perm.len(), d);
    for (r, &src) in perm.forward.iter().enumerate() {
        out.row_mut(r).copy_from_slice(tokens.row(src / k));
    }
    Ok(out)
}

/// Scatters expert outputs back to token order, summing the k slots of each
/// token in ascending slot order weighted by the gate weights.
pub fn unpermute_combine(
    expert_out: &Matrix,
    routing: &RoutingResult,
    perm: &Permutation,
) -> Result<Matrix> {
    if expert_out.rows() != routing.expanded_len() {
        return Err(shape_err("unpermute rows", routing.expanded_len(), expert_out.rows()));
    }
    if perm.len() != routing.expanded_len() {
        return Err(shape_err("permutation length", routing.expanded_len(), perm.len()));
    }
    let k = routing.top_k;
    let d = expert_out.cols();
    let mut out = Matrix::zeros(routing.num_tokens, d);
    for t in 0..routing.num_tokens {
        let dst = out.row_mut(t);
        for j in 0..k {
            let w = routing.weights[t * k + j];
            let src = expert_out.row(perm.inverse[t * k + j]);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

fn check_forward_shapes(
    tokens: &Matrix,
    router_weight: &Matrix,
    weights: &ExpertWeights,
    config: &ModelConfig,
) -> Result<()> {
    config.validate()?;
    if tokens.cols() != config.hidden_dim {
        return Err(shape_err("tokens", config.hidden_dim, tokens.cols()));
    }
    if router_weight.shape() != (config.hidden_dim, config.num_experts) {
        return Err(shape_err(
            "router weight",
            format!("{}x{}", config.hidden_dim, config.num_experts),
            format!("{}x{}", router_weight.rows(), router_weight.cols()),
        ));
    }
    weights.check(config)
}

/// Full forward pass. The returned trace holds one record per device stage
/// in execution order plus a trailing host-side schedule record.
pub fn moe_forward(
    tokens: &Matrix,
    router_weight: &Matrix,
    weights: &ExpertWeights,
    config: &ModelConfig,
    params: &PipelineParams,
) -> Result<(Matrix, PipelineTrace)> {
    check_forward_shapes(tokens, router_weight, weights, config)?;
    params.validate()?;
    let eb = config.element_bytes as u64;
    let (b, d, e, f) = (tokens.rows(), config.hidden_dim, config.num_experts, config.ffn_dim);

    // 1. router
    let routing = router::route(tokens, router_weight, config)?;
    let mut router_trace = StageTrace::new(Stage::Router);
    if b > 0 {
        router_trace.tiles = b as u64;
        router_trace.flops = 2 * (b * d * e) as u64;
        router_trace.input_read_bytes = (b * d) as u64 * eb;
        router_trace.weight_read_bytes = (d * e) as u64 * eb;
        router_trace.output_write_bytes = (b * e) as u64 * eb;
    }

    // host: histogram, offsets, permutation, block schedule
    let counts = expert_histogram(&routing, e)?;
    let offsets = expert_offsets(&counts);
    let perm = build_permutation(&routing);
    let schedule = build_block_schedule(&offsets, params.block_m)?;
    let host_trace = StageTrace::new(Stage::HostSchedule);

    // 2. permute
    let permuted = permute_tokens(tokens, &routing, &perm)?;
    let t = permuted.rows();
    let mut permute_trace = StageTrace::new(Stage::Permute);
    permute_trace.tiles = t as u64;
    permute_trace.input_read_bytes = (t * d) as u64 * eb;
    permute_trace.output_write_bytes = (t * d) as u64 * eb;

    // 3. gate + up
    let mut gate_up_trace = gemm::new_gemm_trace(Stage::GateUp, e);
    let intermediate = if params.fused {
        fused_gate_up(&permuted, weights, &schedule, &offsets, params, &mut gate_up_trace, config.element_bytes)?
    } else {
        unfused_gate_up(&permuted, weights, &schedule, &offsets, params, &mut gate_up_trace, config.element_bytes)?
    };
    debug_assert_eq!(intermediate.shape(), (t, f));

    // 4. down
    let mut down_trace = gemm::new_gemm_trace(Stage::Down, e);
    let expert_out = grouped_gemm(
        &intermediate,
        &weights.down,
        &schedule,
        &offsets,
        params,
        &mut down_trace,
        config.element_bytes,
    )?;

    // 5. unpermute + weighted combine
    let output = unpermute_combine(&expert_out, &routing, &perm)?;
    let mut unpermute_trace = StageTrace::new(Stage::Unpermute);
    unpermute_trace.tiles = b as u64;
    unpermute_trace.flops = 2 * (t * d) as u64;
    unpermute_trace.input_read_bytes = (t * d) as u64 * eb;
    unpermute_trace.output_write_bytes = (b * d) as u64 * eb;

    let trace = PipelineTrace {
        element_bytes: config.element_bytes,
        fused: params.fused,
        stages: vec![
            router_trace,
            permute_trace,
            gate_up_trace,
            down_trace,
            unpermute_trace,
            host_trace,
        ],
    };
    Ok((output, trace))
}

/// Rows `[e * rows_per, (e + 1) * rows_per)` of an expert stack.
fn expert_block(stack: &Matrix, e: usize, rows_per: usize) -> Matrix {
    stack.slice_rows(e * rows_per, (e + 1) * rows_per)
}

/// Dense SwiGLU FFN of one expert applied to `x` (`n x d`).
pub fn swiglu_ffn(x: &Matrix, weights: &ExpertWeights, config: &ModelConfig, expert: usize) -> Result<Matrix> {
    let (d, f) = (config.hidden_dim, config.ffn_dim);
    let g = dense_matmul(x, &expert_block(&weights.gate, expert, d))?;
    let u = dense_matmul(x, &expert_block(&weights.up, expert, d))?;
    let h: Vec<f32> = g.data().iter().zip(u.data()).map(|(&g, &u)| silu(g) * u).collect();
    let h = Matrix::from_vec(x.rows(), f, h)?;
    dense_matmul(&h, &expert_block(&weights.down, expert, f))
}

/// Loop-over-experts reference: per token, route, run each selected expert's
/// FFN densely and sum the weighted results. No permutation, no tiling.
pub fn dense_moe_oracle(
    tokens: &Matrix,
    router_weight: &Matrix,
    weights: &ExpertWeights,
    config: &ModelConfig,
) -> Result<Matrix> {
    check_forward_shapes(tokens, router_weight, weights, config)?;
    let routing = router::route(tokens, router_weight, config)?;
    let d = config.hidden_dim;
    let mut out = Matrix::zeros(tokens.rows(), d);
    for t in 0..tokens.rows() {
        let x = tokens.slice_rows(t, t + 1);
        for (&e, &w) in routing.token_indices(t).iter().zip(routing.token_weights(t)) {
            let y = swiglu_ffn(&x, weights, config, e)?;
            for (o, &v) in out.row_mut(t).iter_mut().zip(y.data()) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// `max|a - b| / (max|b| + eps)`, computed in double precision.
pub fn max_relative_error(actual: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(actual.shape(), reference.shape());
    let diff = actual
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0_f64, |m, (&a, &b)| m.max((f64::from(a) - f64::from(b)).abs()));
    diff / (f64::from(reference.max_abs()) + 1e-30)
}

#[cfg(test)]
mod tests;
