use proptest::prelude::*;

use super::*;
use crate::instance::Instance;
use crate::model::Gating;
use crate::scheduler::{BlockSchedule, ExpertOffsets};

fn params(block_m: usize, block_n: usize, block_k: usize, fused: bool) -> PipelineParams {
    PipelineParams::new(block_m, block_n, block_k, fused).unwrap()
}

fn cfg(e: usize, k: usize, d: usize, f: usize) -> ModelConfig {
    ModelConfig::new(e, k, d, f, Gating::Softmax).unwrap()
}

fn seq_matrix(rows: usize, cols: usize, seed: u32) -> Matrix {
    // small deterministic values without an RNG
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed.wrapping_mul(40_503));
            (x % 2001) as f32 / 1000.0 - 1.0
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn schedule_for(counts: &[usize], block_m: usize) -> (ExpertOffsets, BlockSchedule) {
    let off = expert_offsets(counts);
    let s = build_block_schedule(&off, block_m).unwrap();
    (off, s)
}

#[test]
fn dense_matmul_examples() {
    let b = seq_matrix(3, 5, 1);
    assert_eq!(dense_matmul(&Matrix::identity(3), &b).unwrap(), b);
    assert_eq!(dense_matmul(&Matrix::zeros(2, 3), &b).unwrap(), Matrix::zeros(2, 5));
    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let c = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    assert_eq!(dense_matmul(&a, &c).unwrap().data(), &[17.0, 39.0]);
    assert!(matches!(dense_matmul(&a, &b), Err(MoeError::ShapeMismatch { .. })));
}

#[test]
fn silu_examples() {
    assert_eq!(silu(0.0), 0.0);
    assert!((silu(100.0) - 100.0).abs() < 1e-4);
    // mpmath: 1 / (1 + e^-1) = 0.7310585786...
    assert!((silu(1.0) - 0.731_058_6).abs() < 1e-5);
    assert!(silu(-200.0).is_finite());
    for x in [0.1_f32, 1.0, 5.0, 30.0] {
        assert!(silu(x) <= x);
    }
}

fn routing_k1(experts: &[usize]) -> RoutingResult {
    let idx: Vec<Vec<usize>> = experts.iter().map(|&e| vec![e]).collect();
    let w: Vec<Vec<f32>> = experts.iter().map(|_| vec![1.0]).collect();
    RoutingResult::from_rows(&idx, &w).unwrap()
}

#[test]
fn permute_examples() {
    let tokens = seq_matrix(3, 4, 7);
    let r = routing_k1(&[0, 0, 0]);
    let p = build_permutation(&r);
    assert_eq!(permute_tokens(&tokens, &r, &p).unwrap(), tokens);

    let one = seq_matrix(1, 4, 3);
    let r = RoutingResult::from_rows(&[vec![1, 0]], &[vec![0.5, 0.5]]).unwrap();
    let out = permute_tokens(&one, &r, &build_permutation(&r)).unwrap();
    assert_eq!(out.row(0), one.row(0));
    assert_eq!(out.row(1), one.row(0));

    let r = routing_k1(&[1, 0, 1]);
    let out = permute_tokens(&tokens, &r, &build_permutation(&r)).unwrap();
    assert_eq!(out.row(0), tokens.row(1));
    assert_eq!(out.row(1), tokens.row(0));
    assert_eq!(out.row(2), tokens.row(2));

    assert!(permute_tokens(&seq_matrix(2, 4, 0), &r, &build_permutation(&r)).is_err());
}

#[test]
fn grouped_gemm_identity_input() {
    let w = seq_matrix(4, 6, 2);
    let (off, s) = schedule_for(&[4], 3);
    let mut tr = StageTrace::new(Stage::Down);
    let out = grouped_gemm(&Matrix::identity(4), &w, &s, &off, &params(3, 4, 3, true), &mut tr, 2).unwrap();
    assert_eq!(out, w);
}

#[test]
fn grouped_gemm_skips_empty_expert() {
    let w = seq_matrix(2 * 5, 3, 9);
    let input = seq_matrix(4, 5, 4);
    let (off, s) = schedule_for(&[4, 0], 2);
    let mut tr = StageTrace::new(Stage::Down);
    grouped_gemm(&input, &w, &s, &off, &params(2, 2, 2, true), &mut tr, 2).unwrap();
    assert!(tr.expert_weight_bytes[0] > 0);
    assert_eq!(tr.expert_weight_bytes[1], 0);
}

#[test]
fn grouped_gemm_matches_per_expert_dense_exactly() {
    let (k_dim, n_dim) = (8, 6);
    let counts = [5, 0, 7];
    let input = seq_matrix(12, k_dim, 11);
    let w = seq_matrix(3 * k_dim, n_dim, 12);
    let (off, s) = schedule_for(&counts, 4);
    let mut tr = StageTrace::new(Stage::Down);
    let out = grouped_gemm(&input, &w, &s, &off, &params(4, 4, 3, true), &mut tr, 2).unwrap();
    let mut expected = Vec::new();
    for e in 0..3 {
        let xs = input.slice_rows(off.start(e), off.start(e) + counts[e]);
        let we = w.slice_rows(e * k_dim, (e + 1) * k_dim);
        expected.extend(dense_matmul(&xs, &we).unwrap().into_vec());
    }
    assert_eq!(out.data(), expected.as_slice());
}

#[test]
fn grouped_gemm_rejects_mismatched_schedule() {
    let input = seq_matrix(12, 8, 1);
    let w = seq_matrix(24, 6, 2);
    let off = expert_offsets(&[5, 0, 7]);
    let wrong = build_block_schedule(&expert_offsets(&[9, 0, 3]), 4).unwrap();
    let mut tr = StageTrace::new(Stage::Down);
    assert!(matches!(
        grouped_gemm(&input, &w, &wrong, &off, &params(4, 4, 4, true), &mut tr, 2),
        Err(MoeError::ScheduleMismatch(_))
    ));
    let s = build_block_schedule(&off, 4).unwrap();
    assert!(matches!(
        grouped_gemm(&input, &w, &s, &off, &params(3, 4, 4, true), &mut tr, 2),
        Err(MoeError::ScheduleMismatch(_))
    ));
    assert!(matches!(
        grouped_gemm(&input, &seq_matrix(23, 6, 2), &s, &off, &params(4, 4, 4, true), &mut tr, 2),
        Err(MoeError::ShapeMismatch { .. })
    ));
}

fn gate_up_setup(e: usize, d: usize, f: usize, counts: &[usize], seed: u32) -> (Matrix, ExpertWeights) {
    let t: usize = counts.iter().sum();
    let input = seq_matrix(t, d, seed);
    let w = ExpertWeights::new(
        seq_matrix(e * d, f, seed + 1),
        seq_matrix(e * d, f, seed + 2),
        seq_matrix(e * f, d, seed + 3),
    );
    (input, w)
}

#[test]
fn fused_zero_input_gives_zero() {
    let counts = [3, 2];
    let (_, w) = gate_up_setup(2, 4, 5, &counts, 1);
    let (off, s) = schedule_for(&counts, 2);
    let mut tr = StageTrace::new(Stage::GateUp);
    let out = fused_gate_up(&Matrix::zeros(5, 4), &w, &s, &off, &params(2, 2, 2, true), &mut tr, 2).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fused_matches_dense_reference() {
    let (e, d, f) = (2, 8, 12);
    let counts = [4, 2];
    let (input, w) = gate_up_setup(e, d, f, &counts, 5);
    let (off, s) = schedule_for(&counts, 3);
    let mut tr = StageTrace::new(Stage::GateUp);
    let out = fused_gate_up(&input, &w, &s, &off, &params(3, 5, 3, true), &mut tr, 2).unwrap();
    let mut expected = Vec::new();
    for ex in 0..e {
        let xs = input.slice_rows(off.start(ex), off.start(ex) + counts[ex]);
        let g = dense_matmul(&xs, &w.gate.slice_rows(ex * d, (ex + 1) * d)).unwrap();
        let u = dense_matmul(&xs, &w.up.slice_rows(ex * d, (ex + 1) * d)).unwrap();
        expected.extend(g.data().iter().zip(u.data()).map(|(&g, &u)| silu(g) * u));
    }
    let expected = Matrix::from_vec(6, f, expected).unwrap();
    assert!(max_relative_error(&out, &expected) <= 1e-5);
}

#[test]
fn unfused_trace_delta() {
    let (e, d, f) = (3, 6, 10);
    let counts = [4, 0, 5];
    let t = 9u64;
    let eb = 2u64;
    let (input, w) = gate_up_setup(e, d, f, &counts, 21);
    let (off, s) = schedule_for(&counts, 3);
    let mut fused = StageTrace::new(Stage::GateUp);
    let mut unfused = StageTrace::new(Stage::GateUp);
    let a = fused_gate_up(&input, &w, &s, &off, &params(3, 4, 4, true), &mut fused, 2).unwrap();
    let b = unfused_gate_up(&input, &w, &s, &off, &params(3, 4, 4, false), &mut unfused, 2).unwrap();
    assert_eq!(a, b);
    let (d, f) = (d as u64, f as u64);
    assert_eq!(unfused.scratch_write_bytes, 2 * t * f * eb);
    assert_eq!(unfused.scratch_read_bytes, 2 * t * f * eb);
    assert_eq!(unfused.input_read_bytes - fused.input_read_bytes, t * d * eb);
    assert_eq!(
        unfused.total_bytes() - fused.total_bytes(),
        (4 * t * f + t * d) * eb
    );
    assert_eq!(unfused.weight_read_bytes, fused.weight_read_bytes);
    assert_eq!(unfused.flops, fused.flops);
}

#[test]
fn empty_batch_gate_up() {
    let (_, w) = gate_up_setup(2, 4, 5, &[0, 0], 1);
    let (off, s) = schedule_for(&[0, 0], 4);
    let mut tr = StageTrace::new(Stage::GateUp);
    let out = unfused_gate_up(&Matrix::zeros(0, 4), &w, &s, &off, &params(4, 4, 4, false), &mut tr, 2).unwrap();
    assert_eq!(out.shape(), (0, 5));
    assert_eq!((tr.tiles, tr.flops, tr.total_bytes()), (0, 0, 0));
    assert_eq!(tr.expert_weight_bytes, [0, 0]);
}

#[test]
fn unpermute_examples() {
    let expert_out = seq_matrix(3, 4, 3);
    let r = routing_k1(&[1, 0, 1]);
    let p = build_permutation(&r);
    let out = unpermute_combine(&expert_out, &r, &p).unwrap();
    assert_eq!(out.row(0), expert_out.row(1));
    assert_eq!(out.row(1), expert_out.row(0));
    assert_eq!(out.row(2), expert_out.row(2));

    let row = vec![0.25_f32, -1.5, 3.0];
    let expert_out = Matrix::from_rows(&[row.clone(), row.clone()]).unwrap();
    let r = RoutingResult::from_rows(&[vec![0, 1]], &[vec![0.5, 0.5]]).unwrap();
    let out = unpermute_combine(&expert_out, &r, &build_permutation(&r)).unwrap();
    assert_eq!(out.row(0), row.as_slice());
}

#[test]
fn unpermute_matches_dense_combine() {
    let config = cfg(4, 2, 6, 8);
    let inst = Instance::random(&config, 4, 77);
    let routing = router::route(&inst.tokens, &inst.router_weight, &config).unwrap();
    let perm = build_permutation(&routing);
    let permuted = permute_tokens(&inst.tokens, &routing, &perm).unwrap();
    // per-row expert FFN computed densely, then scattered and combined
    let mut expert_out = Matrix::zeros(permuted.rows(), 6);
    for r in 0..permuted.rows() {
        let e = routing.indices[perm.forward[r]];
        let y = swiglu_ffn(&permuted.slice_rows(r, r + 1), &inst.weights, &config, e).unwrap();
        expert_out.row_mut(r).copy_from_slice(y.data());
    }
    let combined = unpermute_combine(&expert_out, &routing, &perm).unwrap();
    let oracle = dense_moe_oracle(&inst.tokens, &inst.router_weight, &inst.weights, &config).unwrap();
    assert!(max_relative_error(&combined, &oracle) <= 1e-5);
}

#[test]
fn forward_single_expert_is_plain_swiglu() {
    let config = cfg(1, 1, 6, 10);
    let inst = Instance::random(&config, 5, 3);
    let (out, trace) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &params(2, 3, 4, true)).unwrap();
    let dense = swiglu_ffn(&inst.tokens, &inst.weights, &config, 0).unwrap();
    assert!(max_relative_error(&out, &dense) <= 1e-5);
    let stages: Vec<Stage> = trace.stages.iter().map(|s| s.stage).collect();
    assert_eq!(
        stages,
        vec![Stage::Router, Stage::Permute, Stage::GateUp, Stage::Down, Stage::Unpermute, Stage::HostSchedule]
    );
}

#[test]
fn forward_zero_tokens() {
    let config = cfg(4, 2, 8, 16);
    let inst = Instance::random(&config, 6, 3);
    let zeros = Matrix::zeros(6, 8);
    let (out, _) = moe_forward(&zeros, &inst.router_weight, &inst.weights, &config, &PipelineParams::default()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let empty = Matrix::zeros(0, 8);
    let (out, trace) = moe_forward(&empty, &inst.router_weight, &inst.weights, &config, &PipelineParams::default()).unwrap();
    assert_eq!(out.shape(), (0, 8));
    assert_eq!(trace.total_bytes(), 0);
    assert_eq!(trace.total_flops(), 0);
}

#[test]
fn forward_matches_oracle_small() {
    let config = cfg(4, 2, 8, 16);
    let inst = Instance::random(&config, 6, 42);
    for fused in [true, false] {
        let (out, _) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &params(4, 5, 3, fused)).unwrap();
        let oracle = dense_moe_oracle(&inst.tokens, &inst.router_weight, &inst.weights, &config).unwrap();
        assert!(max_relative_error(&out, &oracle) <= 1e-5);
    }
}

#[test]
fn oracle_equal_logits_average() {
    // zero router weight: all logits equal, softmax gives 1/E each, k = E
    let config = cfg(4, 4, 5, 7);
    let inst = Instance::random(&config, 3, 8);
    let rw = Matrix::zeros(5, 4);
    let out = dense_moe_oracle(&inst.tokens, &rw, &inst.weights, &config).unwrap();
    let mut expected = Matrix::zeros(3, 5);
    for e in 0..4 {
        let y = swiglu_ffn(&inst.tokens, &inst.weights, &config, e).unwrap();
        for (o, v) in expected.data_mut().iter_mut().zip(y.data()) {
            *o += 0.25 * v;
        }
    }
    assert!(max_relative_error(&out, &expected) <= 1e-6);
}

#[test]
fn forward_rejects_bad_weights() {
    let config = cfg(4, 2, 8, 16);
    let mut inst = Instance::random(&config, 3, 1);
    inst.weights.down = Matrix::zeros(4 * 16 - 1, 8);
    assert!(matches!(
        moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &PipelineParams::default()),
        Err(MoeError::ShapeMismatch { .. })
    ));
    assert!(dense_moe_oracle(&inst.tokens, &inst.router_weight, &inst.weights, &config).is_err());
}

#[test]
fn element_bytes_changes_only_the_trace() {
    let config = cfg(4, 2, 8, 12);
    let fp32 = config.clone().with_element_bytes(4).unwrap();
    let inst = Instance::random(&config, 7, 5);
    let p = params(3, 5, 4, true);
    let (a, ta) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &p).unwrap();
    let (b, tb) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &fp32, &p).unwrap();
    assert_eq!(a, b);
    assert_eq!(2 * ta.total_bytes(), tb.total_bytes());
}

fn instance_strategy() -> impl Strategy<Value = (ModelConfig, usize, u64, PipelineParams)> {
    let e = prop::sample::select(vec![1usize, 2, 4, 8, 64]);
    let k = prop::sample::select(vec![1usize, 2, 4]);
    let block = prop::sample::select(vec![1usize, 2, 3, 4, 5, 8, 16]);
    (e, k, 4usize..=32, 4usize..=32, 0usize..=24, any::<u64>(), block.clone(), block.clone(), block, any::<bool>(), any::<bool>())
        .prop_map(|(e, k, d, f, b, seed, bm, bn, bk, fused, sig)| {
            let gating = if sig { Gating::SigmoidNormalized } else { Gating::Softmax };
            let config = ModelConfig::new(e, k.min(e), d, f, gating).unwrap();
            (config, b, seed, PipelineParams::new(bm, bn, bk, fused).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_agrees_with_oracle((config, b, seed, p) in instance_strategy()) {
        let inst = Instance::random(&config, b, seed);
        let (out, _) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &p).unwrap();
        let oracle = dense_moe_oracle(&inst.tokens, &inst.router_weight, &inst.weights, &config).unwrap();
        prop_assert!(max_relative_error(&out, &oracle) <= 1e-5);
    }

    #[test]
    fn planned_trace_matches_executed((config, b, seed, p) in instance_strategy()) {
        let inst = Instance::random(&config, b, seed);
        let (_, trace) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &p).unwrap();
        let routing = router::route(&inst.tokens, &inst.router_weight, &config).unwrap();
        let counts = expert_histogram(&routing, config.num_experts).unwrap();
        let planned = plan_trace(&config, b, &counts, &p).unwrap();
        prop_assert_eq!(planned, trace);
    }

    #[test]
    fn trace_conservation_and_masking((config, b, seed, p) in instance_strategy()) {
        let inst = Instance::random(&config, b, seed);
        let eb = config.element_bytes as u64;
        let t = (b * config.top_k) as u64;
        let (d, f) = (config.hidden_dim as u64, config.ffn_dim as u64);
        let fused = PipelineParams { fused: true, ..p };
        let unfused = PipelineParams { fused: false, ..p };
        let (_, tf) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &fused).unwrap();
        let (_, tu) = moe_forward(&inst.tokens, &inst.router_weight, &inst.weights, &config, &unfused).unwrap();
        let gf = tf.stage(Stage::GateUp).unwrap();
        let gu = tu.stage(Stage::GateUp).unwrap();
        prop_assert_eq!(gf.bytes_written(), t * f * eb);
        prop_assert_eq!(gu.bytes_written(), 3 * t * f * eb);
        // every permuted row read exactly once per K sweep: no masked row is touched
        prop_assert_eq!(gf.input_read_bytes, t * d * eb);
        prop_assert_eq!(gu.input_read_bytes, 2 * t * d * eb);
        let down = tf.stage(Stage::Down).unwrap();
        prop_assert_eq!(down.input_read_bytes, t * f * eb);
        prop_assert_eq!(down.output_write_bytes, t * d * eb);
    }

    #[test]
    fn fused_unfused_bitwise(e in 1usize..6, d in 1usize..24, f in 1usize..24, counts_seed in any::<u64>(), bm in 1usize..9, bn in 1usize..9, bk in 1usize..9) {
        let counts: Vec<usize> = (0..e).map(|i| ((counts_seed >> (i * 4)) & 0xF) as usize % 9).collect();
        let (input, w) = gate_up_setup(e, d, f, &counts, (counts_seed & 0xFFFF) as u32);
        let (off, s) = schedule_for(&counts, bm);
        let mut t1 = StageTrace::new(Stage::GateUp);
        let mut t2 = StageTrace::new(Stage::GateUp);
        let a = fused_gate_up(&input, &w, &s, &off, &params(bm, bn, bk, true), &mut t1, 2).unwrap();
        let b = unfused_gate_up(&input, &w, &s, &off, &params(bm, bn, bk, false), &mut t2, 2).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn k1_unit_weights_round_trip(experts in prop::collection::vec(0usize..6, 0..20), d in 1usize..8) {
        let r = routing_k1(&experts);
        let tokens = seq_matrix(experts.len(), d, 5);
        let p = build_permutation(&r);
        let permuted = permute_tokens(&tokens, &r, &p).unwrap();
        prop_assert_eq!(unpermute_combine(&permuted, &r, &p).unwrap(), tokens);
    }
}
