//! Gate scores and iterative top-k expert selection.
//!
//! Selection runs k rounds of argmax over a working copy of the scores. A
//! selected slot is overwritten with `-1.0`, which is strictly below every
//! valid gate score (scores live in `[0, 1]`), so it can never win a later
//! round even when every remaining score is exactly `0.0`. Ties go to the
//! lowest expert index.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MoeError, Result};
use crate::model::{Gating, Matrix, ModelConfig};
use crate::pipeline::dense_matmul;

/// Value written over an already-selected score.
pub const SELECTED_MASK: f32 = -1.0;

/// Per-token expert selections and their gate weights, `num_tokens x top_k`
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingResult {
    pub num_tokens: usize,
    pub top_k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
}

impl RoutingResult {
    pub fn empty(top_k: usize) -> Self {
        Self {
            num_tokens: 0,
            top_k,
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Builds a routing from nested rows, checking that every row has the
    /// same length.
    pub fn from_rows(indices: &[Vec<usize>], weights: &[Vec<f32>]) -> Result<Self> {
        if indices.len() != weights.len() {
            return Err(shape_err("RoutingResult rows", indices.len(), weights.len()));
        }
        let top_k = indices.first().map_or(0, Vec::len);
        let mut flat_idx = Vec::with_capacity(indices.len() * top_k);
        let mut flat_w = Vec::with_capacity(indices.len() * top_k);
        for (ri, rw) in indices.iter().zip(weights) {
            if ri.len() != top_k || rw.len() != top_k {
                return Err(shape_err("RoutingResult row width", top_k, ri.len().max(rw.len())));
            }
            flat_idx.extend_from_slice(ri);
            flat_w.extend_from_slice(rw);
        }
        Ok(Self {
            num_tokens: indices.len(),
            top_k,
            indices: flat_idx,
            weights: flat_w,
        })
    }

    pub fn token_indices(&self, t: usize) -> &[usize] {
        &self.indices[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn token_weights(&self, t: usize) -> &[f32] {
        &self.weights[t * self.top_k..(t + 1) * self.top_k]
    }

    /// Number of expanded (token, slot) pairs.
    pub fn expanded_len(&self) -> usize {
        self.num_tokens * self.top_k
    }

    pub fn index_rows(&self) -> Vec<Vec<usize>> {
        (0..self.num_tokens).map(|t| self.token_indices(t).to_vec()).collect()
    }

    pub fn weight_rows(&self) -> Vec<Vec<f32>> {
        (0..self.num_tokens).map(|t| self.token_weights(t).to_vec()).collect()
    }

    /// Checks the structural invariants: in-range, pairwise-distinct indices
    /// per row and finite non-negative weights.
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.indices.len() != self.expanded_len() || self.weights.len() != self.expanded_len() {
            return Err(shape_err(
                "RoutingResult",
                self.expanded_len(),
                self.indices.len().max(self.weights.len()),
            ));
        }
        let mut seen = vec![usize::MAX; num_experts];
        for t in 0..self.num_tokens {
            for &e in self.token_indices(t) {
                if e >= num_experts {
                    return Err(MoeError::IndexOutOfRange { index: e, num_experts });
                }
                if seen[e] == t {
                    return Err(MoeError::InvalidSpec(format!(
                        "token {t} selects expert {e} twice"
                    )));
                }
                seen[e] = t;
            }
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MoeError::NonFiniteInput("routing weights"));
        }
        Ok(())
    }
}

/// `exp(x_i - max) / sum_j exp(x_j - max)` in single precision.
pub fn stable_softmax_row(row: &[f32]) -> Result<Vec<f32>> {
    let mut out = row.to_vec();
    stable_softmax_in_place(&mut out)?;
    Ok(out)
}

fn stable_softmax_in_place(row: &mut [f32]) -> Result<()> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFiniteInput("softmax row"));
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0_f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    // sum >= 1 because the max element contributes exp(0)
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies the gating nonlinearity row-wise to a `B x E` logit matrix.
/// Sigmoid mode is elementwise; its normalization happens in [`topk_select`].
pub fn gate_scores(logits: &Matrix, mode: Gating) -> Result<Matrix> {
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFiniteInput("router logits"));
    }
    let mut out = logits.clone();
    match mode {
        Gating::Softmax => {
            for r in 0..out.rows() {
                stable_softmax_in_place(out.row_mut(r))?;
            }
        }
        Gating::SigmoidNormalized => {
            for v in out.data_mut() {
                *v = sigmoid(*v);
            }
        }
    }
    Ok(out)
}

/// Index of the first maximum.
#[inline]
fn argmax_first(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_val = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Iterative argmax top-k with `-1.0` masking.
pub fn topk_select(scores: &Matrix, k: usize, mode: Gating) -> Result<RoutingResult> {
    let num_experts = scores.cols();
    if k == 0 || k > num_experts {
        return Err(MoeError::InvalidK { k, num_experts });
    }
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFiniteInput("gate scores"));
    }
    let b = scores.rows();
    let mut indices = Vec::with_capacity(b * k);
    let mut weights = Vec::with_capacity(b * k);
    let mut work = vec![0.0_f32; num_experts];
    for t in 0..b {
        let row = scores.row(t);
        work.copy_from_slice(row);
        let start = weights.len();
        for _ in 0..k {
            let e = argmax_first(&work);
            indices.push(e);
            weights.push(row[e]);
            work[e] = SELECTED_MASK;
        }
        if mode == Gating::SigmoidNormalized {
            let selected = &mut weights[start..];
            let sum: f32 = selected.iter().sum();
            if sum > 0.0 {
                selected.iter_mut().for_each(|w| *w /= sum);
            } else {
                selected.iter_mut().for_each(|w| *w = 1.0 / k as f32);
            }
        }
    }
    Ok(RoutingResult {
        num_tokens: b,
        top_k: k,
        indices,
        weights,
    })
}

/// Router projection, gating and top-k for a batch of tokens.
pub fn route(tokens: &Matrix, router_weight: &Matrix, config: &ModelConfig) -> Result<RoutingResult> {
    config.validate()?;
    if tokens.cols() != config.hidden_dim {
        return Err(shape_err("route tokens", config.hidden_dim, tokens.cols()));
    }
    if router_weight.shape() != (config.hidden_dim, config.num_experts) {
        return Err(shape_err(
            "router weight",
            format!("{}x{}", config.hidden_dim, config.num_experts),
            format!("{}x{}", router_weight.rows(), router_weight.cols()),
        ));
    }
    if tokens.rows() == 0 {
        return Ok(RoutingResult::empty(config.top_k));
    }
    let logits = dense_matmul(tokens, router_weight)?;
    let scores = gate_scores(&logits, config.gating)?;
    topk_select(&scores, config.top_k, config.gating)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = stable_softmax_row(&[1000.0, 0.0]).unwrap();
        assert!(close(&big, &[1.0, 0.0], 1e-6));
        // mpmath reference values
        let s = stable_softmax_row(&[2.0, 1.0, 0.0, -1.0]).unwrap();
        assert!(close(&s, &[0.643_914_3, 0.236_882_8, 0.087_144_32, 0.032_058_6], 1e-4));
        assert!(matches!(
            stable_softmax_row(&[f32::NAN, 0.0]),
            Err(MoeError::NonFiniteInput(_))
        ));
        assert!(stable_softmax_row(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn gate_score_examples() {
        let l = Matrix::from_rows(&[vec![0.0; 4]]).unwrap();
        assert_eq!(gate_scores(&l, Gating::Softmax).unwrap().data(), &[0.25; 4]);
        let l = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(gate_scores(&l, Gating::SigmoidNormalized).unwrap().data(), &[0.5, 0.5]);
        let l = Matrix::from_rows(&[vec![1000.0, 0.0, 0.0]]).unwrap();
        assert!(close(gate_scores(&l, Gating::Softmax).unwrap().data(), &[1.0, 0.0, 0.0], 1e-6));
        let bad = Matrix::from_rows(&[vec![f32::NEG_INFINITY, 0.0]]).unwrap();
        assert!(gate_scores(&bad, Gating::Softmax).is_err());
    }

    #[test]
    fn topk_examples() {
        let s = Matrix::from_rows(&[vec![0.7, 0.1, 0.1, 0.1]]).unwrap();
        let r = topk_select(&s, 1, Gating::Softmax).unwrap();
        assert_eq!((r.indices.clone(), r.weights.clone()), (vec![0], vec![0.7]));

        // hand trace: argmax -> 0 (tie with 3, lowest wins), then 3, then the
        // zeros at 1 and 2 tie and 1 wins; masked slots hold -1.0
        let s = Matrix::from_rows(&[vec![0.5, 0.0, 0.0, 0.5]]).unwrap();
        let r = topk_select(&s, 3, Gating::Softmax).unwrap();
        assert_eq!(r.indices, vec![0, 3, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5, 0.0]);

        let s = Matrix::from_rows(&[vec![0.4, 0.6]]).unwrap();
        let r = topk_select(&s, 2, Gating::SigmoidNormalized).unwrap();
        assert_eq!(r.indices, vec![1, 0]);
        assert!(close(&r.weights, &[0.6, 0.4], 1e-7));
    }

    #[test]
    fn zero_mask_would_reselect() {
        // With a 0.0 mask the second round on [0.0, 0.0, 0.0] could pick the
        // already-selected expert 0 again; -1.0 prevents it.
        let s = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let r = topk_select(&s, 3, Gating::Softmax).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
    }

    #[test]
    fn sigmoid_zero_sum_falls_back_to_uniform() {
        let s = Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
        let r = topk_select(&s, 2, Gating::SigmoidNormalized).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn topk_rejects_bad_k() {
        let s = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(
            topk_select(&s, 3, Gating::Softmax),
            Err(MoeError::InvalidK { k: 3, num_experts: 2 })
        );
        assert!(topk_select(&s, 0, Gating::Softmax).is_err());
    }

    #[test]
    fn route_examples() {
        let cfg = ModelConfig::new(4, 2, 1, 4, Gating::Softmax).unwrap();
        let tokens = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![5.0, 0.0, 0.0, 0.0]]).unwrap();
        let r = route(&tokens, &w, &cfg).unwrap();
        assert_eq!(r.indices[0], 0);
        // mpmath: softmax([5,0,0,0])[0] = 0.980186662...
        assert!((r.weights[0] - 0.980_186_7).abs() < 1e-4);

        let empty = route(&Matrix::zeros(0, 1), &w, &cfg).unwrap();
        assert_eq!(empty.num_tokens, 0);
        assert!(empty.indices.is_empty());

        let cfg1 = ModelConfig::new(1, 1, 3, 4, Gating::Softmax).unwrap();
        let tokens = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![9.0, 9.0, 9.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.3], vec![0.1], vec![-7.0]]).unwrap();
        let r = route(&tokens, &w, &cfg1).unwrap();
        assert_eq!(r.indices, vec![0, 0]);
        assert_eq!(r.weights, vec![1.0, 1.0]);

        let bad = Matrix::zeros(2, 4);
        assert!(matches!(route(&tokens, &bad, &cfg1), Err(MoeError::ShapeMismatch { .. })));
    }

    fn score_rows(max_e: usize) -> impl Strategy<Value = (usize, Vec<f32>)> {
        (1..=max_e).prop_flat_map(|e| {
            let cell = prop_oneof![3 => Just(0.0_f32), 1 => 0.0_f32..=1.0, 1 => Just(1.0_f32)];
            (Just(e), prop::collection::vec(cell, e))
        })
    }

    proptest! {
        #[test]
        fn never_reselects((e, row) in score_rows(256), k_seed in 0usize..1000) {
            let k = 1 + k_seed % e.min(8);
            let s = Matrix::from_vec(1, e, row).unwrap();
            let r = topk_select(&s, k, Gating::Softmax).unwrap();
            r.validate(e).unwrap();
        }

        #[test]
        fn softmax_shift_invariant(q in prop::collection::vec(-3200i32..3200, 1..32), c in -1000i32..1000) {
            // multiples of 1/64 so the shift itself is exact in f32
            let row: Vec<f32> = q.iter().map(|&v| v as f32 / 64.0).collect();
            let a = stable_softmax_row(&row).unwrap();
            let shifted: Vec<f32> = row.iter().map(|v| v + c as f32).collect();
            let b = stable_softmax_row(&shifted).unwrap();
            prop_assert_eq!(&a, &b);
            let sum: f32 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn first_pick_is_logit_argmax(row in prop::collection::vec(-8.0_f32..8.0, 1..64), sig in any::<bool>()) {
            let mode = if sig { Gating::SigmoidNormalized } else { Gating::Softmax };
            let logits = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
            let scores = gate_scores(&logits, mode).unwrap();
            let r = topk_select(&scores, 1, mode).unwrap();
            // both gatings are monotone; ties in the scores can only come from
            // ties (or f32 saturation) in the logits
            let picked = r.indices[0];
            let best = scores.row(0).iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(scores.get(0, picked), best);
            prop_assert!(scores.row(0)[..picked].iter().all(|&v| v < best));
            let logit_arg = argmax_first(&row);
            if scores.row(0).iter().filter(|&&v| v == best).count() == 1 {
                prop_assert_eq!(picked, logit_arg);
            }
        }

        #[test]
        fn weights_sum_rules(row in prop::collection::vec(-8.0_f32..8.0, 2..64), k_seed in 0usize..100) {
            let e = row.len();
            let k = 1 + k_seed % e.min(8);
            let logits = Matrix::from_vec(1, e, row).unwrap();
            let soft = topk_select(&gate_scores(&logits, Gating::Softmax).unwrap(), k, Gating::Softmax).unwrap();
            prop_assert!(soft.weights.iter().sum::<f32>() <= 1.0 + 1e-6);
            let sig = topk_select(
                &gate_scores(&logits, Gating::SigmoidNormalized).unwrap(),
                k,
                Gating::SigmoidNormalized,
            ).unwrap();
            prop_assert!((sig.weights.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            soft.validate(e).unwrap();
            sig.validate(e).unwrap();
        }
    }
}
