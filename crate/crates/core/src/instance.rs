//! Random layer instances for verification runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ExpertWeights, Matrix, ModelConfig};

/// Tokens, router weight and expert weights for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Matrix,
    pub router_weight: Matrix,
    pub weights: ExpertWeights,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}

impl Instance {
    /// Values uniform in `[-1, 1)` for tokens and router weights, and scaled
    /// by `1/sqrt(fan_in)` for expert weights so outputs stay O(1).
    pub fn random(config: &ModelConfig, num_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d, f) = (config.num_experts, config.hidden_dim, config.ffn_dim);
        let tokens = uniform(&mut rng, num_tokens, d, 1.0);
        let router_weight = uniform(&mut rng, d, e, 1.0);
        let sd = 1.0 / (d as f32).sqrt();
        let sf = 1.0 / (f as f32).sqrt();
        let gate = uniform(&mut rng, e * d, f, sd);
        let up = uniform(&mut rng, e * d, f, sd);
        let down = uniform(&mut rng, e * f, d, sf);
        Self {
            tokens,
            router_weight,
            weights: ExpertWeights::new(gate, up, down),
        }
    }
}
