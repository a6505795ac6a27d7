//! Synthetic routing with controlled expert skew, and load-imbalance metrics.
//!
//! Routing is drawn from a seeded ChaCha8 stream so a `(distribution, seed,
//! shape)` triple always yields the same assignment on every platform.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::model::ModelConfig;
use crate::router::RoutingResult;

/// Remaining probability mass below which rejection sampling gives up and
/// draws from the renormalized remainder directly.
const REJECTION_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Uniform,
    Zipf { alpha: f64 },
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Zipf { .. } => "zipf",
        }
    }

    /// Zipf exponent, 0 for uniform.
    pub fn alpha(&self) -> f64 {
        match *self {
            Distribution::Uniform => 0.0,
            Distribution::Zipf { alpha } => alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Uniform => Ok(()),
            Distribution::Zipf { alpha } if alpha.is_finite() && alpha > 0.0 => Ok(()),
            Distribution::Zipf { alpha } => Err(MoeError::InvalidSpec(format!(
                "zipf alpha must be finite and > 0, got {alpha}"
            ))),
        }
    }

    /// Per-expert selection probabilities.
    pub fn probabilities(&self, num_experts: usize) -> Vec<f64> {
        match *self {
            Distribution::Uniform => vec![1.0 / num_experts as f64; num_experts],
            Distribution::Zipf { alpha } => zipf_probabilities(num_experts, alpha),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Uniform => f.write_str("uniform"),
            Distribution::Zipf { alpha } => write!(f, "zipf:{alpha}"),
        }
    }
}

impl FromStr for Distribution {
    type Err = MoeError;

    /// Parses `uniform` or `zipf:<alpha>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(Distribution::Uniform);
        }
        let alpha = s
            .strip_prefix("zipf:")
            .or_else(|| s.strip_prefix("ZIPF:"))
            .ok_or_else(|| MoeError::InvalidSpec(format!("unknown distribution `{s}`")))?;
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| MoeError::InvalidSpec(format!("bad zipf alpha `{alpha}`")))?;
        let d = Distribution::Zipf { alpha };
        d.validate()?;
        Ok(d)
    }
}

/// `p(r) ∝ r^-alpha` over ranks `1..=num_experts`. Rank r maps to expert r-1.
pub fn zipf_probabilities(num_experts: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=num_experts).map(|r| (r as f64).powf(-alpha)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    pub distribution: Distribution,
    pub seed: u64,
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
}

impl SkewSpec {
    pub fn new(distribution: Distribution, seed: u64, num_tokens: usize, config: &ModelConfig) -> Self {
        Self {
            distribution,
            seed,
            num_tokens,
            num_experts: config.num_experts,
            top_k: config.top_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()?;
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::InvalidK {
                k: self.top_k,
                num_experts: self.num_experts,
            });
        }
        Ok(())
    }
}

/// Uniform in [0, 1) from the top 53 bits of one 64-bit draw.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF draw restricted to experts not yet taken.
fn draw(rng: &mut ChaCha8Rng, probs: &[f64], taken: &[bool], mass: f64) -> usize {
    let target = unit(rng) * mass;
    let mut acc = 0.0;
    let mut last = None;
    for (e, &p) in probs.iter().enumerate() {
        if taken[e] {
            continue;
        }
        acc += p;
        last = Some(e);
        if target < acc {
            return e;
        }
    }
    last.expect("at least one expert is free")
}

/// Draws `top_k` distinct experts per token, each weighted `1/top_k`.
///
/// Each slot is an inverse-CDF draw from the full distribution, redrawn while
/// it hits an expert already chosen for the token. When the unchosen experts
/// hold almost no mass the slot is drawn from them directly, which is the same
/// conditional distribution.
pub fn synthesize_routing(spec: &SkewSpec) -> Result<RoutingResult> {
    spec.validate()?;
    let (e, k) = (spec.num_experts, spec.top_k);
    let probs = spec.distribution.probabilities(e);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices = Vec::with_capacity(spec.num_tokens * k);
    let mut taken = vec![false; e];
    let none = vec![false; e];
    for _ in 0..spec.num_tokens {
        taken.iter_mut().for_each(|t| *t = false);
        let start = indices.len();
        for _ in 0..k {
            let free_mass: f64 = probs.iter().zip(&taken).filter(|(_, &t)| !t).map(|(p, _)| p).sum();
            let pick = if free_mass < REJECTION_FLOOR {
                draw(&mut rng, &probs, &taken, free_mass)
            } else {
                loop {
                    let c = draw(&mut rng, &probs, &none, 1.0);
                    if !taken[c] {
                        break c;
                    }
                }
            };
            taken[pick] = true;
            indices.push(pick);
        }
        debug_assert_eq!(indices.len() - start, k);
    }
    let w = 1.0 / k as f32;
    Ok(RoutingResult {
        num_tokens: spec.num_tokens,
        top_k: k,
        weights: vec![w; indices.len()],
        indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceMetrics {
    pub max_over_mean: f64,
    pub gini: f64,
    pub active_experts: usize,
}

/// Max-over-mean load, Gini coefficient and number of experts with work.
pub fn imbalance_metrics(counts: &[usize]) -> Result<ImbalanceMetrics> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(MoeError::AllZero);
    }
    let n = counts.len() as f64;
    let mean = total as f64 / n;
    let max = *counts.iter().max().expect("non-empty") as f64;
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let ranked: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (i + 1) as f64 * c as f64)
        .sum();
    let gini = 2.0 * ranked / (n * total as f64) - (n + 1.0) / n;
    Ok(ImbalanceMetrics {
        max_over_mean: max / mean,
        gini: gini.max(0.0),
        active_experts: counts.iter().filter(|&&c| c > 0).count(),
    })
}

/// On-disk routing replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDump {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f32>>,
    pub spec: SkewSpec,
}

impl RoutingDump {
    pub fn new(routing: &RoutingResult, spec: SkewSpec) -> Self {
        Self {
            indices: routing.index_rows(),
            weights: routing.weight_rows(),
            spec,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("routing dump serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| MoeError::InvalidSpec(format!("routing dump: {e}")))
    }

    /// Rebuilds and validates the routing against the recorded spec.
    pub fn routing(&self) -> Result<RoutingResult> {
        self.spec.validate()?;
        if self.indices.len() != self.spec.num_tokens {
            return Err(crate::error::shape_err(
                "routing dump rows",
                self.spec.num_tokens,
                self.indices.len(),
            ));
        }
        let r = if self.indices.is_empty() {
            RoutingResult::empty(self.spec.top_k)
        } else {
            RoutingResult::from_rows(&self.indices, &self.weights)?
        };
        if r.top_k != self.spec.top_k {
            return Err(crate::error::shape_err("routing dump top_k", self.spec.top_k, r.top_k));
        }
        r.validate(self.spec.num_experts)?;
        Ok(r)
    }
}
