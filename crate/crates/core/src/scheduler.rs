//! Expert histograms, offsets, the stable expert-contiguous permutation and
//! the fixed-tile block schedule.
//!
//! Expanded tokens are ordered token-major, slot-minor: token `t`, slot `j`
//! has expanded id `t * k + j`.

use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::router::RoutingResult;

/// Number of expanded tokens routed to each expert.
pub fn expert_histogram(routing: &RoutingResult, num_experts: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_experts];
    for &e in &routing.indices {
        *counts
            .get_mut(e)
            .ok_or(MoeError::IndexOutOfRange { index: e, num_experts })? += 1;
    }
    Ok(counts)
}

/// Exclusive prefix sum of per-expert counts, length `E + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertOffsets(Vec<usize>);

impl ExpertOffsets {
    /// Wraps raw offsets after checking they start at zero and never decrease.
    pub fn from_raw(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return Err(MoeError::ScheduleMismatch("offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(MoeError::ScheduleMismatch("offsets must be non-decreasing".into()));
        }
        Ok(Self(offsets))
    }

    pub fn num_experts(&self) -> usize {
        self.0.len() - 1
    }

    /// Tokens assigned to expert `e`.
    pub fn count(&self, e: usize) -> usize {
        self.0[e + 1] - self.0[e]
    }

    pub fn start(&self, e: usize) -> usize {
        self.0[e]
    }

    pub fn total(&self) -> usize {
        *self.0.last().expect("offsets are never empty")
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.0.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub fn expert_offsets(counts: &[usize]) -> ExpertOffsets {
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0;
    offsets.push(acc);
    for &c in counts {
        acc += c;
        offsets.push(acc);
    }
    ExpertOffsets(offsets)
}

/// Expert-contiguous ordering of expanded tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    /// `forward[dest]` = source expanded id.
    pub forward: Vec<usize>,
    /// `inverse[src]` = destination slot.
    pub inverse: Vec<usize>,
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Stable counting sort of expanded tokens by expert id.
pub fn build_permutation(routing: &RoutingResult) -> Permutation {
    let n = routing.expanded_len();
    let num_experts = routing.indices.iter().copied().max().map_or(0, |m| m + 1);
    let mut cursor = vec![0usize; num_experts + 1];
    for &e in &routing.indices {
        cursor[e + 1] += 1;
    }
    for e in 0..num_experts {
        cursor[e + 1] += cursor[e];
    }
    let mut forward = vec![0usize; n];
    let mut inverse = vec![0usize; n];
    for (src, &e) in routing.indices.iter().enumerate() {
        let dest = cursor[e];
        cursor[e] += 1;
        forward[dest] = src;
        inverse[src] = dest;
    }
    Permutation { forward, inverse }
}

/// One program block of the grouped GEMM: rows
/// `[offsets[expert] + token_offset, offsets[expert] + min(token_offset + block_m, n_e))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub expert: usize,
    #[serde(rename = "offset")]
    pub token_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub block_m: usize,
}

impl BlockSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Permuted-row range covered by `entry`.
    pub fn rows(&self, entry: ScheduleEntry, offsets: &ExpertOffsets) -> std::ops::Range<usize> {
        let n_e = offsets.count(entry.expert);
        let start = offsets.start(entry.expert) + entry.token_offset;
        let end = offsets.start(entry.expert) + (entry.token_offset + self.block_m).min(n_e);
        start..end
    }

    /// Verifies this schedule was built from `offsets` with `self.block_m`.
    pub fn check_against(&self, offsets: &ExpertOffsets) -> Result<()> {
        if self.block_m == 0 {
            return Err(MoeError::InvalidBlockM);
        }
        let expected = build_block_schedule(offsets, self.block_m)?;
        if expected.entries != self.entries {
            return Err(MoeError::ScheduleMismatch(format!(
                "expected {} entries for block_m={}, got {}",
                expected.len(),
                self.block_m,
                self.len()
            )));
        }
        Ok(())
    }
}

/// For each expert in ascending order emit `ceil(n_e / block_m)` entries
/// `(e, b * block_m)`.
pub fn build_block_schedule(offsets: &ExpertOffsets, block_m: usize) -> Result<BlockSchedule> {
    if block_m < 1 {
        return Err(MoeError::InvalidBlockM);
    }
    let mut entries = Vec::new();
    for e in 0..offsets.num_experts() {
        let n_e = offsets.count(e);
        for b in 0..n_e.div_ceil(block_m) {
            entries.push(ScheduleEntry {
                expert: e,
                token_offset: b * block_m,
            });
        }
    }
    Ok(BlockSchedule { entries, block_m })
}
