//! Global-memory traffic and FLOP counters recorded by the tile executor.
//!
//! Every tile load or store counts as one global-memory access of its valid
//! elements. There is no cache model; masked rows of partial tiles are
//! neither read nor written and therefore never counted.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Router,
    Permute,
    GateUp,
    Down,
    Unpermute,
    HostSchedule,
}

impl Stage {
    /// The five device stages in execution order.
    pub const DEVICE: [Stage; 5] = [
        Stage::Router,
        Stage::Permute,
        Stage::GateUp,
        Stage::Down,
        Stage::Unpermute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Router => "router",
            Stage::Permute => "permute",
            Stage::GateUp => "gate_up",
            Stage::Down => "down",
            Stage::Unpermute => "unpermute",
            Stage::HostSchedule => "host_schedule",
        }
    }

    pub fn is_expert_ffn(self) -> bool {
        matches!(self, Stage::GateUp | Stage::Down)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counters for one stage. Byte counters are split by tensor role so the
/// perf model can line them up against closed-form traffic terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub tiles: u64,
    pub flops: u64,
    /// Activation reads: token rows or GEMM A tiles.
    pub input_read_bytes: u64,
    /// Weight reads (router weight or expert weight tiles).
    pub weight_read_bytes: u64,
    /// Writes to materialized intermediates (`gate_out`, `up_out`).
    pub scratch_write_bytes: u64,
    /// Read-backs of materialized intermediates.
    pub scratch_read_bytes: u64,
    /// Writes of the stage's output tensor.
    pub output_write_bytes: u64,
    /// Expert weight bytes read, indexed by expert. Empty for non-GEMM stages.
    pub expert_weight_bytes: Vec<u64>,
}

impl StageTrace {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            tiles: 0,
            flops: 0,
            input_read_bytes: 0,
            weight_read_bytes: 0,
            scratch_write_bytes: 0,
            scratch_read_bytes: 0,
            output_write_bytes: 0,
            expert_weight_bytes: Vec::new(),
        }
    }

    pub(crate) fn with_experts(stage: Stage, num_experts: usize) -> Self {
        Self {
            expert_weight_bytes: vec![0; num_experts],
            ..Self::new(stage)
        }
    }

    pub fn bytes_read(&self) -> u64 {
        self.input_read_bytes + self.weight_read_bytes + self.scratch_read_bytes
    }

    pub fn bytes_written(&self) -> u64 {
        self.scratch_write_bytes + self.output_write_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_read() + self.bytes_written()
    }

    /// Activation traffic only (everything except weight reads).
    pub fn activation_bytes(&self) -> u64 {
        self.total_bytes() - self.weight_read_bytes
    }

    pub(crate) fn add_weight_read(&mut self, expert: usize, bytes: u64) {
        self.weight_read_bytes += bytes;
        if let Some(slot) = self.expert_weight_bytes.get_mut(expert) {
            *slot += bytes;
        }
    }

    /// Adds another trace of the same stage into this one.
    pub fn merge(&mut self, other: &StageTrace) {
        self.tiles += other.tiles;
        self.flops += other.flops;
        self.input_read_bytes += other.input_read_bytes;
        self.weight_read_bytes += other.weight_read_bytes;
        self.scratch_write_bytes += other.scratch_write_bytes;
        self.scratch_read_bytes += other.scratch_read_bytes;
        self.output_write_bytes += other.output_write_bytes;
        if self.expert_weight_bytes.len() < other.expert_weight_bytes.len() {
            self.expert_weight_bytes.resize(other.expert_weight_bytes.len(), 0);
        }
        for (a, b) in self.expert_weight_bytes.iter_mut().zip(&other.expert_weight_bytes) {
            *a += b;
        }
    }
}

/// Per-stage records of one forward pass: five device stages plus the host
/// side schedule construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub element_bytes: usize,
    pub fused: bool,
    pub stages: Vec<StageTrace>,
}

impl PipelineTrace {
    pub fn stage(&self, stage: Stage) -> Option<&StageTrace> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn device_stages(&self) -> impl Iterator<Item = &StageTrace> {
        self.stages.iter().filter(|s| s.stage != Stage::HostSchedule)
    }

    pub fn total_bytes(&self) -> u64 {
        self.device_stages().map(StageTrace::total_bytes).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.device_stages().map(|s| s.flops).sum()
    }
}
