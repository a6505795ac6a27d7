//! Reference implementation of a five-stage mixture-of-experts dispatch
//! pipeline (router, permute, fused gate+up, down GEMM, unpermute) with an
//! analytical traffic/roofline model and a routing-skew workload generator.

pub mod cli;
pub mod error;
pub mod instance;
pub mod model;
pub mod perfmodel;
pub mod pipeline;
pub mod router;
pub mod scheduler;
pub mod skew;

pub use error::{MoeError, Result};
pub use model::{
    hardware_preset, preset, ExpertWeights, Gating, HardwarePreset, HardwareProfile, Matrix,
    ModelConfig, ModelPreset,
};
pub use pipeline::{moe_forward, PipelineParams, PipelineTrace, Stage};
pub use router::RoutingResult;
