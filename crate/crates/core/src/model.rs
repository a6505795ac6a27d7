//! Layer configuration, hardware profiles and the dense tensor types shared by
//! the rest of the crate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MoeError, Result};

/// How router logits become expert affinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Softmax over all experts (Mixtral style); selected scores are used as-is.
    Softmax,
    /// Elementwise sigmoid, then the selected top-k are normalized per token
    /// (DeepSeek style).
    SigmoidNormalized,
}

/// One MoE layer: expert count, top-k, hidden and FFN widths, gating mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub gating: Gating,
    /// Bytes per stored element. Only affects traffic accounting.
    #[serde(default = "default_element_bytes")]
    pub element_bytes: usize,
}

fn default_element_bytes() -> usize {
    2
}

impl ModelConfig {
    pub fn new(
        num_experts: usize,
        top_k: usize,
        hidden_dim: usize,
        ffn_dim: usize,
        gating: Gating,
    ) -> Result<Self> {
        let config = Self {
            num_experts,
            top_k,
            hidden_dim,
            ffn_dim,
            gating,
            element_bytes: default_element_bytes(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_element_bytes(mut self, element_bytes: usize) -> Result<Self> {
        self.element_bytes = element_bytes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(MoeError::InvalidConfig("num_experts must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::InvalidK {
                k: self.top_k,
                num_experts: self.num_experts,
            });
        }
        if self.hidden_dim == 0 || self.ffn_dim == 0 {
            return Err(MoeError::InvalidConfig(
                "hidden_dim and ffn_dim must be positive".into(),
            ));
        }
        if self.element_bytes == 0 {
            return Err(MoeError::InvalidConfig("element_bytes must be positive".into()));
        }
        Ok(())
    }
}

/// The four published benchmark configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelPreset {
    Mixtral8x7B,
    Mixtral8x22B,
    DeepSeekV3,
    Qwen2MoE57B,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 4] = [
        ModelPreset::Mixtral8x7B,
        ModelPreset::Mixtral8x22B,
        ModelPreset::DeepSeekV3,
        ModelPreset::Qwen2MoE57B,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Mixtral8x7B => "mixtral-8x7b",
            ModelPreset::Mixtral8x22B => "mixtral-8x22b",
            ModelPreset::DeepSeekV3 => "deepseek-v3",
            ModelPreset::Qwen2MoE57B => "qwen2-moe-57b",
        }
    }

    /// Case-insensitive lookup; accepts the canonical name and the enum
    /// spelling (`Mixtral8x7B`, `mixtral-8x7b`, `mixtral8x7b`).
    pub fn from_name(name: &str) -> Option<Self> {
        let norm: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Self::ALL.into_iter().find(|p| {
            let canon: String = p.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
            canon == norm
        })
    }
}

/// Returns the exact (E, k, d, d_ffn) row for a published configuration.
pub fn preset(name: ModelPreset) -> ModelConfig {
    let (num_experts, top_k, hidden_dim, ffn_dim, gating) = match name {
        ModelPreset::Mixtral8x7B => (8, 2, 4096, 14336, Gating::Softmax),
        ModelPreset::Mixtral8x22B => (8, 2, 6144, 16384, Gating::Softmax),
        ModelPreset::DeepSeekV3 => (256, 8, 7168, 2048, Gating::SigmoidNormalized),
        ModelPreset::Qwen2MoE57B => (64, 4, 3584, 2560, Gating::Softmax),
    };
    ModelConfig {
        num_experts,
        top_k,
        hidden_dim,
        ffn_dim,
        gating,
        element_bytes: default_element_bytes(),
    }
}

/// Memory bandwidth (bytes/s) and peak throughput (FLOP/s) of a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub mem_bandwidth: f64,
    pub peak_flops: f64,
}

impl HardwareProfile {
    pub fn new(name: impl Into<String>, mem_bandwidth: f64, peak_flops: f64) -> Result<Self> {
        let hw = Self {
            name: name.into(),
            mem_bandwidth,
            peak_flops,
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.mem_bandwidth) || !ok(self.peak_flops) {
            return Err(MoeError::InvalidHardware(format!(
                "{}: bandwidth and peak must be finite and positive",
                self.name
            )));
        }
        let ridge = self.ridge_point();
        if !ridge.is_finite() || ridge <= 0.0 {
            return Err(MoeError::InvalidHardware(format!(
                "{}: ridge point is not finite",
                self.name
            )));
        }
        Ok(())
    }

    /// Arithmetic intensity (FLOP/byte) where the roofline turns compute-bound.
    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HardwarePreset {
    A100,
    MI300X,
}

impl HardwarePreset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a100" | "a100-sxm4-80gb" => Some(HardwarePreset::A100),
            "mi300x" => Some(HardwarePreset::MI300X),
            _ => None,
        }
    }
}

/// Built-in hardware profiles. MI300X ships without a peak FLOP/s figure, so
/// the caller must provide one.
pub fn hardware_preset(name: HardwarePreset, peak_flops: Option<f64>) -> Result<HardwareProfile> {
    match name {
        HardwarePreset::A100 => {
            HardwareProfile::new("A100-SXM4-80GB", 2039e9, peak_flops.unwrap_or(312e12))
        }
        HardwarePreset::MI300X => {
            let peak = peak_flops.ok_or(MoeError::MissingPeakFlops("MI300X"))?;
            HardwareProfile::new("MI300X", 5.3e12, peak)
        }
    }
}

/// Dense row-major single-precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0_f32, |m, v| m.max(v.abs()))
    }
}

/// Expert weight stacks. `gate` and `up` hold E matrices of shape d x d_ffn
/// stacked vertically (E*d rows); `down` holds E matrices of d_ffn x d.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl ExpertWeights {
    pub fn new(gate: Matrix, up: Matrix, down: Matrix) -> Self {
        Self { gate, up, down }
    }

    /// Checks that all three stacks agree with `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let (e, d, f) = (config.num_experts, config.hidden_dim, config.ffn_dim);
        let want_gu = (e * d, f);
        if self.gate.shape() != want_gu {
            return Err(shape_err("gate stack", fmt_shape(want_gu), fmt_shape(self.gate.shape())));
        }
        if self.up.shape() != want_gu {
            return Err(shape_err("up stack", fmt_shape(want_gu), fmt_shape(self.up.shape())));
        }
        let want_down = (e * f, d);
        if self.down.shape() != want_down {
            return Err(shape_err("down stack", fmt_shape(want_down), fmt_shape(self.down.shape())));
        }
        Ok(())
    }
}

pub(crate) fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}
