//! Run configuration: preset defaults, a JSON config file, and flag overrides.
//!
//! Config file schema (every field optional):
//!
//! ```json
//! {
//!   "model": "mixtral-8x7b" | {"num_experts": 8, "top_k": 2, "hidden_dim": 4096,
//!                              "ffn_dim": 14336, "gating": "softmax", "element_bytes": 2},
//!   "hardware": "a100" | {"name": "x", "mem_bandwidth": 2.0e12, "peak_flops": 3.0e14},
//!   "peak_flops": 1.3e15,
//!   "batch": [32, 128],
//!   "block_m": 64, "block_n": 64, "block_k": 32,
//!   "fused": "on" | "off" | "both",
//!   "skew": ["uniform", "zipf:1.2"],
//!   "seed": 0,
//!   "format": "csv" | "json" | "md",
//!   "out": "report.csv"
//! }
//! ```

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use super::{CliError, CommonArgs};
use crate::model::{hardware_preset, preset, HardwarePreset, HardwareProfile, ModelConfig, ModelPreset};
use crate::pipeline::PipelineParams;
use crate::skew::Distribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusedMode {
    On,
    Off,
    Both,
}

impl FusedMode {
    pub fn variants(self) -> &'static [bool] {
        match self {
            FusedMode::On => &[true],
            FusedMode::Off => &[false],
            FusedMode::Both => &[true, false],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Md,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum ModelSpec {
    Preset(String),
    Inline(ModelConfig),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum HardwareSpec {
    Preset(String),
    Inline(HardwareProfile),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelSpec>,
    hardware: Option<HardwareSpec>,
    peak_flops: Option<f64>,
    batch: Option<Vec<usize>>,
    block_m: Option<usize>,
    block_n: Option<usize>,
    block_k: Option<usize>,
    fused: Option<FusedMode>,
    skew: Option<Vec<String>>,
    seed: Option<u64>,
    format: Option<Format>,
    out: Option<PathBuf>,
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model_name: String,
    pub model: ModelConfig,
    hardware: HardwareSpec,
    peak_flops: Option<f64>,
    /// Empty when neither flags nor file set any; commands pick their default.
    pub batch_sizes: Vec<usize>,
    pub block_m: usize,
    pub block_n: usize,
    pub block_k: usize,
    pub fused: Option<FusedMode>,
    pub skew: Vec<Distribution>,
    pub seed: u64,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

fn model_from_name(name: &str) -> Result<(String, ModelConfig), CliError> {
    let p = ModelPreset::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = ModelPreset::ALL.iter().map(|p| p.name()).collect();
        CliError::Config(format!("unknown model `{name}` (known: {})", known.join(", ")))
    })?;
    Ok((p.name().to_string(), preset(p)))
}

impl RunConfig {
    /// Merges flags over the config file (if any) over built-in defaults.
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };

        let (model_name, model) = match (&args.model, &file.model) {
            (Some(name), _) | (None, Some(ModelSpec::Preset(name))) => model_from_name(name)?,
            (None, Some(ModelSpec::Inline(c))) => {
                c.validate()?;
                ("custom".to_string(), c.clone())
            }
            (None, None) => model_from_name("mixtral-8x7b")?,
        };

        let hardware = match (&args.hardware, file.hardware) {
            (Some(name), _) => HardwareSpec::Preset(name.clone()),
            (None, Some(h)) => h,
            (None, None) => HardwareSpec::Preset("a100".into()),
        };

        let batch_sizes = if !args.batch.is_empty() {
            args.batch.clone()
        } else {
            file.batch.unwrap_or_default()
        };

        let skew_src = if !args.skew.is_empty() {
            args.skew.clone()
        } else {
            file.skew.unwrap_or_default()
        };
        let skew = skew_src
            .iter()
            .map(|s| s.parse::<Distribution>())
            .collect::<Result<Vec<_>, _>>()?;

        let defaults = PipelineParams::default();
        let rc = Self {
            model_name,
            model,
            hardware,
            peak_flops: args.peak_flops.or(file.peak_flops),
            batch_sizes,
            block_m: args.block_m.or(file.block_m).unwrap_or(defaults.block_m),
            block_n: args.block_n.or(file.block_n).unwrap_or(defaults.block_n),
            block_k: args.block_k.or(file.block_k).unwrap_or(defaults.block_k),
            fused: args.fused.or(file.fused),
            skew,
            seed: args.seed.or(file.seed).unwrap_or(0),
            format: args.format.or(file.format),
            out: args.out.clone().or(file.out),
        };
        rc.params(true)?;
        Ok(rc)
    }

    pub fn params(&self, fused: bool) -> Result<PipelineParams, CliError> {
        Ok(PipelineParams::new(self.block_m, self.block_n, self.block_k, fused)?)
    }

    /// Hardware is resolved lazily so commands that never touch the roofline
    /// do not need a peak FLOP/s figure.
    pub fn hardware(&self) -> Result<HardwareProfile, CliError> {
        match &self.hardware {
            HardwareSpec::Preset(name) => {
                let p = HardwarePreset::from_name(name)
                    .ok_or_else(|| CliError::Config(format!("unknown hardware `{name}` (known: a100, mi300x)")))?;
                Ok(hardware_preset(p, self.peak_flops)?)
            }
            HardwareSpec::Inline(h) => {
                let mut h = h.clone();
                if let Some(p) = self.peak_flops {
                    h.peak_flops = p;
                }
                h.validate()?;
                Ok(h)
            }
        }
    }

    pub fn batches_or(&self, default: &[usize]) -> Vec<usize> {
        if self.batch_sizes.is_empty() {
            default.to_vec()
        } else {
            self.batch_sizes.clone()
        }
    }

    pub fn skew_or(&self, default: &[Distribution]) -> Vec<Distribution> {
        if self.skew.is_empty() {
            default.to_vec()
        } else {
            self.skew.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file_with(json: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(json.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults() {
        let rc = RunConfig::resolve(&CommonArgs::default()).unwrap();
        assert_eq!(rc.model_name, "mixtral-8x7b");
        assert_eq!((rc.block_m, rc.block_n, rc.block_k), (64, 64, 32));
        assert_eq!(rc.hardware().unwrap().name, "A100-SXM4-80GB");
        assert!(rc.batch_sizes.is_empty());
    }

    #[test]
    fn flags_override_file() {
        let f = file_with(r#"{"model": "deepseek-v3", "block_m": 16, "batch": [4, 8], "seed": 9}"#);
        let mut args = CommonArgs {
            config: Some(f.path().to_path_buf()),
            ..Default::default()
        };
        let rc = RunConfig::resolve(&args).unwrap();
        assert_eq!(rc.model.num_experts, 256);
        assert_eq!((rc.block_m, rc.seed), (16, 9));
        assert_eq!(rc.batch_sizes, [4, 8]);
        args.block_m = Some(3);
        args.model = Some("qwen2-moe-57b".into());
        args.batch = vec![2];
        let rc = RunConfig::resolve(&args).unwrap();
        assert_eq!(rc.block_m, 3);
        assert_eq!(rc.model_name, "qwen2-moe-57b");
        assert_eq!(rc.batch_sizes, [2]);
    }

    #[test]
    fn inline_model_and_hardware() {
        let f = file_with(
            r#"{"model": {"num_experts": 4, "top_k": 2, "hidden_dim": 8, "ffn_dim": 16, "gating": "sigmoid_normalized"},
                "hardware": {"name": "toy", "mem_bandwidth": 1e9, "peak_flops": 1e12}}"#,
        );
        let args = CommonArgs {
            config: Some(f.path().to_path_buf()),
            ..Default::default()
        };
        let rc = RunConfig::resolve(&args).unwrap();
        assert_eq!(rc.model_name, "custom");
        assert_eq!(rc.model.element_bytes, 2);
        assert_eq!(rc.hardware().unwrap().ridge_point(), 1000.0);
    }

    #[test]
    fn config_errors() {
        let bad = [
            r#"{"model": "gpt-moe"}"#,
            r#"{"block_m": 0}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"skew": ["zipf:-2"]}"#,
            r#"{"model": {"num_experts": 2, "top_k": 3, "hidden_dim": 8, "ffn_dim": 8, "gating": "softmax"}}"#,
            "not json",
        ];
        for json in bad {
            let f = file_with(json);
            let args = CommonArgs {
                config: Some(f.path().to_path_buf()),
                ..Default::default()
            };
            assert!(RunConfig::resolve(&args).is_err(), "{json}");
        }
        let args = CommonArgs {
            hardware: Some("mi300x".into()),
            ..Default::default()
        };
        let rc = RunConfig::resolve(&args).unwrap();
        assert!(rc.hardware().is_err());
    }
}
