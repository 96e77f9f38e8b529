//! Declarative run configuration. A `SimConfig` holds every knob as plain
//! data with the standard defaults; it can be loaded from a TOML file (any
//! subset of keys), adjusted field-by-field (the CLI does this for explicit
//! flags), and finally turned into validated `RunParams`.

use std::path::Path;

use serde::Deserialize;

use crate::accel::{AcceleratorKind, AcceleratorModel};
use crate::cache::{CacheLevelConfig, HierarchyConfig};
use crate::encoder::{ModelConfig, RunParams};
use crate::error::SimError;
use crate::kernels::Activation;
use crate::layout::LayoutChoice;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Defaults to `model_dim / heads` when absent.
    pub head_dim: Option<usize>,
    pub ff_dim: usize,
    pub layers: usize,
    /// "rwma" or "bwma".
    pub layout: String,
    /// "sa" or "simd".
    pub accel: String,
    pub kernel_size: usize,
    pub cores: usize,
    pub l1_kb: usize,
    pub l2_kb: usize,
    pub line_bytes: usize,
    pub l1_assoc: usize,
    pub l2_assoc: usize,
    pub l1_latency: u64,
    pub l2_latency: u64,
    pub mem_latency: u64,
    pub prefetch: bool,
    /// Accesses one core issues before the round-robin trace replay moves to
    /// the next core.
    pub interleave_chunk: usize,
    pub seed: u64,
    /// "gelu" or "relu" (applied fused into FF1).
    pub activation: String,
    pub elem_bytes: usize,
    /// Generate per-core work concurrently on the host. Results are
    /// identical either way.
    pub parallel: bool,
    /// Reject model shapes that are not multiples of the kernel size.
    pub strict_dims: bool,
    /// When false, skip the floating-point math and produce timings only.
    pub compute_values: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seq_len: 512,
            model_dim: 768,
            heads: 12,
            head_dim: None,
            ff_dim: 3072,
            layers: 12,
            layout: "bwma".into(),
            accel: "sa".into(),
            kernel_size: 16,
            cores: 1,
            l1_kb: 32,
            l2_kb: 1024,
            line_bytes: 64,
            l1_assoc: 4,
            l2_assoc: 8,
            l1_latency: 2,
            l2_latency: 20,
            mem_latency: 100,
            prefetch: false,
            interleave_chunk: 64,
            seed: 42,
            activation: "gelu".into(),
            elem_bytes: 4,
            parallel: true,
            strict_dims: false,
            compute_values: true,
        }
    }
}

impl SimConfig {
    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))
    }

    /// Overwrites the model shape and kernel size with the small test model.
    pub fn apply_toy(&mut self) {
        let toy = ModelConfig::toy();
        self.seq_len = toy.seq_len;
        self.model_dim = toy.model_dim;
        self.heads = toy.heads;
        self.head_dim = Some(toy.head_dim);
        self.ff_dim = toy.ff_dim;
        self.layers = toy.layers;
        self.kernel_size = 8;
    }

    pub fn parse_layout(&self) -> Result<LayoutChoice, SimError> {
        match self.layout.to_ascii_lowercase().as_str() {
            "rwma" => Ok(LayoutChoice::Rwma),
            "bwma" => Ok(LayoutChoice::Bwma),
            other => Err(SimError::Config(format!(
                "unknown layout {other:?} (expected \"rwma\" or \"bwma\")"
            ))),
        }
    }

    pub fn parse_accel(&self) -> Result<AcceleratorKind, SimError> {
        match self.accel.to_ascii_lowercase().as_str() {
            "sa" => Ok(AcceleratorKind::SystolicArray),
            "simd" => Ok(AcceleratorKind::Simd),
            other => Err(SimError::Config(format!(
                "unknown accelerator {other:?} (expected \"sa\" or \"simd\")"
            ))),
        }
    }

    fn parse_activation(&self) -> Result<Activation, SimError> {
        match self.activation.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(SimError::Config(format!(
                "unknown activation {other:?} (expected \"gelu\" or \"relu\")"
            ))),
        }
    }

    pub fn model(&self) -> Result<ModelConfig, SimError> {
        let head_dim = match self.head_dim {
            Some(d) => d,
            None => {
                if self.heads == 0 || self.model_dim % self.heads != 0 {
                    return Err(SimError::Config(format!(
                        "model_dim {} is not divisible by heads {}; give head_dim explicitly",
                        self.model_dim, self.heads
                    )));
                }
                self.model_dim / self.heads
            }
        };
        Ok(ModelConfig {
            seq_len: self.seq_len,
            model_dim: self.model_dim,
            heads: self.heads,
            head_dim,
            ff_dim: self.ff_dim,
            layers: self.layers,
        })
    }

    pub fn hierarchy(&self) -> Result<HierarchyConfig, SimError> {
        if !matches!(self.cores, 1 | 2 | 4) {
            return Err(SimError::Config(format!(
                "cores must be 1, 2 or 4 (got {})",
                self.cores
            )));
        }
        let h = HierarchyConfig {
            l1: CacheLevelConfig {
                capacity_bytes: self.l1_kb * 1024,
                line_bytes: self.line_bytes,
                associativity: self.l1_assoc,
                hit_latency: self.l1_latency,
            },
            l2: CacheLevelConfig {
                capacity_bytes: self.l2_kb * 1024,
                line_bytes: self.line_bytes,
                associativity: self.l2_assoc,
                hit_latency: self.l2_latency,
            },
            mem_latency: self.mem_latency,
            cores: self.cores,
            prefetch: self.prefetch,
            interleave_chunk: self.interleave_chunk,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn to_params(&self) -> Result<RunParams, SimError> {
        let params = RunParams {
            model: self.model()?,
            layout: self.parse_layout()?,
            accel: AcceleratorModel::new(self.parse_accel()?, self.kernel_size),
            hierarchy: self.hierarchy()?,
            seed: self.seed,
            activation: self.parse_activation()?,
            elem_width: self.elem_bytes,
            compute_values: self.compute_values,
            exec_parallel: self.parallel,
            strict_dims: self.strict_dims,
        };
        params.validate()?;
        Ok(params)
    }
}
