use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::MaskStrategy;
use crate::precision::ElemPolicy;
use crate::ssd::DtLimits;

/// Architecture hyperparameters. Derived sizes are methods, not fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub head_dim: usize,
    pub expand: usize,
    pub n_groups: usize,
    pub conv_kernel: usize,
    pub chunk_size: usize,
    pub norm_eps: f64,
    #[serde(default)]
    pub dt_limits: DtLimits,
    #[serde(default)]
    pub elem_policy: ElemPolicy,
    #[serde(default)]
    pub mask_strategy: MaskStrategy,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            d_state: 8,
            head_dim: 8,
            expand: 2,
            n_groups: 1,
            conv_kernel: 4,
            chunk_size: 8,
            norm_eps: 1e-5,
            dt_limits: DtLimits::default(),
            elem_policy: ElemPolicy::default(),
            mask_strategy: MaskStrategy::Static,
        }
    }

    /// Shape of the 130M-parameter reference checkpoint.
    pub fn mamba2_130m() -> Self {
        Self {
            vocab_size: 50288,
            d_model: 768,
            n_layers: 24,
            d_state: 128,
            head_dim: 64,
            expand: 2,
            n_groups: 1,
            conv_kernel: 4,
            chunk_size: 256,
            norm_eps: 1e-5,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "mamba2-130m" => Some(Self::mamba2_130m()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 2] = ["tiny", "mamba2-130m"];

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn n_heads(&self) -> usize {
        self.d_inner() / self.head_dim.max(1)
    }

    /// Channels through the depthwise conv: `x`, `B` and `C`.
    pub fn conv_dim(&self) -> usize {
        self.d_inner() + 2 * self.n_groups * self.d_state
    }

    /// Width of the input projection: `[z | xBC | dt_raw]`.
    pub fn d_in_proj(&self) -> usize {
        self.d_inner() + self.conv_dim() + self.n_heads()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("head_dim", self.head_dim),
            ("expand", self.expand),
            ("n_groups", self.n_groups),
            ("conv_kernel", self.conv_kernel),
            ("chunk_size", self.chunk_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_inner().is_multiple_of(self.head_dim) {
            return Err(Error::Config(format!(
                "d_inner {} is not a multiple of head_dim {}",
                self.d_inner(),
                self.head_dim
            )));
        }
        if !self.n_heads().is_multiple_of(self.n_groups) {
            return Err(Error::Config(format!(
                "{} heads cannot be split into {} groups",
                self.n_heads(),
                self.n_groups
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config(format!("norm_eps must be positive, got {}", self.norm_eps)));
        }
        self.dt_limits.validate()?;
        self.elem_policy.validate()
    }
}
