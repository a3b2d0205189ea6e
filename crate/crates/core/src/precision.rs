//! Element-type policy: which intermediates may be reduced to bfloat16
//! precision and which must never be.
//!
//! bfloat16 is emulated: values are rounded to the nearest bf16 and stored
//! back in the compute type. The residual stream and normalisation variances
//! are never rounded, and the decay exponential is only rounded under the
//! explicit ablation setting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ElemType, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayPrecision {
    #[default]
    F32,
    /// Ablation only: `exp(A_log)` rounded to bfloat16.
    Bf16e,
}

/// Places in the forward pass where the policy decides precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    InProj,
    ConvOut,
    SsdOut,
    OutProj,
    DecayExp,
    NormVariance,
    Residual,
}

impl Site {
    pub const ALL: [Site; 7] = [
        Site::InProj,
        Site::ConvOut,
        Site::SsdOut,
        Site::OutProj,
        Site::DecayExp,
        Site::NormVariance,
        Site::Residual,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElemPolicy {
    pub compute: ElemType,
    /// Floor for the residual accumulator. Always F32.
    pub residual: ElemType,
    pub decay_exp: DecayPrecision,
    pub bf16_emulation: bool,
}

impl Default for ElemPolicy {
    fn default() -> Self {
        Self {
            compute: ElemType::F32,
            residual: ElemType::F32,
            decay_exp: DecayPrecision::F32,
            bf16_emulation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteAudit {
    pub site: Site,
    pub storage: ElemType,
    pub bf16_rounded: bool,
}

impl ElemPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.residual != ElemType::F32 {
            return Err(Error::Config(format!(
                "residual precision must be f32, got {}",
                self.residual
            )));
        }
        Ok(())
    }

    pub fn with_compute(mut self, compute: ElemType) -> Self {
        self.compute = compute;
        self
    }

    /// Element type the residual stream is accumulated in for compute type `compute`:
    /// never narrower than f32.
    pub fn residual_elem(&self, compute: ElemType) -> ElemType {
        compute.max(self.residual)
    }

    pub fn rounds_to_bf16(&self, site: Site) -> bool {
        match site {
            Site::Residual | Site::NormVariance => false,
            Site::DecayExp => self.decay_exp == DecayPrecision::Bf16e,
            Site::InProj | Site::ConvOut | Site::SsdOut | Site::OutProj => self.bf16_emulation,
        }
    }

    /// Apply the policy for `site` in place.
    pub fn apply<T: Scalar>(&self, site: Site, t: &mut Tensor<T>) {
        if self.rounds_to_bf16(site) {
            for v in t.data_mut() {
                *v = v.bf16_round();
            }
        }
    }

    pub fn apply_scalar<T: Scalar>(&self, site: Site, v: T) -> T {
        if self.rounds_to_bf16(site) {
            v.bf16_round()
        } else {
            v
        }
    }

    /// Per-site precision decisions for a forward pass computing in `compute`.
    /// The forward pass consults [`Self::rounds_to_bf16`] at exactly these sites.
    pub fn audit(&self, compute: ElemType) -> Vec<SiteAudit> {
        Site::ALL
            .iter()
            .map(|&site| SiteAudit {
                site,
                storage: match site {
                    Site::Residual | Site::NormVariance => self.residual_elem(compute),
                    _ => compute,
                },
                bf16_rounded: self.rounds_to_bf16(site),
            })
            .collect()
    }
}
