//! Declarative model construction for the three architectures:
//! single-branch attribution, two-branch (class-independent or
//! class-conditional, four sizes × four sharing levels), and the
//! provenance VAE.

pub mod single;
pub mod two_branch;
pub mod vae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::MASK_SENTINEL;
use crate::tensor::Tensor;

pub use single::SingleBranchModel;
pub use two_branch::{Conditioning, TwoBranchModel};
pub use vae::{VaeModel, VaeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleBranch,
    TwoBranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePreset {
    Small,
    Medium,
    Large,
    XLarge,
    PaperA1,
    PaperA2,
}

impl SizePreset {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "small" => Self::Small,
            "medium" => Self::Medium,
            "large" => Self::Large,
            "xlarge" => Self::XLarge,
            "paper_a1" => Self::PaperA1,
            "paper_a2" => Self::PaperA2,
            other => return Err(Error::Config(format!("unknown model size '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SharingLevel {
    I,
    II,
    III,
    IV,
}

impl SharingLevel {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "1" | "I" | "i" => Self::I,
            "2" | "II" | "ii" => Self::II,
            "3" | "III" | "iii" => Self::III,
            "4" | "IV" | "iv" => Self::IV,
            other => return Err(Error::Config(format!("unknown sharing level '{other}'"))),
        })
    }

    /// How many conv layers are shared (level IV also shares the first FC).
    pub fn shared_convs(&self) -> usize {
        match self {
            SharingLevel::I => 1,
            SharingLevel::II => 2,
            SharingLevel::III => 3,
            SharingLevel::IV => 3,
        }
    }

    pub fn shares_first_fc(&self) -> bool {
        matches!(self, SharingLevel::IV)
    }
}

/// Channel progression and FC width for a size preset.
#[derive(Debug, Clone, Copy)]
pub struct SizeDims {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub fc: usize,
}

pub fn size_dims(size: SizePreset) -> SizeDims {
    match size {
        SizePreset::Small => SizeDims { c1: 32, c2: 64, c3: 128, fc: 128 },
        SizePreset::Medium => SizeDims { c1: 64, c2: 128, c3: 256, fc: 256 },
        SizePreset::Large => SizeDims { c1: 128, c2: 256, c3: 512, fc: 512 },
        SizePreset::XLarge => SizeDims { c1: 256, c2: 512, c3: 1024, fc: 1024 },
        SizePreset::PaperA1 => SizeDims { c1: 128, c2: 256, c3: 512, fc: 0 },
        SizePreset::PaperA2 => SizeDims { c1: 64, c2: 128, c3: 256, fc: 2048 },
    }
}

/// Architecture description: what to build, not the weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Two-branch only: class-conditional index head of width M.
    pub conditional: bool,
    pub size: SizePreset,
    pub sharing_level: SharingLevel,
    pub num_classes: usize,
    /// N for single-branch / class-independent, M for class-conditional.
    pub index_output_size: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::SingleBranch && self.conditional {
            return Err(Error::Param(
                "conditional single-branch is not a supported combination".into(),
            ));
        }
        if self.variant == Variant::SingleBranch && self.size == SizePreset::PaperA2 {
            return Err(Error::Param("paper_a2 is a two-branch architecture".into()));
        }
        if self.variant == Variant::TwoBranch && self.size == SizePreset::PaperA1 {
            return Err(Error::Param("paper_a1 is a single-branch architecture".into()));
        }
        if self.num_classes == 0 || self.index_output_size == 0 {
            return Err(Error::Param("num_classes and index_output_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Forward products common to the CNN models.
pub struct ForwardOut {
    /// Absent for the single-branch network.
    pub class_logits: Option<Tensor>,
    pub index_logits: Tensor,
    /// Last hidden activation of the index branch (pre-logit).
    pub embedding: Tensor,
}

/// Per-sample validity mask for a class-conditional head of width `m`:
/// position k is valid iff k < K_{class}.
pub fn validity_mask(classes: &[usize], class_counts: &[usize], m: usize) -> Vec<bool> {
    let mut mask = vec![false; classes.len() * m];
    for (i, &y) in classes.iter().enumerate() {
        let ky = class_counts[y].min(m);
        mask[i * m..i * m + ky].fill(true);
    }
    mask
}

/// Overwrite invalid positions with the −1e30 sentinel.
pub fn apply_mask_sentinel(logits: &mut Tensor, mask: &[bool]) {
    debug_assert_eq!(logits.len(), mask.len());
    for (v, &ok) in logits.data_mut().iter_mut().zip(mask.iter()) {
        if !ok {
            *v = MASK_SENTINEL;
        }
    }
}

/// Parameter accounting for a built model.
#[derive(Debug, Clone, Copy)]
pub struct ParamAccounting {
    pub total_unique: usize,
    pub shared: usize,
}

impl ParamAccounting {
    pub fn sharing_ratio(&self) -> f64 {
        self.shared as f64 / self.total_unique as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_combinations_rejected() {
        let bad = ModelSpec {
            variant: Variant::SingleBranch,
            conditional: true,
            size: SizePreset::Small,
            sharing_level: SharingLevel::I,
            num_classes: 10,
            index_output_size: 100,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mask_shape() {
        let mask = validity_mask(&[0, 1], &[3, 5], 5);
        assert_eq!(&mask[0..5], &[true, true, true, false, false]);
        assert_eq!(&mask[5..10], &[true; 5]);
    }
}
