use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which optional modules sit on top of the residual trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Residual trunk and weighted-average head only.
    WResNet,
    /// Adds the reference-oriented deformable stage.
    WResNetD,
    /// Adds the deformable stage and patch-level attention.
    Radn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::WResNet, Variant::WResNetD, Variant::Radn];

    pub fn has_deform(self) -> bool {
        matches!(self, Variant::WResNetD | Variant::Radn)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Radn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::WResNet => "wresnet",
            Variant::WResNetD => "wresnet_d",
            Variant::Radn => "radn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wresnet" => Ok(Variant::WResNet),
            "wresnet_d" | "wresnet-d" => Ok(Variant::WResNetD),
            "radn" => Ok(Variant::Radn),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variant `{s}` (expected wresnet, wresnet_d or radn)"
            ))),
        }
    }
}

/// One modified residual block: four 3x3 convolutions without normalization
/// and a single shortcut around all four.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Applied by the first convolution of the block.
    pub stride: usize,
    pub conv_count: usize,
}

impl ResidualBlockSpec {
    pub const KERNEL: usize = 3;

    /// A 1x1 projection replaces the identity shortcut when the block
    /// changes resolution or width.
    pub fn projects(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Output width of each stride-2 stage.
    pub stage_channels: Vec<usize>,
    pub patch_size: usize,
    /// Width of the per-patch feature vector; equals the last stage width.
    pub feature_width: usize,
    /// 1-based index of the stage whose input passes through the deformable layer.
    pub deform_stage: usize,
    pub head_hidden: usize,
    pub weight_epsilon: f32,
    /// Optional symmetric clamp on predicted offsets, in feature pixels.
    pub max_offset: Option<f32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Radn,
            stage_channels: vec![32, 64, 128, 256, 512],
            patch_size: 32,
            feature_width: 512,
            deform_stage: 3,
            head_hidden: 512,
            weight_epsilon: 1e-6,
            max_offset: None,
        }
    }
}

impl ModelConfig {
    pub const INPUT_CHANNELS: usize = 3;
    pub const DEFORM_KERNEL: usize = 3;

    /// Narrow widths for gradient checks and desk-scale training.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            stage_channels: vec![4, 8, 8, 8, 8],
            feature_width: 8,
            head_hidden: 16,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn blocks(&self) -> Vec<ResidualBlockSpec> {
        let mut in_c = Self::INPUT_CHANNELS;
        self.stage_channels
            .iter()
            .map(|&out_c| {
                let b = ResidualBlockSpec {
                    in_channels: in_c,
                    out_channels: out_c,
                    stride: 2,
                    conv_count: 4,
                };
                in_c = out_c;
                b
            })
            .collect()
    }

    /// Side length of the maps entering stage `stage` (1-based).
    pub fn spatial_at(&self, stage: usize) -> usize {
        self.patch_size >> (stage - 1)
    }

    /// Channel count of the maps entering stage `stage` (1-based).
    pub fn channels_at(&self, stage: usize) -> usize {
        if stage == 1 {
            Self::INPUT_CHANNELS
        } else {
            self.stage_channels[stage - 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let stages = self.stage_channels.len();
        if stages == 0 {
            errs.push("stage_channels must not be empty".to_string());
        }
        if self.stage_channels.contains(&0) {
            errs.push("stage widths must be positive".to_string());
        }
        if stages > 0 && stages < usize::BITS as usize {
            if self.patch_size != 1 << stages {
                errs.push(format!(
                    "patch_size {} must equal 2^{stages} so {stages} stride-2 stages end at 1x1",
                    self.patch_size
                ));
            }
            if self.stage_channels.last() != Some(&self.feature_width) {
                errs.push(format!(
                    "feature_width {} must equal the last stage width {:?}",
                    self.feature_width,
                    self.stage_channels.last()
                ));
            }
            if self.variant.has_deform() && !(1..=stages).contains(&self.deform_stage) {
                errs.push(format!("deform_stage must lie in 1..={stages}"));
            }
        }
        if self.head_hidden == 0 {
            errs.push("head_hidden must be positive".to_string());
        }
        if !(self.weight_epsilon > 0.0 && self.weight_epsilon.is_finite()) {
            errs.push("weight_epsilon must be positive".to_string());
        }
        if let Some(m) = self.max_offset {
            if !(m > 0.0 && m.is_finite()) {
                errs.push("max_offset must be positive".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
