//! Model configuration and its JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hire::bottleneck_dims;
use crate::ops::{ActivationKind, NormMode};
use crate::rearrange::{PaddingMode, ShiftManner};

/// Cumulative downsampling each stage must reach.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Smallest accepted input extent.
pub const MIN_INPUT: usize = 32;

pub const BUILTIN_NAMES: [&str; 4] = ["tiny", "small", "base", "large"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    /// Height region size.
    pub h: usize,
    /// Width region size.
    pub w: usize,
    /// Cross-region shift step.
    pub s: usize,
    #[serde(default)]
    pub padding: PaddingMode,
    /// Overrides the model-wide channel-MLP expansion ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_ratio: Option<usize>,
}

fn zero_padding() -> PaddingMode {
    PaddingMode::Zero
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEmbedConfig {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default = "zero_padding")]
    pub padding: PaddingMode,
}

/// Switches for the structural ablations. All on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub height: bool,
    pub width: bool,
    pub channel: bool,
    pub inner_rearrange: bool,
    pub cross_rearrange: bool,
    pub cross_restore: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            height: true,
            width: true,
            channel: true,
            inner_rearrange: true,
            cross_rearrange: true,
            cross_restore: true,
        }
    }
}

/// Published parameter and FLOP totals a config is expected to land near.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub params: u64,
    pub flops: u64,
}

fn three() -> usize {
    3
}

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

fn running() -> NormMode {
    NormMode::RunningStatistics
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Set on configs whose widths were chosen to meet a budget rather
    /// than taken from a published table.
    #[serde(default, skip_serializing_if = "is_default")]
    pub reconstructed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Budget>,
    pub stages: Vec<StageConfig>,
    pub expansion_ratio: usize,
    pub num_classes: usize,
    pub patch_embed: Vec<PatchEmbedConfig>,
    #[serde(default = "three")]
    pub in_channels: usize,
    #[serde(default)]
    pub manner: ShiftManner,
    /// Projections per bottleneck MLP.
    #[serde(default = "two")]
    pub fc_layers: usize,
    /// Cross-region rearrangement runs on blocks whose index within the
    /// stage has this parity.
    #[serde(default = "one")]
    pub shift_phase: usize,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default = "running")]
    pub norm_mode: NormMode,
    #[serde(default, skip_serializing_if = "is_default")]
    pub toggles: Toggles,
}

impl ModelConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "tiny" => include_str!("../../configs/tiny.json"),
            "small" => include_str!("../../configs/small.json"),
            "base" => include_str!("../../configs/base.json"),
            "large" => include_str!("../../configs/large.json"),
            other => {
                return Err(Error::config(format!(
                    "unknown built-in config `{other}` (expected one of {})",
                    BUILTIN_NAMES.join(", ")
                )))
            }
        };
        Self::from_json(text)
    }

    /// A small four-stage config for checks and tests: depths (2, 2, 2, 2),
    /// channels (8, 16, 16, 32), default region sizes and steps.
    pub fn micro(num_classes: usize) -> Self {
        let stage = |channels, h, s| StageConfig {
            depth: 2,
            channels,
            h,
            w: h,
            s,
            padding: PaddingMode::Circular,
            expansion_ratio: None,
        };
        let embed = |kernel, stride| PatchEmbedConfig {
            kernel,
            stride,
            padding: PaddingMode::Zero,
        };
        Self {
            name: Some("micro".into()),
            reconstructed: false,
            reference: None,
            stages: vec![stage(8, 4, 2), stage(16, 3, 2), stage(16, 3, 1), stage(32, 2, 1)],
            expansion_ratio: 4,
            num_classes,
            patch_embed: vec![embed(7, 4), embed(3, 2), embed(3, 2), embed(3, 2)],
            in_channels: 3,
            manner: ShiftManner::Shifted,
            fc_layers: 2,
            shift_phase: 1,
            activation: ActivationKind::Gelu,
            norm_mode: NormMode::RunningStatistics,
            toggles: Toggles::default(),
        }
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }

    pub fn stage_ratio(&self, stage: usize) -> usize {
        self.stages[stage].expansion_ratio.unwrap_or(self.expansion_ratio)
    }

    /// Whether block `index` of a stage carries the cross-region step.
    pub fn shifts_block(&self, index: usize) -> bool {
        self.toggles.cross_rearrange && index % 2 == self.shift_phase
    }

    /// Region sizes actually applied by the spatial branches.
    pub fn effective_regions(&self, stage: usize) -> (usize, usize) {
        let s = &self.stages[stage];
        if self.toggles.inner_rearrange {
            (s.h, s.w)
        } else {
            (1, 1)
        }
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.stages.len() != 4 {
            v.push(format!("expected 4 stages, got {}", self.stages.len()));
        }
        if self.patch_embed.len() != self.stages.len() {
            v.push(format!(
                "expected one patch_embed entry per stage ({}), got {}",
                self.stages.len(),
                self.patch_embed.len()
            ));
        }
        if self.expansion_ratio == 0 {
            v.push("expansion_ratio must be at least 1".into());
        }
        if self.num_classes == 0 {
            v.push("num_classes must be at least 1".into());
        }
        if self.in_channels == 0 {
            v.push("in_channels must be at least 1".into());
        }
        if self.shift_phase > 1 {
            v.push(format!("shift_phase must be 0 or 1, got {}", self.shift_phase));
        }
        if self.fc_layers == 0 {
            v.push("fc_layers must be at least 1".into());
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                v.push(format!("stage {i}: depth must be at least 1"));
            }
            if s.channels < prev {
                v.push(format!(
                    "stage {i}: channels {} below the previous stage's {prev}",
                    s.channels
                ));
            }
            prev = s.channels;
            if s.h == 0 || s.w == 0 {
                v.push(format!("stage {i}: region sizes must be at least 1"));
            } else if self.fc_layers > 0 {
                let (h, w) = if self.toggles.inner_rearrange { (s.h, s.w) } else { (1, 1) };
                for r in [h, w] {
                    if let Err(Error::Config(msgs)) = bottleneck_dims(self.fc_layers, r, s.channels) {
                        v.extend(msgs.into_iter().map(|m| format!("stage {i}: {m}")));
                        break;
                    }
                }
            }
            if s.expansion_ratio == Some(0) {
                v.push(format!("stage {i}: expansion_ratio must be at least 1"));
            }
        }
        let mut cumulative = 1;
        for (i, p) in self.patch_embed.iter().enumerate() {
            if p.stride == 0 {
                v.push(format!("patch_embed {i}: stride must be at least 1"));
                continue;
            }
            if p.kernel < p.stride {
                v.push(format!(
                    "patch_embed {i}: kernel {} smaller than stride {}",
                    p.kernel, p.stride
                ));
            }
            cumulative *= p.stride;
            if let Some(&expected) = STAGE_STRIDES.get(i) {
                if cumulative != expected {
                    v.push(format!(
                        "patch_embed {i}: cumulative stride {cumulative}, stage resolution must be H/{expected}"
                    ));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
