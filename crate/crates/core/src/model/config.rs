use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttnNorm};
use crate::error::{Error, Result};
use crate::multiscale::{MsmParams, MultiScaleConfig, Scale};

/// A switchable part of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Short,
    Mid,
    Long,
    Sam,
    CamPre,
    CamPost,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Short,
        Component::Mid,
        Component::Long,
        Component::Sam,
        Component::CamPre,
        Component::CamPost,
    ];

    pub fn scale(self) -> Option<Scale> {
        match self {
            Component::Short => Some(Scale::Short),
            Component::Mid => Some(Scale::Mid),
            Component::Long => Some(Scale::Long),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Short => "short",
            Component::Mid => "mid",
            Component::Long => "long",
            Component::Sam => "sam",
            Component::CamPre => "cam_pre",
            Component::CamPost => "cam_post",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    /// Accepts `S`/`M`/`L` as well as the snake-case names.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s" | "short" => Ok(Component::Short),
            "m" | "mid" => Ok(Component::Mid),
            "l" | "long" => Ok(Component::Long),
            "sam" => Ok(Component::Sam),
            "cam_pre" => Ok(Component::CamPre),
            "cam_post" => Ok(Component::CamPost),
            other => Err(Error::Config(format!("unknown component `{other}`"))),
        }
    }
}

/// Temporal layer type. Only causal attention is implemented; the enum is
/// the extension point for recurrent alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalLayer {
    #[default]
    Ctm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsfinConfig {
    pub d_in: usize,
    pub d: usize,
    pub n_objects: usize,
    pub heads: usize,
    pub layers_sam: usize,
    pub layers_cam: usize,
    pub layers_ctm: usize,
    pub fps: u32,
    pub attn_norm: AttnNorm,
    /// Hidden widths of the risk head; `None` means `[d, d/4]`.
    pub mlp_hidden: Option<[usize; 2]>,
    /// Rows of the positional-encoding table.
    pub max_frames: usize,
    pub disable: BTreeSet<Component>,
    /// One fusion layer shared by every scale instead of one per scale.
    pub share_scale_fusion: bool,
    pub temporal: TemporalLayer,
}

impl Default for MsfinConfig {
    fn default() -> Self {
        MsfinConfig {
            d_in: 4096,
            d: 512,
            n_objects: 19,
            heads: 4,
            layers_sam: 2,
            layers_cam: 2,
            layers_ctm: 2,
            fps: 20,
            attn_norm: AttnNorm::Softmax,
            mlp_hidden: None,
            max_frames: 256,
            disable: BTreeSet::new(),
            share_scale_fusion: false,
            temporal: TemporalLayer::Ctm,
        }
    }
}

impl MsfinConfig {
    /// Desk-scale configuration for synthetic data.
    pub fn toy() -> Self {
        MsfinConfig {
            d_in: 64,
            d: 32,
            n_objects: 6,
            fps: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_in == 0 {
            return fail("widths must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.layers_sam == 0 || self.layers_cam == 0 || self.layers_ctm == 0 {
            return fail("every layer count must be at least 1".into());
        }
        if self.n_objects == 0 {
            return fail("n_objects must be at least 1".into());
        }
        if self.max_frames == 0 {
            return fail("max_frames must be at least 1".into());
        }
        if self.scales().is_empty() {
            return fail("all three scales disabled: no scene branch remains".into());
        }
        let (h1, h2) = self.hidden();
        if h1 == 0 || h2 == 0 {
            return fail("mlp hidden widths must be positive".into());
        }
        self.msm_config()?;
        Ok(())
    }

    pub fn enabled(&self, c: Component) -> bool {
        !self.disable.contains(&c)
    }

    /// Enabled scales in short, mid, long order.
    pub fn scales(&self) -> Vec<Scale> {
        Component::ALL
            .iter()
            .filter(|c| self.enabled(**c))
            .filter_map(|c| c.scale())
            .collect()
    }

    pub fn hidden(&self) -> (usize, usize) {
        match self.mlp_hidden {
            Some([a, b]) => (a, b),
            None => (self.d, (self.d / 4).max(1)),
        }
    }

    /// Number of enabled object-aggregation paths (SaM, CaM).
    pub fn object_paths(&self) -> usize {
        [Component::Sam, Component::CamPre]
            .iter()
            .filter(|c| self.enabled(**c))
            .count()
    }

    pub fn n_fuse(&self) -> usize {
        if self.share_scale_fusion {
            1
        } else {
            self.scales().len()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            norm: self.attn_norm,
        }
    }

    pub fn msm_config(&self) -> Result<MultiScaleConfig> {
        MultiScaleConfig::from_fps(self.fps, self.d)
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let block = AttentionBlock::<crate::tensor::Tensor<f32>>::count(d);
        let s = self.scales().len();
        let (h1, h2) = self.hidden();
        let mut n = 2 * (self.d_in * d + d) + self.max_frames * d + d;
        if self.enabled(Component::Sam) {
            n += self.layers_sam * block;
        }
        if self.enabled(Component::CamPre) {
            n += self.layers_cam * block;
        }
        let k = self.object_paths();
        if k > 0 {
            n += k * d * d + d;
        }
        n += MsmParams::<crate::tensor::Tensor<f32>>::count(d, self.n_fuse());
        n += (1 + s) * self.layers_ctm * block;
        if self.enabled(Component::CamPost) {
            n += s * self.layers_cam * block;
        }
        n + s * d * h1 + h1 + h1 * h2 + h2 + h2 + 1
    }
}
