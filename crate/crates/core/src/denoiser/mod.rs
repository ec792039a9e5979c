//! Pixel-space U-Net noise predictor with a layer registry.
//!
//! Every block exposes a `conv` sublayer (the residual block output, after the
//! decoder skip concatenation has been merged by its convolutions) and, at
//! attention resolutions, a `self_attn` sublayer. Both can be tapped and
//! overridden by name, e.g. `decoder.0.conv` or `encoder.3.self_attn`.

mod unet;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use unet::{self_attention, DenoiserModel, TrainCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Bottleneck,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Conv,
    SelfAttn,
}

/// Names one tappable sublayer of the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub side: Side,
    pub block: usize,
    pub sublayer: Sublayer,
}

impl LayerId {
    pub const fn new(side: Side, block: usize, sublayer: Sublayer) -> Self {
        Self {
            side,
            block,
            sublayer,
        }
    }

    pub const fn enc(block: usize, sublayer: Sublayer) -> Self {
        Self::new(Side::Encoder, block, sublayer)
    }

    pub const fn dec(block: usize, sublayer: Sublayer) -> Self {
        Self::new(Side::Decoder, block, sublayer)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::Encoder => "encoder",
            Side::Bottleneck => "bottleneck",
            Side::Decoder => "decoder",
        };
        let sub = match self.sublayer {
            Sublayer::Conv => "conv",
            Sublayer::SelfAttn => "self_attn",
        };
        write!(f, "{side}.{}.{sub}", self.block)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let bad = || Error::config(format!("malformed layer name `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let side = match parts[0] {
            "encoder" => Side::Encoder,
            "bottleneck" => Side::Bottleneck,
            "decoder" => Side::Decoder,
            _ => return Err(bad()),
        };
        let block = parts[1].parse().map_err(|_| bad())?;
        let sublayer = match parts[2] {
            "conv" => Sublayer::Conv,
            "self_attn" | "attn" => Sublayer::SelfAttn,
            _ => return Err(bad()),
        };
        Ok(Self::new(side, block, sublayer))
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    /// `(spatial size, blocks per side)` from the input resolution downwards.
    pub resolutions: Vec<(usize, usize)>,
    /// Width multiplier of `base_width` per resolution level.
    pub channel_mult: Vec<usize>,
    pub attn_resolutions: Vec<usize>,
    pub heads: usize,
    /// Number of labels including the reserved null label (the last index).
    pub num_classes: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_width: 16,
            resolutions: vec![(32, 2), (16, 2), (8, 2)],
            channel_mult: vec![1, 2, 2],
            attn_resolutions: vec![16, 8],
            heads: 2,
            num_classes: 20,
            time_embed_dim: 64,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// A tiny configuration (a few thousand weights) for gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            base_width: 8,
            resolutions: vec![(8, 1), (4, 1)],
            channel_mult: vec![1, 1],
            attn_resolutions: vec![4],
            heads: 2,
            num_classes: 3,
            time_embed_dim: 8,
            groups: 4,
        }
    }

    pub fn null_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.resolutions.is_empty() {
            return err("at least one resolution level is required".into());
        }
        if self.channel_mult.len() != self.resolutions.len() {
            return err(format!(
                "channel_mult has {} entries but there are {} resolution levels",
                self.channel_mult.len(),
                self.resolutions.len()
            ));
        }
        let levels = self.resolutions.len();
        if self.image_size == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return err(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size,
                levels - 1
            ));
        }
        for (i, &(size, blocks)) in self.resolutions.iter().enumerate() {
            if size != self.image_size >> i {
                return err(format!(
                    "resolution level {i} has size {size}, expected {}",
                    self.image_size >> i
                ));
            }
            if blocks == 0 {
                return err(format!("resolution level {i} has no blocks"));
            }
            let w = self.width(i);
            if w == 0 || w % self.groups != 0 {
                return err(format!("width {w} at level {i} is not divisible by {} groups", self.groups));
            }
            if self.attn_resolutions.contains(&size) && w % self.heads != 0 {
                return err(format!("heads {} do not divide attention width {w}", self.heads));
            }
        }
        if self.base_width % self.groups != 0 {
            return err(format!("base width {} not divisible by groups", self.base_width));
        }
        if self.channels == 0 || self.heads == 0 {
            return err("channels and heads must be positive".into());
        }
        if self.num_classes < 2 {
            return err("num_classes must include at least one label plus the null label".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return err(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        Ok(())
    }

    /// Blocks in registry order: encoder, bottleneck, decoder.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let levels = self.resolutions.len();
        let mut out = Vec::new();
        let mut idx = 0;
        let mut cin = self.base_width;
        let mut skip_widths = Vec::new();
        for (level, &(size, blocks)) in self.resolutions.iter().enumerate() {
            for _ in 0..blocks {
                let cout = self.width(level);
                out.push(BlockSpec {
                    side: Side::Encoder,
                    index: idx,
                    level,
                    size,
                    cin,
                    cout,
                    attn: self.attn_resolutions.contains(&size),
                });
                skip_widths.push(cout);
                cin = cout;
                idx += 1;
            }
        }
        let deepest = levels - 1;
        let (size, _) = self.resolutions[deepest];
        out.push(BlockSpec {
            side: Side::Bottleneck,
            index: 0,
            level: deepest,
            size,
            cin,
            cout: cin,
            attn: false,
        });
        let mut idx = 0;
        for level in (0..levels).rev() {
            let (size, blocks) = self.resolutions[level];
            for _ in 0..blocks {
                let skip = skip_widths.pop().expect("one skip per encoder block");
                let cout = self.width(level);
                out.push(BlockSpec {
                    side: Side::Decoder,
                    index: idx,
                    level,
                    size,
                    cin: cin + skip,
                    cout,
                    attn: self.attn_resolutions.contains(&size),
                });
                cin = cout;
                idx += 1;
            }
        }
        out
    }

    /// Every tappable sublayer in forward order.
    pub fn registry(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        for b in self.block_specs() {
            out.push(LayerId::new(b.side, b.index, Sublayer::Conv));
            if b.attn {
                out.push(LayerId::new(b.side, b.index, Sublayer::SelfAttn));
            }
        }
        out
    }

    pub fn block_spec(&self, side: Side, index: usize) -> Option<BlockSpec> {
        self.block_specs()
            .into_iter()
            .find(|b| b.side == side && b.index == index)
    }

    /// Native shape of a tap or override tensor.
    pub fn tap_shape(&self, layer: LayerId, kind: TapKind) -> Result<Vec<usize>> {
        let spec = self
            .block_spec(layer.side, layer.block)
            .ok_or_else(|| Error::contract(format!("unknown layer `{layer}`")))?;
        let n = spec.size * spec.size;
        match (layer.sublayer, kind) {
            (Sublayer::Conv, TapKind::ConvFeature) => Ok(vec![n, spec.cout]),
            (Sublayer::SelfAttn, _) if !spec.attn => {
                Err(Error::contract(format!("layer `{layer}` has no self-attention")))
            }
            (Sublayer::SelfAttn, TapKind::PreAttnFeature) => Ok(vec![n, spec.cout]),
            (Sublayer::SelfAttn, TapKind::AttnMap) => Ok(vec![self.heads, n, n]),
            _ => Err(Error::contract(format!(
                "layer `{layer}` does not support {kind:?} taps"
            ))),
        }
    }

    pub fn contains(&self, layer: LayerId) -> bool {
        self.registry().contains(&layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub side: Side,
    pub index: usize,
    pub level: usize,
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    pub attn: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    /// Block output after the residual convolutions, `[tokens, channels]`.
    ConvFeature,
    /// Normalised feature right before self-attention, `[tokens, channels]`.
    PreAttnFeature,
    /// Attention map used by the layer, `[heads, tokens, tokens]`.
    AttnMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapRequest {
    pub layer: LayerId,
    pub kind: TapKind,
}

impl TapRequest {
    pub fn new(layer: LayerId, kind: TapKind) -> Self {
        Self { layer, kind }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapRecord {
    pub layer: LayerId,
    pub kind: TapKind,
    pub tensor: Tensor,
    /// Whether an override or appearance hook touched this sublayer.
    pub overridden: bool,
}

/// How appearance statistics are pooled from the appearance features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsWeighting {
    /// Per-token statistics weighted by the cross-image attention map.
    #[default]
    Attention,
    /// Global per-channel statistics (plain AdaIN).
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceOptions {
    pub weighting: StatsWeighting,
    /// Spatially normalise the output feature before applying `S` and `M`.
    pub renormalize_source: bool,
}

/// Feature replacements applied during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OverrideSet {
    /// Replaces the `conv` feature, `[tokens, channels]`.
    pub conv: BTreeMap<LayerId, Tensor>,
    /// Replaces every head's attention map, `[heads, tokens, tokens]`.
    pub attn: BTreeMap<LayerId, Tensor>,
    /// Appearance features `[tokens_a, channels]` whose statistics are
    /// transferred onto the pre-attention feature.
    pub appearance: BTreeMap<LayerId, Tensor>,
    pub appearance_options: AppearanceOptions,
}

impl OverrideSet {
    pub fn is_empty(&self) -> bool {
        self.conv.is_empty() && self.attn.is_empty() && self.appearance.is_empty()
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        for (layer, t) in &self.conv {
            let want = cfg.tap_shape(*layer, TapKind::ConvFeature)?;
            t.ensure_shape(&want, &format!("conv override at {layer}"))?;
        }
        for (layer, t) in &self.attn {
            let want = cfg.tap_shape(*layer, TapKind::AttnMap)?;
            t.ensure_shape(&want, &format!("attention override at {layer}"))?;
        }
        for (layer, t) in &self.appearance {
            let want = cfg.tap_shape(*layer, TapKind::PreAttnFeature)?;
            if t.shape().len() != 2 || t.cols() != want[1] || t.rows() < 1 {
                return Err(Error::contract(format!(
                    "appearance feature at {layer}: expected [n, {}], got {:?}",
                    want[1],
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
