//! Reference toy architectures.

use std::fmt;
use std::str::FromStr;

use super::{HeadKind, LayerSpec, NetworkModel};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const FRAME_SIZE: usize = 16;
pub const EMBED_DIM: usize = 32;
pub const RNN_HIDDEN: usize = 16;
pub const RNN_FRAMES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Three conv blocks, GAP, dense logits.
    TinyCls,
    /// Three conv blocks, GAP, dense embedding, optional unit normalization.
    TinyRet,
    /// Eight conv blocks, GAP, dense logits; used for timing.
    TinyDeep,
    /// Per-frame conv trunk, GAP, gated recurrent fuse, normalized embedding.
    TinyRnn,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::TinyCls, Preset::TinyRet, Preset::TinyDeep, Preset::TinyRnn];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TinyCls => "tiny-cls",
            Preset::TinyRet => "tiny-ret",
            Preset::TinyDeep => "tiny-deep",
            Preset::TinyRnn => "tiny-rnn",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")))
    }
}

fn conv_trunk(channels: &[usize], strides: &[usize]) -> Vec<LayerSpec> {
    channels
        .iter()
        .zip(strides)
        .flat_map(|(&c, &s)| [LayerSpec::conv(3, c, s, 1), LayerSpec::Relu])
        .collect()
}

/// 32x32x3 input, 16x16x32 last feature map, `n_classes` logits.
pub fn tiny_cls(n_classes: usize, seed: u64) -> Result<NetworkModel> {
    let mut layers = conv_trunk(&[8, 16, 32], &[1, 1, 2]);
    layers.extend([LayerSpec::Gap, LayerSpec::Dense { out_dim: n_classes }]);
    NetworkModel::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], None, layers, HeadKind::Logits(n_classes), seed)
}

/// Same trunk as [`tiny_cls`] with a `dim`-wide embedding. Triplet training
/// wants `normalize = true`; N-pair uses the raw embedding.
pub fn tiny_ret(dim: usize, normalize: bool, seed: u64) -> Result<NetworkModel> {
    let mut layers = conv_trunk(&[8, 16, 32], &[1, 1, 2]);
    layers.extend([LayerSpec::Gap, LayerSpec::Dense { out_dim: dim }]);
    if normalize {
        layers.push(LayerSpec::EmbedNormalize);
    }
    NetworkModel::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], None, layers, HeadKind::Embedding(dim), seed)
}

/// Eight conv blocks on a 32x32 input, ending in a 16x16x16 feature map.
pub fn tiny_deep(n_classes: usize, seed: u64) -> Result<NetworkModel> {
    let mut layers = conv_trunk(&[8, 16, 16, 16, 16, 16, 16, 16], &[1, 2, 1, 1, 1, 1, 1, 1]);
    layers.extend([LayerSpec::Gap, LayerSpec::Dense { out_dim: n_classes }]);
    NetworkModel::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], None, layers, HeadKind::Logits(n_classes), seed)
}

/// `frames` frames of 16x16x3, an 8x8x16 per-frame feature map, a gated
/// recurrent fuse and a normalized `dim`-wide embedding.
pub fn tiny_rnn(frames: usize, dim: usize, seed: u64) -> Result<NetworkModel> {
    let mut layers = conv_trunk(&[8, 16], &[1, 2]);
    layers.extend([
        LayerSpec::Gap,
        LayerSpec::RecurrentFuse { hidden_dim: RNN_HIDDEN },
        LayerSpec::Dense { out_dim: dim },
        LayerSpec::EmbedNormalize,
    ]);
    NetworkModel::new(
        vec![FRAME_SIZE, FRAME_SIZE, 3],
        Some(frames),
        layers,
        HeadKind::Embedding(dim),
        seed,
    )
}

impl Preset {
    /// Builds the preset with its default head: 4 classes, or a 32-wide
    /// normalized embedding, or 3 frames.
    pub fn build(self, seed: u64) -> Result<NetworkModel> {
        match self {
            Preset::TinyCls => tiny_cls(4, seed),
            Preset::TinyRet => tiny_ret(EMBED_DIM, true, seed),
            Preset::TinyDeep => tiny_deep(4, seed),
            Preset::TinyRnn => tiny_rnn(RNN_FRAMES, RNN_HIDDEN, seed),
        }
    }
}
