use alloc::format;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (self.stride > 0 && self.kernel > 0 && padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Architecture of the hybrid ViT.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub image: ImageShape,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    /// Token width `d`.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of encoder blocks `L`.
    pub layers: usize,
    pub ln_eps: Real,
    pub bn_eps: Real,
    pub bn_momentum: Real,
}

impl ModelConfig {
    /// The default desk-scale profile: 16×16×3 images, a 4×4 token grid,
    /// `L = 6`, `d = 32`, 4 heads.
    pub fn desk() -> Self {
        Self {
            image: ImageShape {
                height: 16,
                width: 16,
                channels: 3,
            },
            conv1: ConvSpec {
                out_channels: 8,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            conv2: ConvSpec {
                out_channels: 16,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            layers: 6,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// A small model for equivalence and gradient tests: `L = 4`, `d = 16`,
    /// 2 heads, 16 tokens.
    pub fn tiny() -> Self {
        Self {
            conv1: ConvSpec {
                out_channels: 4,
                ..Self::desk().conv1
            },
            conv2: ConvSpec {
                out_channels: 8,
                ..Self::desk().conv2
            },
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            layers: 4,
            ..Self::desk()
        }
    }

    /// ViT-B-sized geometry on 224×224×3 input: 196 tokens of width 768.
    pub fn paper_scale() -> Self {
        Self {
            image: ImageShape {
                height: 224,
                width: 224,
                channels: 3,
            },
            conv1: ConvSpec {
                out_channels: 16,
                kernel: 4,
                stride: 4,
                padding: 0,
            },
            conv2: ConvSpec {
                out_channels: 64,
                kernel: 4,
                stride: 4,
                padding: 0,
            },
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            layers: 12,
            ..Self::desk()
        }
    }

    /// Side lengths of the token grid after both tokenizer convolutions.
    pub fn grid(&self) -> Option<(usize, usize)> {
        let h = self.conv2.out_extent(self.conv1.out_extent(self.image.height)?)?;
        let w = self.conv2.out_extent(self.conv1.out_extent(self.image.width)?)?;
        Some((h, w))
    }

    /// Number of patch tokens `S`.
    pub fn tokens(&self) -> usize {
        self.grid().map_or(0, |(h, w)| h * w)
    }

    pub fn grid_side(&self) -> usize {
        self.grid().map_or(0, |(h, _)| h)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.image.numel() == 0 {
            return fail(format!("image shape {:?} has a zero extent", self.image));
        }
        if self.layers == 0 {
            return fail("model needs at least one encoder block".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.conv1.out_channels == 0 || self.conv2.out_channels == 0 {
            return fail("layer widths must be positive".into());
        }
        match self.grid() {
            None => return fail(format!("tokenizer convolutions do not fit image {:?}", self.image)),
            Some((h, w)) if h != w => {
                return fail(format!("token grid {h}×{w} is not square; the adapter needs a square grid"))
            }
            Some(_) => {}
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) || !(self.ln_eps > 0.0) {
            return fail("normalization constants out of range".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub tokenizer: usize,
    pub encoder: usize,
    pub adapter: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.tokenizer + self.encoder + self.adapter + self.head
    }
}
