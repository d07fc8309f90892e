//! Backbone: a small hierarchical conv/attention encoder producing the global
//! feature, and an FPN-style pixel decoder producing the multi-scale pixel
//! pyramid.
//!
//! Only the shape contract matters downstream: level `l` has stride
//! `strides[l]` and `channels[l]` channels, and the global feature sits at the
//! coarsest stride with `global_channels` channels.

use candle_core::Tensor;

use crate::domain::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{
    gelu, resize_bilinear, space_to_depth, Attention, Conv2d, ForwardCtx, LayerNorm, Linear, Mlp,
    Scope,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub global_channels: usize,
    /// Residual blocks per stage.
    pub depths: Vec<usize>,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            strides: vec![4, 8, 16],
            channels: vec![32, 32, 32],
            global_channels: 32,
            depths: vec![1, 1, 1],
            heads: 2,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn global_stride(&self) -> usize {
        *self.strides.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.strides.len();
        if l == 0 {
            return Err(Error::Config("encoder needs at least one level".into()));
        }
        if self.channels.len() != l || self.depths.len() != l {
            return Err(Error::Config(format!(
                "encoder strides/channels/depths lengths differ: {l}, {}, {}",
                self.channels.len(),
                self.depths.len()
            )));
        }
        if self.strides[0] == 0 {
            return Err(Error::Config("encoder strides must be positive".into()));
        }
        for w in self.strides.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return Err(Error::Config(format!(
                    "encoder strides must ascend by integer factors, got {:?}",
                    self.strides
                )));
            }
        }
        if self.channels.iter().any(|&c| c == 0) || self.global_channels == 0 {
            return Err(Error::Config("encoder channel widths must be positive".into()));
        }
        let last = *self.channels.last().unwrap();
        if self.heads == 0 || last % self.heads != 0 {
            return Err(Error::Config(format!(
                "last-stage width {last} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Spatial size of level `l` for an `h×w` input.
    pub fn level_size(&self, l: usize, h: usize, w: usize) -> (usize, usize) {
        (h / self.strides[l], w / self.strides[l])
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.global_stride();
        if h < s || w < s {
            return Err(Error::shape(format!(
                "input {h}×{w} smaller than the coarsest stride {s}"
            )));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "input {h}×{w} not divisible by the coarsest stride {s}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    norm: LayerNorm,
    conv: Conv2d,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + gelu(&self.conv.forward(&self.norm.forward(x)?)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl AttnBlock {
    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let seq = x.reshape((b, h * w, c))?;
        let n = self.norm1.forward(&seq)?;
        let seq = (&seq + self.attn.forward(&n, &n, &n, ctx)?)?;
        let seq = (&seq + self.mlp.forward(&self.norm2.forward(&seq)?)?)?;
        Ok(seq.reshape((b, h, w, c))?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv(ConvBlock),
    Attn(AttnBlock),
}

#[derive(Debug, Clone)]
struct Stage {
    /// Space-to-depth factor applied before `embed`.
    factor: usize,
    embed: Linear,
    norm: LayerNorm,
    blocks: Vec<Block>,
}

/// Intermediate encoder output: per-stage features plus the global feature.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<FeatureMap>,
    pub global: FeatureMap,
    pub input_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
    global_proj: Linear,
}

impl Encoder {
    pub fn new(scope: Scope, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.levels());
        let mut in_ch = 3;
        for l in 0..cfg.levels() {
            let s = scope.pp(format!("stage{l}"));
            let factor = if l == 0 {
                cfg.strides[0]
            } else {
                cfg.strides[l] / cfg.strides[l - 1]
            };
            let c = cfg.channels[l];
            let last = l + 1 == cfg.levels();
            let blocks = (0..cfg.depths[l])
                .map(|i| {
                    let b = s.pp(format!("block{i}"));
                    Ok(if last {
                        Block::Attn(AttnBlock {
                            norm1: LayerNorm::new(b.pp("norm1"), c)?,
                            attn: Attention::new(b.pp("attn"), c, cfg.heads)?,
                            norm2: LayerNorm::new(b.pp("norm2"), c)?,
                            mlp: Mlp::new(b.pp("mlp"), c, 2 * c, c)?,
                        })
                    } else {
                        Block::Conv(ConvBlock {
                            norm: LayerNorm::new(b.pp("norm"), c)?,
                            conv: Conv2d::new(b.pp("conv"), c, c, 3)?,
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                factor,
                embed: Linear::new(s.pp("embed"), factor * factor * in_ch, c)?,
                norm: LayerNorm::new(s.pp("norm"), c)?,
                blocks,
            });
            in_ch = c;
        }
        let global_proj = Linear::new(scope.pp("global"), in_ch, cfg.global_channels)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            global_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Run the encoder on a `(B, H, W, 3)` image batch.
    pub fn forward(&self, image: &Tensor, ctx: &ForwardCtx) -> Result<Backbone> {
        let (_, h, w, c) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        let mut x = image.clone();
        let mut feats = Vec::with_capacity(self.stages.len());
        for (l, stage) in self.stages.iter().enumerate() {
            x = stage
                .norm
                .forward(&stage.embed.forward(&space_to_depth(&x, stage.factor)?)?)?;
            for block in &stage.blocks {
                x = match block {
                    Block::Conv(b) => b.forward(&x)?,
                    Block::Attn(b) => b.forward(&x, ctx)?,
                };
            }
            feats.push(FeatureMap::new(x.clone(), l)?);
        }
        let global = FeatureMap::new(self.global_proj.forward(&x)?, self.stages.len() - 1)?;
        Ok(Backbone {
            stages: feats,
            global,
            input_size: (h, w),
        })
    }

    /// The global feature `F_g` alone.
    pub fn encode_global(&self, image: &Tensor, ctx: &ForwardCtx) -> Result<FeatureMap> {
        Ok(self.forward(image, ctx)?.global)
    }
}

/// Top-down pathway with lateral connections from every encoder stage,
/// seeded by the global feature.
#[derive(Debug, Clone)]
pub struct PixelDecoder {
    cfg: EncoderConfig,
    global_in: Linear,
    laterals: Vec<Linear>,
    top_down: Vec<Linear>,
    refine: Vec<(LayerNorm, Conv2d)>,
}

impl PixelDecoder {
    pub fn new(scope: Scope, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let last = levels - 1;
        let mut laterals = Vec::with_capacity(levels);
        let mut top_down = Vec::with_capacity(levels.saturating_sub(1));
        let mut refine = Vec::with_capacity(levels);
        for l in 0..levels {
            let s = scope.pp(format!("level{l}"));
            let c = cfg.channels[l];
            laterals.push(Linear::new(s.pp("lateral"), c, c)?);
            if l < last {
                top_down.push(Linear::no_bias(s.pp("top_down"), cfg.channels[l + 1], c)?);
            }
            // The finest level is the most expensive; it gets a pointwise refine.
            let k = if l == 0 && levels > 1 { 1 } else { 3 };
            refine.push((LayerNorm::new(s.pp("norm"), c)?, Conv2d::new(s.pp("refine"), c, c, k)?));
        }
        Ok(Self {
            cfg: cfg.clone(),
            global_in: Linear::no_bias(scope.pp("global_in"), cfg.global_channels, cfg.channels[last])?,
            laterals,
            top_down,
            refine,
        })
    }

    pub fn forward(&self, backbone: &Backbone) -> Result<FeaturePyramid> {
        let levels = self.cfg.levels();
        if backbone.stages.len() != levels {
            return Err(Error::shape(format!(
                "pixel decoder configured for {levels} levels, backbone has {}",
                backbone.stages.len()
            )));
        }
        if backbone.global.channels() != self.cfg.global_channels {
            return Err(Error::shape(format!(
                "global feature has {} channels, config says {}",
                backbone.global.channels(),
                self.cfg.global_channels
            )));
        }
        for (l, f) in backbone.stages.iter().enumerate() {
            if f.channels() != self.cfg.channels[l] {
                return Err(Error::shape(format!(
                    "stage {l} has {} channels, config says {}",
                    f.channels(),
                    self.cfg.channels[l]
                )));
            }
        }
        let mut out: Vec<Option<FeatureMap>> = vec![None; levels];
        let mut prev: Option<Tensor> = None;
        for l in (0..levels).rev() {
            let stage = &backbone.stages[l];
            let mut p = self.laterals[l].forward(&stage.data)?;
            match &prev {
                None => p = (p + self.global_in.forward(&backbone.global.data)?)?,
                Some(up) => {
                    let up = self.top_down[l].forward(up)?;
                    p = (p + resize_bilinear(&up, stage.height(), stage.width())?)?;
                }
            }
            let (norm, conv) = &self.refine[l];
            let p = (&p + gelu(&conv.forward(&norm.forward(&p)?)?)?)?;
            prev = Some(p.clone());
            out[l] = Some(FeatureMap::new(p, l)?);
        }
        FeaturePyramid::new(out.into_iter().map(|f| f.expect("filled")).collect())
    }
}
