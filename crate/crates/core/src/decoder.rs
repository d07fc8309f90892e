//! Dual-context feature selector, the query-refining transformer decoder and
//! the class/mask prediction heads.

use candle_core::{Tensor, D};

use crate::domain::{FeatureMap, FeaturePyramid, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{
    attention, avg_pool, resize_bilinear, sigmoid, softmax_last_dim, Attention, ForwardCtx,
    LayerNorm, Linear, Mlp, Scope,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Upper bound on the DFS token grid side; finer levels are mean-pooled
    /// down to it.
    pub dfs_grid: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 32,
            heads: 4,
            ffn_dim: 64,
            dropout: 0.1,
            dfs_grid: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.ffn_dim == 0 || self.dfs_grid == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token grid for a level: the level itself, or the largest pooled grid no
/// larger than `cap` whose factor divides both sides evenly.
fn grid_for(h: usize, w: usize, cap: usize) -> (usize, usize, usize) {
    let mut k = 1;
    while h / k > cap || w / k > cap || h % k != 0 || w % k != 0 {
        k += 1;
        if k > h.max(w) {
            return (1, 1, h.max(w));
        }
    }
    (h / k, w / k, k)
}

/// Fuses one pixel-feature level with its boundary-guided counterpart.
///
/// Keys and values come from the pixel tokens plus a learned positional
/// table, queries from the normalized boundary tokens. The cross-attention
/// result is refined by self-attention and added back onto the pixel tokens.
#[derive(Debug, Clone)]
pub struct DualContextSelector {
    pool: usize,
    tokens: usize,
    dim: usize,
    dropout: f64,
    pix_proj: Linear,
    int_proj: Linear,
    pos: Tensor,
    norm_query: LayerNorm,
    query_conv: Linear,
    key_conv: Linear,
    value_conv: Linear,
    norm_cross: LayerNorm,
    self_attn: Attention,
    norm_out: LayerNorm,
}

impl DualContextSelector {
    /// `size` is the level's `(H, W)`; `pix_ch`/`int_ch` the input widths.
    pub fn new(
        scope: Scope,
        cfg: &DecoderConfig,
        size: (usize, usize),
        pix_ch: usize,
        int_ch: usize,
    ) -> Result<Self> {
        let (gh, gw, pool) = grid_for(size.0, size.1, cfg.dfs_grid);
        let dim = cfg.dim;
        Ok(Self {
            pool,
            tokens: gh * gw,
            dim,
            dropout: cfg.dropout,
            pix_proj: Linear::new(scope.pp("pix_proj"), pix_ch, dim)?,
            int_proj: Linear::new(scope.pp("int_proj"), int_ch, dim)?,
            pos: scope.normal("pos", &[gh * gw, dim], 0.02)?,
            norm_query: LayerNorm::new(scope.pp("norm_query"), dim)?,
            query_conv: Linear::new(scope.pp("query_conv"), dim, dim)?,
            key_conv: Linear::new(scope.pp("key_conv"), dim, dim)?,
            value_conv: Linear::new(scope.pp("value_conv"), dim, dim)?,
            norm_cross: LayerNorm::new(scope.pp("norm_cross"), dim)?,
            self_attn: Attention::new(scope.pp("self_attn"), dim, cfg.heads)?,
            norm_out: LayerNorm::new(scope.pp("norm_out"), dim)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn pos_param(&self) -> &Tensor {
        &self.pos
    }

    fn flatten(&self, f: &FeatureMap, proj: &Linear) -> Result<Tensor> {
        let pooled = avg_pool(&f.data, self.pool)?;
        let (b, h, w, c) = pooled.dims4()?;
        if h * w != self.tokens {
            return Err(Error::shape(format!(
                "DFS expects {} tokens, level {} pools to {h}×{w}",
                self.tokens, f.level
            )));
        }
        proj.forward(&pooled.reshape((b, h * w, c))?)
    }

    /// `(B, h·w, dim)` fused tokens for one level.
    pub fn forward(&self, f_pix: &FeatureMap, f_int: &FeatureMap, ctx: &ForwardCtx) -> Result<Tensor> {
        if (f_pix.height(), f_pix.width()) != (f_int.height(), f_int.width()) {
            return Err(Error::shape(format!(
                "pixel level {}×{} and boundary level {}×{} differ",
                f_pix.height(),
                f_pix.width(),
                f_int.height(),
                f_int.width()
            )));
        }
        let pix = self.flatten(f_pix, &self.pix_proj)?;
        let int = self.flatten(f_int, &self.int_proj)?;
        let kv_in = pix.broadcast_add(&self.pos)?;
        let key = self.key_conv.forward(&kv_in)?;
        let value = self.value_conv.forward(&kv_in)?;
        let query = self.query_conv.forward(&self.norm_query.forward(&int)?)?;
        let cross = attention(&query, &key, &value, ctx)?;
        let cross = self.norm_cross.forward(&ctx.dropout(&cross, self.dropout)?)?;
        let refined = self.self_attn.forward(&cross, &cross, &cross, ctx)?;
        Ok((pix + self.norm_out.forward(&(refined + cross)?)?)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Pre-norm decoder block: cross-attention into the fused tokens, query
/// self-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    dropout: f64,
    norm_cross: LayerNorm,
    cross: Attention,
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

impl DecoderLayer {
    pub fn new(scope: Scope, cfg: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            dropout: cfg.dropout,
            norm_cross: LayerNorm::new(scope.pp("norm_cross"), cfg.dim)?,
            cross: Attention::new(scope.pp("cross"), cfg.dim, cfg.heads)?,
            norm_self: LayerNorm::new(scope.pp("norm_self"), cfg.dim)?,
            self_attn: Attention::new(scope.pp("self_attn"), cfg.dim, cfg.heads)?,
            norm_ffn: LayerNorm::new(scope.pp("norm_ffn"), cfg.dim)?,
            ffn: Mlp::new(scope.pp("ffn"), cfg.dim, cfg.ffn_dim, cfg.dim)?,
        })
    }

    pub fn forward(&self, queries: &Tensor, memory: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (_, _, d) = queries.dims3()?;
        let (_, _, md) = memory.dims3()?;
        if d != md {
            return Err(Error::shape(format!("query width {d} vs memory width {md}")));
        }
        let n = self.norm_cross.forward(queries)?;
        let q = (queries + ctx.dropout(&self.cross.forward(&n, memory, memory, ctx)?, self.dropout)?)?;
        let n = self.norm_self.forward(&q)?;
        let q = (&q + ctx.dropout(&self.self_attn.forward(&n, &n, &n, ctx)?, self.dropout)?)?;
        let n = self.norm_ffn.forward(&q)?;
        Ok((&q + ctx.dropout(&self.ffn.forward(&n)?, self.dropout)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    /// `(B, N, K+1)` pre-softmax class logits.
    pub class_logits: Tensor,
    /// `(B, N, K+1)` class distribution per query; last column is no-object.
    pub class_scores: Tensor,
    /// `(B, N, H, W)` class-agnostic mask logits at output resolution.
    pub mask_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct PredictionHeads {
    norm: LayerNorm,
    class_head: Linear,
    mask_embed: Mlp,
    mask_feature: Linear,
}

impl PredictionHeads {
    pub fn new(scope: Scope, dim: usize, mask_channels: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(scope.pp("norm"), dim)?,
            class_head: Linear::new(scope.pp("class"), dim, NUM_CLASSES + 1)?,
            mask_embed: Mlp::new(scope.pp("mask_embed"), dim, dim, dim)?,
            mask_feature: Linear::new(scope.pp("mask_feature"), mask_channels, dim)?,
        })
    }

    /// Class distribution per query and per-query mask logits, the latter
    /// being inner products of the embedded query with every position of the
    /// projected mask feature, resized to `out_size`.
    pub fn forward(
        &self,
        queries: &Tensor,
        mask_feature: &FeatureMap,
        out_size: (usize, usize),
    ) -> Result<SegmentationOutput> {
        let q = self.norm.forward(queries)?;
        let class_logits = self.class_head.forward(&q)?;
        let class_scores = softmax_last_dim(&class_logits)?;
        let embed = self.mask_embed.forward(&q)?;
        let (b, n, _) = embed.dims3()?;
        let feat = self.mask_feature.forward(&mask_feature.data)?;
        let (fb, h, w, d) = feat.dims4()?;
        if fb != b {
            return Err(Error::shape(format!("{b} query sets vs {fb} mask features")));
        }
        let feat = feat.reshape((b, h * w, d))?.transpose(1, 2)?.contiguous()?;
        let logits = embed.contiguous()?.matmul(&feat)?.reshape((b, n, h, w))?;
        let mask_logits = if (h, w) == out_size {
            logits
        } else {
            resize_bilinear(&logits.permute((0, 2, 3, 1))?, out_size.0, out_size.1)?
                .permute((0, 3, 1, 2))?
                .contiguous()?
        };
        Ok(SegmentationOutput {
            class_logits,
            class_scores,
            mask_logits,
        })
    }
}

/// `M = C ⊗ M_C`: `(B, K, H, W)` with
/// `composed[k] = Σ_i class_scores[i][k] · σ(mask_logits[i])`, divided by
/// `max(1, Σ_i class_scores[i][k])` so values stay in `[0, 1]`.
pub fn compose_masks(out: &SegmentationOutput) -> Result<Tensor> {
    let (b, n, h, w) = out.mask_logits.dims4()?;
    let (sb, sn, sk) = out.class_scores.dims3()?;
    if (sb, sn) != (b, n) || sk != NUM_CLASSES + 1 {
        return Err(Error::shape(format!(
            "class scores {:?} vs mask logits {:?}",
            out.class_scores.dims(),
            out.mask_logits.dims()
        )));
    }
    let weights = out
        .class_scores
        .narrow(D::Minus1, 0, NUM_CLASSES)?
        .transpose(1, 2)?
        .contiguous()?;
    let mass = weights.sum_keepdim(2)?.maximum(1.0)?;
    let probs = sigmoid(&out.mask_logits)?.reshape((b, n, h * w))?;
    Ok(weights
        .matmul(&probs)?
        .broadcast_div(&mass)?
        .reshape((b, NUM_CLASSES, h, w))?)
}

/// Query initialization → `layers` decoder blocks, each fed by its own DFS
/// over pyramid level `layer mod L` → prediction heads.
#[derive(Debug, Clone)]
pub struct InteractionDecoder {
    cfg: DecoderConfig,
    query_in: Option<Linear>,
    selectors: Vec<DualContextSelector>,
    layers: Vec<DecoderLayer>,
    heads: PredictionHeads,
}

impl InteractionDecoder {
    /// `level_sizes`, `pix_channels` and `int_channels` describe the pyramids
    /// for the configured input size, finest first.
    pub fn new(
        scope: Scope,
        cfg: &DecoderConfig,
        query_channels: usize,
        level_sizes: &[(usize, usize)],
        pix_channels: &[usize],
        int_channels: &[usize],
    ) -> Result<Self> {
        cfg.validate()?;
        let levels = level_sizes.len();
        if levels == 0 || pix_channels.len() != levels || int_channels.len() != levels {
            return Err(Error::Config("decoder level descriptions disagree".into()));
        }
        let query_in = if query_channels != cfg.dim {
            Some(Linear::new(scope.pp("query_in"), query_channels, cfg.dim)?)
        } else {
            None
        };
        let mut selectors = Vec::with_capacity(cfg.layers);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let l = i % levels;
            selectors.push(DualContextSelector::new(
                scope.pp(format!("dfs{i}")),
                cfg,
                level_sizes[l],
                pix_channels[l],
                int_channels[l],
            )?);
            layers.push(DecoderLayer::new(scope.pp(format!("layer{i}")), cfg)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            query_in,
            selectors,
            layers,
            heads: PredictionHeads::new(scope.pp("heads"), cfg.dim, pix_channels[0])?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn forward(
        &self,
        queries: &Tensor,
        pixels: &FeaturePyramid,
        boundary: &FeaturePyramid,
        out_size: (usize, usize),
        ctx: &ForwardCtx,
    ) -> Result<SegmentationOutput> {
        if pixels.len() != boundary.len() || pixels.is_empty() {
            return Err(Error::shape("pixel and boundary pyramids differ in depth"));
        }
        let mut q = match &self.query_in {
            Some(p) => p.forward(queries)?,
            None => queries.clone(),
        };
        for (i, (dfs, layer)) in self.selectors.iter().zip(&self.layers).enumerate() {
            let l = i % pixels.len();
            let memory = dfs.forward(&pixels.levels[l], &boundary.levels[l], ctx)?;
            q = layer.forward(&q, &memory, ctx)?;
        }
        self.heads.forward(&q, pixels.finest(), out_size)
    }
}
