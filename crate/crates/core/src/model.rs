//! The assembled network: encoder and pixel decoder, interaction prior
//! predictor, dynamic queries and the interaction decoder.

use candle_core::{Tensor, D};

use crate::decoder::{compose_masks, DecoderConfig, InteractionDecoder, SegmentationOutput};
use crate::domain::{LabelMap, MaskSet, BACKGROUND, NUM_CLASSES};
use crate::dqg::{DqgConfig, DynamicQueryGenerator, QuerySet};
use crate::encoder::{Backbone, Encoder, EncoderConfig, PixelDecoder};
use crate::error::{Error, Result};
use crate::ipp::{InteractionPriorPredictor, IppConfig, IppOutput};
use crate::nn::{to_vec_f64, ForwardCtx, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder: EncoderConfig,
    pub ipp: IppConfig,
    pub dqg: DqgConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder: EncoderConfig::default(),
            ipp: IppConfig::default(),
            dqg: DqgConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.check_input(self.input_size, self.input_size)?;
        self.decoder.validate()?;
        if self.ipp.channels.len() != self.encoder.levels() {
            return Err(Error::Config("ipp.channels must have one entry per encoder level".into()));
        }
        let last = self.encoder.levels() - 1;
        let (h, w) = self.encoder.level_size(last, self.input_size, self.input_size);
        let n = self.dqg.n_partition;
        if n == 0 || h % n != 0 || w % n != 0 {
            return Err(Error::Config(format!(
                "dqg.n_partition {n} must divide the {h}×{w} coarsest level"
            )));
        }
        if self.dqg.num_queries == 0 || self.dqg.num_queries > h * w {
            return Err(Error::Config(format!(
                "dqg.num_queries {} must lie in 1..={}",
                self.dqg.num_queries,
                h * w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub backbone: Backbone,
    pub ipp: IppOutput,
    pub queries: QuerySet,
    pub segmentation: SegmentationOutput,
    /// `(B, K, H, W)` composed per-class masks in `[0, 1]`.
    pub composed: Tensor,
}

#[derive(Debug, Clone)]
pub struct InterFormer {
    cfg: ModelConfig,
    encoder: Encoder,
    pixel_decoder: PixelDecoder,
    ipp: InteractionPriorPredictor,
    dqg: DynamicQueryGenerator,
    decoder: InteractionDecoder,
}

impl InterFormer {
    pub fn new(scope: Scope, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = &cfg.encoder;
        let levels = enc.levels();
        let sizes: Vec<(usize, usize)> = (0..levels)
            .map(|l| enc.level_size(l, cfg.input_size, cfg.input_size))
            .collect();
        let encoder = Encoder::new(scope.pp("encoder"), enc)?;
        let pixel_decoder = PixelDecoder::new(scope.pp("pixel_decoder"), enc)?;
        let ipp = InteractionPriorPredictor::new(scope.pp("ipp"), enc, &cfg.ipp)?;
        let dqg = DynamicQueryGenerator::new(
            scope.pp("dqg"),
            &cfg.dqg,
            cfg.ipp.channels[levels - 1],
            enc.channels[levels - 1],
        )?;
        let decoder = InteractionDecoder::new(
            scope.pp("decoder"),
            &cfg.decoder,
            enc.channels[levels - 1],
            &sizes,
            &enc.channels,
            &cfg.ipp.channels,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            pixel_decoder,
            ipp,
            dqg,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dqg(&self) -> &DynamicQueryGenerator {
        &self.dqg
    }

    /// Full forward pass on a `(B, H, W, 3)` normalized batch.
    pub fn forward(&self, image: &Tensor, ctx: &ForwardCtx) -> Result<ModelOutput> {
        let (_, h, w, _) = image.dims4()?;
        let backbone = self.encoder.forward(image, ctx)?;
        let pixels = self.pixel_decoder.forward(&backbone)?;
        let ipp = self.ipp.forward(&backbone)?;
        let queries = self.dqg.forward(pixels.coarsest(), ipp.features.coarsest())?;
        let segmentation = self.decoder.forward(&queries.fused, &pixels, &ipp.features, (h, w), ctx)?;
        let composed = compose_masks(&segmentation)?;
        Ok(ModelOutput {
            backbone,
            ipp,
            queries,
            segmentation,
            composed,
        })
    }
}

/// Per-pixel argmax over composed masks; background where no class exceeds
/// `threshold`.
pub fn predict_labels(composed: &Tensor, threshold: f64) -> Result<Vec<LabelMap>> {
    let (b, k, h, w) = composed.dims4()?;
    if k != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} planes, got {k}")));
    }
    let v = to_vec_f64(composed)?;
    let mut out = Vec::with_capacity(b);
    for img in v.chunks(k * h * w) {
        out.push(LabelMap::from_shape_fn((h, w), |(y, x)| {
            let p = y * w + x;
            let (best, score) = (0..k)
                .map(|c| (c, img[c * h * w + p]))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if score > threshold {
                best as u8 + 1
            } else {
                BACKGROUND
            }
        }));
    }
    Ok(out)
}

/// Predicted mask sets, one per batch element.
pub fn predict_masks(composed: &Tensor, threshold: f64) -> Result<Vec<MaskSet>> {
    predict_labels(composed, threshold)?
        .iter()
        .map(crate::domain::labels_to_masks)
        .collect()
}

/// `(B, H, W)` boundary probabilities as plain vectors.
pub fn boundary_maps(boundary: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, h, w) = boundary.dims3()?;
    let v = to_vec_f64(&boundary.reshape((b, h * w))?)?;
    Ok(v.chunks(h * w).map(<[f64]>::to_vec).collect())
}

/// Per-query class index with the highest score (`K` = no-object).
pub fn query_classes(class_scores: &Tensor) -> Result<Vec<Vec<u32>>> {
    let idx = class_scores.argmax(D::Minus1)?;
    Ok(idx.to_vec2::<u32>()?)
}
