//! Evaluation and single-image prediction.

use std::path::{Path, PathBuf};

use candle_core::Device;
use image::GrayImage;

use super::checkpoint::Checkpoint;
use super::train::TRAIN_DTYPE;
use crate::config::Config;
use crate::data::{self, Crop, DatasetSpec, RawSample};
use crate::domain::{batch_pixels, labels_to_masks, BoundaryMap, ImageSample, LabelMap, MaskSet};
use crate::error::{Error, Result};
use crate::metrics::{scaled_presence_tau, MetricAccumulator, MetricReport};
use crate::model::{boundary_maps, predict_labels, InterFormer};
use crate::nn::{ForwardCtx, ParamStore};

/// A network restored from a checkpoint.
pub struct LoadedModel {
    pub store: ParamStore,
    pub model: InterFormer,
    pub config: Config,
}

/// Rebuild the network described by `cfg` and load checkpoint weights into
/// it; a checkpoint trained with different architecture settings is a
/// version error.
pub fn load_model(cfg: &Config, dir: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(dir)?;
    ck.check_compatible(cfg)?;
    let store = ParamStore::new(0, TRAIN_DTYPE, Device::Cpu);
    let model = InterFormer::new(store.root(), &cfg.model)?;
    store.load(&ck.params)?;
    Ok(LoadedModel {
        store,
        model,
        config: cfg.clone(),
    })
}

pub fn illusion_tau(cfg: &Config) -> usize {
    cfg.eval.illusion_tau.unwrap_or_else(|| {
        let s = cfg.model.input_size;
        scaled_presence_tau(cfg.loss.weights.tau, s, s)
    })
}

/// Predicted label maps and boundary probabilities for samples, in order.
pub fn predict_samples(model: &InterFormer, cfg: &Config, samples: &[ImageSample]) -> Result<Vec<(LabelMap, BoundaryMap)>> {
    let mut out = Vec::with_capacity(samples.len());
    let ctx = ForwardCtx::eval();
    for chunk in samples.chunks(cfg.eval.batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let x = batch_pixels(&refs, TRAIN_DTYPE, &Device::Cpu)?;
        let o = model.forward(&x, &ctx)?;
        let labels = predict_labels(&o.composed, cfg.eval.mask_threshold)?;
        let maps = boundary_maps(&o.ipp.boundary)?;
        for ((l, b), s) in labels.into_iter().zip(maps).zip(chunk) {
            let map = ndarray::Array2::from_shape_vec((s.height(), s.width()), b.into_iter().map(|v| v as f32).collect())
                .map_err(|e| Error::shape(e.to_string()))?;
            out.push((l, BoundaryMap::probability(map)?));
        }
    }
    Ok(out)
}

/// Metrics of predictions against ground truth.
pub fn score(predictions: &[MaskSet], truth: &[MaskSet], tau: usize, name: &str) -> Result<MetricReport> {
    if predictions.len() != truth.len() {
        return Err(Error::validation("prediction and ground-truth counts differ"));
    }
    let mut acc = MetricAccumulator::new(tau);
    for (p, g) in predictions.iter().zip(truth) {
        acc.add(p, g)?;
    }
    acc.finish(name)
}

/// Evaluate a model on prepared samples; optionally export index images.
pub fn evaluate_samples(
    loaded: &LoadedModel,
    samples: &[ImageSample],
    name: &str,
    export: Option<&Path>,
) -> Result<MetricReport> {
    let cfg = &loaded.config;
    let preds = predict_samples(&loaded.model, cfg, samples)?;
    if let Some(dir) = export {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ((labels, _), s) in preds.iter().zip(samples) {
            data::write_labels(&dir.join(format!("{}.png", s.id)), labels)?;
        }
    }
    let pred_masks = preds
        .iter()
        .map(|(l, _)| labels_to_masks(l))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<MaskSet> = samples.iter().map(|s| s.masks()).collect();
    let mut report = score(&pred_masks, &truth, illusion_tau(cfg), name)?;
    report.parameter_count = Some(loaded.store.num_parameters());
    report.config = cfg.to_map();
    Ok(report)
}

pub fn load_eval_data(cfg: &Config) -> Result<Vec<ImageSample>> {
    let split = cfg.data.eval_split.parse()?;
    let mut spec = DatasetSpec::new(&cfg.data.root, split, cfg.model.input_size);
    spec.mean = cfg.data.mean;
    spec.std = cfg.data.std;
    data::load_dataset(&spec)
}

pub fn evaluate(cfg: &Config, checkpoint: &Path, name: &str, export: Option<&Path>) -> Result<MetricReport> {
    let loaded = load_model(cfg, checkpoint)?;
    let samples = load_eval_data(cfg)?;
    evaluate_samples(&loaded, &samples, name, export)
}

/// Write `<stem>_labels.png` (index image) and `<stem>_boundary.png`
/// (probability × 255) for one image file. Returns both paths.
pub fn predict_file(loaded: &LoadedModel, image: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let cfg = &loaded.config;
    let rgb = image::open(image)
        .map_err(|source| Error::Image {
            path: image.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    let raw = RawSample {
        id: image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
        image: rgb,
        labels: LabelMap::zeros((h, w)),
    };
    let size = cfg.model.input_size;
    let sample = data::prepare(&raw, Crop::center(h, w, size)?, false, &cfg.data.mean, &cfg.data.std)?;
    let (labels, boundary) = predict_samples(&loaded.model, cfg, std::slice::from_ref(&sample))?
        .pop()
        .expect("one prediction per sample");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let label_path = out_dir.join(format!("{}_labels.png", sample.id));
    data::write_labels(&label_path, &labels)?;
    let boundary_path = out_dir.join(format!("{}_boundary.png", sample.id));
    let px: Vec<u8> = boundary.map.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(size as u32, size as u32, px)
        .ok_or_else(|| Error::shape("boundary buffer size"))?
        .save(&boundary_path)
        .map_err(|source| Error::Image {
            path: boundary_path.clone(),
            source,
        })?;
    Ok((label_path, boundary_path))
}
