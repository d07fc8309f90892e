//! The optimization loop.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointMeta, LogRecord, FORMAT_VERSION};
use super::optim::{learning_rate, AdamW};
use crate::config::{Config, LossConfig};
use crate::data::{self, Crop, DatasetSpec, RawSample};
use crate::domain::{batch_pixels, ImageSample, MaskSet};
use crate::error::{Error, Result};
use crate::ipp::{boundary_gt, boundary_loss};
use crate::losses::{cls_loss, coco_loss_batch, matched_mask_losses, total_loss, LossComponents, Targets};
use crate::model::{InterFormer, ModelOutput};
use crate::nn::{scalar, ForwardCtx, ParamStore};

pub const TRAIN_DTYPE: DType = DType::F32;

/// Weighted objective as a differentiable scalar plus its unweighted parts.
pub fn objective(out: &ModelOutput, targets: &Targets, cfg: &LossConfig) -> Result<(Tensor, LossComponents)> {
    let w = &cfg.weights;
    let boundary = boundary_loss(&out.ipp.boundary, &targets.boundary)?;
    let coco = coco_loss_batch(&out.composed, w.tau, cfg.presence_threshold, cfg.normalize_counts)?;
    let cls = cls_loss(&out.segmentation.class_scores, &targets.query_classes)?;
    let (dice, ce) = matched_mask_losses(&out.segmentation.mask_logits, targets)?;
    let components = LossComponents {
        boundary: scalar(&boundary)?,
        coco: scalar(&coco)?,
        cls: scalar(&cls)?,
        dice: scalar(&dice)?,
        ce: scalar(&ce)?,
    };
    let total = ((((boundary * w.lambda_b)? + (coco * w.lambda_co)?)? + (cls * w.lambda_cls)?)?
        + ((dice * w.lambda_dic)? + (ce * w.lambda_ce)?)?)?;
    Ok((total, components))
}

/// Training targets for a batch of samples.
pub fn targets_for(samples: &[&ImageSample], cfg: &Config, dtype: DType, device: &Device) -> Result<Targets> {
    let radius = cfg.model.ipp.scaled_radius(cfg.model.input_size);
    let masks: Vec<MaskSet> = samples.iter().map(|s| s.masks()).collect();
    let boundary = masks
        .iter()
        .map(|m| boundary_gt(m, radius).to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MaskSet> = masks.iter().collect();
    Targets::new(&refs, &boundary, cfg.model.dqg.num_queries, dtype)
}

/// Independent stream per iteration, so a resumed run draws exactly what
/// the uninterrupted run would have.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

pub struct Trainer {
    cfg: Config,
    store: ParamStore,
    model: InterFormer,
    opt: AdamW,
    iteration: usize,
    history: Vec<LogRecord>,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.train.seed, TRAIN_DTYPE, Device::Cpu);
        let model = InterFormer::new(store.root(), &cfg.model)?;
        let opt = AdamW::new(store.vars(), &cfg.train)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            opt,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Continue from a checkpoint. Non-network settings (schedule length,
    /// output paths) come from `cfg`.
    pub fn resume(cfg: &Config, dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        ck.check_compatible(cfg)?;
        let mut t = Self::new(cfg)?;
        t.store.load(&ck.params)?;
        t.opt.load_state(&ck.optimizer, ck.meta.optimizer_step)?;
        t.iteration = ck.meta.iteration;
        t.history = ck.meta.history;
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn model(&self) -> &InterFormer {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    fn sample_batch(&self, data: &[RawSample], rng: &mut ChaCha8Rng) -> Result<Vec<ImageSample>> {
        let b = self.cfg.train.batch_size;
        let idx: Vec<usize> = if b <= data.len() {
            rand::seq::index::sample(rng, data.len(), b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..data.len())).collect()
        };
        let size = self.cfg.model.input_size;
        idx.iter()
            .map(|&i| {
                let raw = &data[i];
                let crop = Crop::random(raw.labels.nrows(), raw.labels.ncols(), size, rng)?;
                let flip = self.cfg.train.flip && rng.random::<bool>();
                data::prepare(raw, crop, flip, &self.cfg.data.mean, &self.cfg.data.std)
            })
            .collect()
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self, data: &[RawSample]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        let it = self.iteration + 1;
        let lr = learning_rate(&self.cfg.train, it);
        let mut rng = iteration_rng(self.cfg.train.seed, it);
        let batch = self.sample_batch(data, &mut rng)?;
        let refs: Vec<&ImageSample> = batch.iter().collect();
        let device = self.store.device().clone();
        let x = batch_pixels(&refs, TRAIN_DTYPE, &device)?;
        let targets = targets_for(&refs, &self.cfg, TRAIN_DTYPE, &device)?;
        let ctx = ForwardCtx::train(rng.random());
        let out = self.model.forward(&x, &ctx)?;
        let (loss, components) = objective(&out, &targets, &self.cfg.loss)?;
        let total = scalar(&loss)?;
        if !total.is_finite() || !components.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                lr,
                components: components.to_string(),
            });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads, lr)?;
        self.iteration = it;
        let record = LogRecord {
            iteration: it,
            lr,
            total,
            components,
        };
        debug_assert!((total_loss(&components, &self.cfg.loss.weights)? - total).abs() <= 1e-6 * total.abs().max(1.0));
        self.history.push(record);
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                iteration: self.iteration,
                optimizer_step: self.opt.step_count(),
                parameter_count: self.store.num_parameters(),
                history: self.history.clone(),
            },
            config: self.cfg.clone(),
            params: self.store.snapshot(),
            optimizer: self.opt.state(),
        }
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.cfg.train.checkpoint_dir.join(format!("iter-{iteration:07}"))
    }

    /// Train until `until` iterations have completed (capped at the
    /// configured maximum), writing periodic checkpoints and a final one.
    /// Returns the final checkpoint directory.
    pub fn run(&mut self, data: &[RawSample], until: usize) -> Result<PathBuf> {
        let until = until.min(self.cfg.train.max_iterations);
        let every = self.cfg.train.checkpoint_every;
        let log_every = self.cfg.train.log_every.max(1);
        while self.iteration < until {
            let r = self.step(data)?;
            if r.iteration % log_every == 0 || r.iteration == 1 {
                log::info!("iter {:>6} lr {:.3e} loss {:.4} ({})", r.iteration, r.lr, r.total, r.components);
            }
            if every > 0 && r.iteration % every == 0 && r.iteration < until {
                self.checkpoint().save(&self.checkpoint_path(r.iteration))?;
            }
        }
        let path = self.checkpoint_path(self.iteration);
        self.checkpoint().save(&path)?;
        Ok(path)
    }
}

/// Load the training split named by `cfg`.
pub fn load_training_data(cfg: &Config) -> Result<Vec<RawSample>> {
    let split = cfg.data.train_split.parse()?;
    let mut spec = DatasetSpec::new(&cfg.data.root, split, cfg.model.input_size);
    spec.mean = cfg.data.mean;
    spec.std = cfg.data.std;
    data::load_raw(&spec)
}

/// Train from scratch, or from `resume` if given, to `train.max_iterations`.
pub fn train(cfg: &Config, resume: Option<&Path>) -> Result<PathBuf> {
    let data = load_training_data(cfg)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg, dir)?,
        None => Trainer::new(cfg)?,
    };
    trainer.run(&data, cfg.train.max_iterations)
}
