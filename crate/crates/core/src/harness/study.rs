//! Paired training runs with and without the co-occurrence loss on
//! synthetic data, scored on a held-out synthetic set.

use std::time::Instant;

use serde::Serialize;

use super::eval::{illusion_tau, predict_samples, score};
use super::train::Trainer;
use crate::config::Config;
use crate::data::{self, synth_samples, Crop, SynthSpec};
use crate::domain::{labels_to_masks, ImageSample, MaskSet};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

#[derive(Debug, Clone)]
pub struct StudySpec {
    pub base: Config,
    pub train: SynthSpec,
    pub heldout: SynthSpec,
    pub seeds: Vec<u64>,
    /// Also score the held-out set every this many iterations (0 = only at the end).
    pub eval_every: usize,
}

impl StudySpec {
    /// 2000 training and 500 held-out scenes from disjoint generator seeds,
    /// three training seeds.
    pub fn desk() -> Self {
        let base = Config::desk();
        let size = base.model.input_size;
        Self {
            base,
            train: SynthSpec {
                seed: 1,
                count: 2000,
                size,
                ..Default::default()
            },
            heldout: SynthSpec {
                seed: 2,
                count: 500,
                size,
                ..Default::default()
            },
            seeds: vec![0, 1, 2],
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub miou: f64,
    pub illusion_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyRun {
    pub seed: u64,
    pub coco: bool,
    pub seconds: f64,
    pub final_loss: f64,
    pub curve: Vec<CurvePoint>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub runs: Vec<StudyRun>,
    pub seconds: f64,
}

impl StudyResult {
    pub fn run(&self, seed: u64, coco: bool) -> Option<&StudyRun> {
        self.runs.iter().find(|r| r.seed == seed && r.coco == coco)
    }

    /// Seeds where the run with the co-occurrence loss has an illusion rate no
    /// higher than the run without it.
    pub fn seeds_not_worse(&self) -> usize {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter(|&s| match (self.run(s, true), self.run(s, false)) {
                (Some(a), Some(b)) => a.report.illusion_rate <= b.report.illusion_rate,
                _ => false,
            })
            .count()
    }

    pub fn min_miou(&self) -> f64 {
        self.runs.iter().map(|r| r.report.miou.unwrap_or(0.0)).fold(f64::INFINITY, f64::min)
    }
}

fn heldout_samples(cfg: &Config, spec: &SynthSpec) -> Result<Vec<ImageSample>> {
    let (raw, _) = synth_samples(spec)?;
    let size = cfg.model.input_size;
    raw.iter()
        .map(|r| {
            let crop = Crop::center(r.labels.nrows(), r.labels.ncols(), size)?;
            data::prepare(r, crop, false, &cfg.data.mean, &cfg.data.std)
        })
        .collect()
}

fn score_model(trainer: &Trainer, samples: &[ImageSample], truth: &[MaskSet], name: &str) -> Result<MetricReport> {
    let cfg = trainer.config();
    let preds = predict_samples(trainer.model(), cfg, samples)?
        .iter()
        .map(|(l, _)| labels_to_masks(l))
        .collect::<Result<Vec<_>>>()?;
    let mut report = score(&preds, truth, illusion_tau(cfg), name)?;
    report.parameter_count = Some(trainer.store().num_parameters());
    report.config = cfg.to_map();
    Ok(report)
}

/// Train every `(seed, with/without co-occurrence loss)` pair for
/// `base.train.max_iterations` iterations. Nothing is written to disk.
pub fn run_study(spec: &StudySpec) -> Result<StudyResult> {
    if spec.seeds.is_empty() {
        return Err(Error::validation("study needs at least one seed"));
    }
    let start = Instant::now();
    let (train, _) = synth_samples(&spec.train)?;
    let heldout = heldout_samples(&spec.base, &spec.heldout)?;
    let truth: Vec<MaskSet> = heldout.iter().map(|s| s.masks()).collect();
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        for coco in [true, false] {
            let mut cfg = spec.base.clone();
            cfg.train.seed = seed;
            if !coco {
                cfg.loss.weights.lambda_co = 0.0;
            }
            let name = format!("seed{seed}-{}", if coco { "coco" } else { "no-coco" });
            let t0 = Instant::now();
            let mut trainer = Trainer::new(&cfg)?;
            let mut curve = Vec::new();
            let mut last = f64::NAN;
            while trainer.iteration() < cfg.train.max_iterations {
                let r = trainer.step(&train)?;
                last = r.total;
                if r.iteration % cfg.train.log_every.max(1) == 0 {
                    log::info!("{name} iter {} loss {:.4} ({})", r.iteration, r.total, r.components);
                }
                if spec.eval_every > 0
                    && r.iteration % spec.eval_every == 0
                    && r.iteration < cfg.train.max_iterations
                {
                    let rep = score_model(&trainer, &heldout, &truth, &name)?;
                    log::info!("{name} iter {} miou {:.4} illusion {:.4}", r.iteration, rep.miou.unwrap_or(0.0), rep.illusion_rate);
                    curve.push(CurvePoint {
                        iteration: r.iteration,
                        miou: rep.miou.unwrap_or(0.0),
                        illusion_rate: rep.illusion_rate,
                    });
                }
            }
            let report = score_model(&trainer, &heldout, &truth, &name)?;
            curve.push(CurvePoint {
                iteration: trainer.iteration(),
                miou: report.miou.unwrap_or(0.0),
                illusion_rate: report.illusion_rate,
            });
            let seconds = t0.elapsed().as_secs_f64();
            log::info!("{name} miou {:.4} illusion {:.4} in {seconds:.0}s", report.miou.unwrap_or(0.0), report.illusion_rate);
            runs.push(StudyRun {
                seed,
                coco,
                seconds,
                final_loss: last,
                curve,
                report,
            });
        }
    }
    Ok(StudyResult {
        runs,
        seconds: start.elapsed().as_secs_f64(),
    })
}
