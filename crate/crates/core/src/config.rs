//! Flat `key = value` configuration covering every module, with presets,
//! `--set` style overrides and environment overrides.
//!
//! Environment variables named `INTERFORMER_<SECTION>__<KEY>` override
//! `<section>.<key>` (case-insensitive), e.g. `INTERFORMER_TRAIN__SEED=3`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DEFAULT_MEAN, DEFAULT_STD};
use crate::decoder::DecoderConfig;
use crate::dqg::DqgConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ipp::IppConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;

pub const ENV_PREFIX: &str = "INTERFORMER_";

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub normalize_counts: bool,
    pub presence_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            normalize_counts: false,
            presence_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub batch_size: usize,
    pub warmup_iterations: usize,
    pub peak_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 180_000,
            batch_size: 8,
            warmup_iterations: 10_000,
            peak_lr: 1e-4,
            poly_power: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_every: 50,
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            eval_split: "test".into(),
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// `None` derives the threshold from `loss.tau` and the image area.
    pub illusion_tau: Option<usize>,
    pub mask_threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            illusion_tau: None,
            mask_threshold: 0.5,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three values")))
}

impl Config {
    /// Full-resolution training schedule and widths.
    pub fn full() -> Self {
        Self {
            model: ModelConfig {
                input_size: 448,
                encoder: EncoderConfig {
                    strides: vec![4, 8, 16],
                    channels: vec![96, 96, 96],
                    global_channels: 96,
                    depths: vec![2, 2, 2],
                    heads: 4,
                },
                ipp: IppConfig {
                    channels: vec![64, 96, 96],
                    head_channels: 32,
                    dilation_radius: 3,
                },
                dqg: DqgConfig {
                    n_partition: 4,
                    num_queries: 5,
                },
                decoder: DecoderConfig {
                    layers: 9,
                    dim: 256,
                    heads: 8,
                    ffn_dim: 1024,
                    dropout: 0.1,
                    dfs_grid: 16,
                },
            },
            ..Default::default()
        }
    }

    /// 64×64 synthetic-scale preset that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                max_iterations: 3000,
                batch_size: 8,
                warmup_iterations: 150,
                peak_lr: 1e-3,
                checkpoint_dir: PathBuf::from("runs/desk"),
                ..Default::default()
            },
            loss: LossConfig {
                normalize_counts: true,
                ..Default::default()
            },
            eval: EvalConfig {
                batch_size: 50,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let w = &mut self.loss.weights;
        let t = &mut self.train;
        match key {
            "model.input_size" => m.input_size = parse(key, value)?,
            "encoder.strides" => m.encoder.strides = parse_list(key, value)?,
            "encoder.channels" => m.encoder.channels = parse_list(key, value)?,
            "encoder.global_channels" => m.encoder.global_channels = parse(key, value)?,
            "encoder.depths" => m.encoder.depths = parse_list(key, value)?,
            "encoder.heads" => m.encoder.heads = parse(key, value)?,
            "ipp.channels" => m.ipp.channels = parse_list(key, value)?,
            "ipp.head_channels" => m.ipp.head_channels = parse(key, value)?,
            "ipp.dilation_radius" => m.ipp.dilation_radius = parse(key, value)?,
            "dqg.n_partition" => m.dqg.n_partition = parse(key, value)?,
            "dqg.num_queries" => m.dqg.num_queries = parse(key, value)?,
            "decoder.layers" => m.decoder.layers = parse(key, value)?,
            "decoder.dim" => m.decoder.dim = parse(key, value)?,
            "decoder.heads" => m.decoder.heads = parse(key, value)?,
            "decoder.ffn_dim" => m.decoder.ffn_dim = parse(key, value)?,
            "decoder.dropout" => m.decoder.dropout = parse(key, value)?,
            "decoder.dfs_grid" => m.decoder.dfs_grid = parse(key, value)?,
            "loss.tau" => w.tau = parse(key, value)?,
            "loss.lambda_b" => w.lambda_b = parse(key, value)?,
            "loss.lambda_co" => w.lambda_co = parse(key, value)?,
            "loss.lambda_cls" => w.lambda_cls = parse(key, value)?,
            "loss.lambda_dic" => w.lambda_dic = parse(key, value)?,
            "loss.lambda_ce" => w.lambda_ce = parse(key, value)?,
            "loss.normalize_counts" => self.loss.normalize_counts = parse(key, value)?,
            "loss.presence_threshold" => self.loss.presence_threshold = parse(key, value)?,
            "train.max_iterations" => t.max_iterations = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.warmup_iterations" => t.warmup_iterations = parse(key, value)?,
            "train.peak_lr" => t.peak_lr = parse(key, value)?,
            "train.poly_power" => t.poly_power = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.checkpoint_dir" => t.checkpoint_dir = PathBuf::from(value.trim()),
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.log_every" => t.log_every = parse(key, value)?,
            "train.flip" => t.flip = parse(key, value)?,
            "data.root" => self.data.root = PathBuf::from(value.trim()),
            "data.train_split" => self.data.train_split = value.trim().to_string(),
            "data.eval_split" => self.data.eval_split = value.trim().to_string(),
            "data.mean" => self.data.mean = parse_triple(key, value)?,
            "data.std" => self.data.std = parse_triple(key, value)?,
            "eval.illusion_tau" => {
                self.eval.illusion_tau = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "eval.mask_threshold" => self.eval.mask_threshold = parse(key, value)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let w = &self.loss.weights;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("model.input_size", m.input_size.to_string()),
            ("encoder.strides", list(&m.encoder.strides)),
            ("encoder.channels", list(&m.encoder.channels)),
            ("encoder.global_channels", m.encoder.global_channels.to_string()),
            ("encoder.depths", list(&m.encoder.depths)),
            ("encoder.heads", m.encoder.heads.to_string()),
            ("ipp.channels", list(&m.ipp.channels)),
            ("ipp.head_channels", m.ipp.head_channels.to_string()),
            ("ipp.dilation_radius", m.ipp.dilation_radius.to_string()),
            ("dqg.n_partition", m.dqg.n_partition.to_string()),
            ("dqg.num_queries", m.dqg.num_queries.to_string()),
            ("decoder.layers", m.decoder.layers.to_string()),
            ("decoder.dim", m.decoder.dim.to_string()),
            ("decoder.heads", m.decoder.heads.to_string()),
            ("decoder.ffn_dim", m.decoder.ffn_dim.to_string()),
            ("decoder.dropout", m.decoder.dropout.to_string()),
            ("decoder.dfs_grid", m.decoder.dfs_grid.to_string()),
            ("loss.tau", w.tau.to_string()),
            ("loss.lambda_b", w.lambda_b.to_string()),
            ("loss.lambda_co", w.lambda_co.to_string()),
            ("loss.lambda_cls", w.lambda_cls.to_string()),
            ("loss.lambda_dic", w.lambda_dic.to_string()),
            ("loss.lambda_ce", w.lambda_ce.to_string()),
            ("loss.normalize_counts", self.loss.normalize_counts.to_string()),
            ("loss.presence_threshold", self.loss.presence_threshold.to_string()),
            ("train.max_iterations", t.max_iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.warmup_iterations", t.warmup_iterations.to_string()),
            ("train.peak_lr", t.peak_lr.to_string()),
            ("train.poly_power", t.poly_power.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_dir", t.checkpoint_dir.display().to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.flip", t.flip.to_string()),
            ("data.root", self.data.root.display().to_string()),
            ("data.train_split", self.data.train_split.clone()),
            ("data.eval_split", self.data.eval_split.clone()),
            ("data.mean", list(&self.data.mean)),
            ("data.std", list(&self.data.std)),
            (
                "eval.illusion_tau",
                self.eval.illusion_tau.map_or("auto".into(), |v| v.to_string()),
            ),
            ("eval.mask_threshold", self.eval.mask_threshold.to_string()),
            ("eval.batch_size", self.eval.batch_size.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    /// Render as a config file that [`Config::parse_str`] reads back.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for (k, v) in self.to_pairs() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {s}\n"));
                section = s.to_string();
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Apply `key = value` lines on top of `self`. A `preset = <name>` line,
    /// if present, must come first and replaces everything.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                *self = Self::preset(v)?;
            } else {
                self.set(k, v)
                    .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// `KEY=VALUE` override as given on a command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Apply overrides from `(name, value)` environment pairs.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.set(&key, &value)
                    .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if t.warmup_iterations >= t.max_iterations {
            return Err(Error::Config(
                "train.warmup_iterations must be below train.max_iterations".into(),
            ));
        }
        if !(t.peak_lr > 0.0) || t.weight_decay < 0.0 || !(t.poly_power > 0.0) {
            return Err(Error::Config("learning-rate settings out of range".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.data.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("data.std must be positive".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}
