//! Versioned checkpoints: parameter and optimizer blobs, metadata and a
//! plain-text config echo.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const PARAMS: &str = "params.safetensors";
const OPTIM: &str = "optimizer.safetensors";
const META: &str = "meta.json";
const CONFIG: &str = "config.conf";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub components: crate::losses::LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: usize,
    pub optimizer_step: usize,
    pub parameter_count: usize,
    pub history: Vec<LogRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: Config,
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        candle_core::safetensors::save(&self.params, dir.join(PARAMS))?;
        candle_core::safetensors::save(&self.optimizer, dir.join(OPTIM))?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join(META), meta).map_err(|e| Error::io(dir.join(META), e))?;
        std::fs::write(dir.join(CONFIG), self.config.to_file_string())
            .map_err(|e| Error::io(dir.join(CONFIG), e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let config = Config::from_file(&dir.join(CONFIG))?;
        let read = |name: &str| -> Result<HashMap<String, Tensor>> {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::io(&path, std::io::ErrorKind::NotFound.into()));
            }
            Ok(candle_core::safetensors::load(&path, &Device::Cpu)?)
        };
        Ok(Self {
            params: read(PARAMS)?,
            optimizer: read(OPTIM)?,
            meta,
            config,
        })
    }

    /// Error unless `cfg` describes the same network as the checkpoint.
    pub fn check_compatible(&self, cfg: &Config) -> Result<()> {
        let ours = self.config.to_map();
        for (k, v) in cfg.to_map() {
            let model_key = ["model.", "encoder.", "ipp.", "dqg.", "decoder."]
                .iter()
                .any(|p| k.starts_with(p))
                && k != "decoder.dropout";
            if model_key && ours.get(&k) != Some(&v) {
                return Err(Error::Version(format!(
                    "{k} = {v} does not match checkpoint value {}",
                    ours.get(&k).map_or("<missing>", String::as_str)
                )));
            }
        }
        Ok(())
    }
}
