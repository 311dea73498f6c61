use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::DType;
use rirest::{Pipeline, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const BRPE_FILE: &str = "brpe.safetensors";
pub const MODEL_FILE: &str = "model.safetensors";

pub(crate) const BRPE_PREFIX: &str = "brpe";
pub(crate) const MODEL_PREFIX: &str = "model";

/// A checkpoint directory: `config.json` plus one safetensors file per network.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
}

impl Checkpoint {
    pub fn open(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self::open(dir))
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join(CONFIG_FILE)
    }

    pub fn brpe_path(&self) -> PathBuf {
        self.dir.join(BRPE_FILE)
    }

    pub fn model_path(&self) -> PathBuf {
        self.dir.join(MODEL_FILE)
    }

    pub fn save_config(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        cfg.save(self.config_path())?;
        Ok(())
    }

    pub fn save_brpe(&self, p: &Pipeline) -> anyhow::Result<()> {
        p.brpe_store.save(self.brpe_path(), BRPE_PREFIX)?;
        Ok(())
    }

    pub fn save_model(&self, p: &Pipeline) -> anyhow::Result<()> {
        p.model_store.save(self.model_path(), MODEL_PREFIX)?;
        Ok(())
    }

    pub fn load_brpe(&self, p: &Pipeline) -> anyhow::Result<()> {
        let path = self.brpe_path();
        p.brpe_store
            .load(&path, BRPE_PREFIX)
            .with_context(|| format!("loading estimator weights from {}", path.display()))?;
        Ok(())
    }

    pub fn load_model(&self, p: &Pipeline) -> anyhow::Result<()> {
        let path = self.model_path();
        p.model_store
            .load(&path, MODEL_PREFIX)
            .with_context(|| format!("loading model weights from {}", path.display()))?;
        Ok(())
    }
}

pub(crate) fn build_pipeline(cfg: &RunConfig) -> anyhow::Result<Pipeline> {
    Ok(Pipeline::new(cfg.features.clone(), &cfg.brpe, &cfg.model, cfg.seed, DType::F32)?)
}
