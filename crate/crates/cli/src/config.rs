use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use openmix::analysis::CheckOptions;
use openmix::diffusion::{GenerationConfig, InversionScheme};
use openmix::trainer::TrainConfig;
use openmix::world::{DatasetSpec, MixtureWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random (x_0, y) pairs to check.
    pub pairs: usize,
    pub depth: usize,
    /// Steps of the full path the depth counts along.
    pub n_steps: usize,
    pub scheme: InversionScheme,
}

impl VerifyConfig {
    pub fn options(&self) -> CheckOptions {
        CheckOptions { n_steps: self.n_steps, scheme: self.scheme }
    }
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let o = CheckOptions::default();
        Self { pairs: 10, depth: 20, n_steps: o.n_steps, scheme: o.scheme }
    }
}

/// Everything one run needs. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// World description file; the built-in desk world when absent.
    pub world: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub generation: GenerationConfig,
    pub training: TrainConfig,
    pub verify: VerifyConfig,
    pub out: PathBuf,
    /// Overrides every per-stage `rng_seed` when set.
    pub seed: Option<u64>,
    /// Thread cap; all cores when absent.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: None,
            dataset: DatasetSpec::default(),
            generation: GenerationConfig::default(),
            training: TrainConfig::default(),
            verify: VerifyConfig::default(),
            out: PathBuf::from("openmix-run"),
            seed: None,
            workers: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; a relative world path is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let (Some(world), Some(dir)) = (&cfg.world, path.parent()) {
            if world.is_relative() {
                cfg.world = Some(dir.join(world));
            }
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>, workers: Option<usize>) {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.out = out;
        }
        if workers.is_some() {
            self.workers = workers;
        }
        if let Some(s) = self.seed {
            self.dataset.rng_seed = s;
            self.generation.rng_seed = s;
            self.training.rng_seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate().context("generation")?;
        self.training.validate().context("training")?;
        if self.workers == Some(0) {
            anyhow::bail!("workers: must be at least 1");
        }
        Ok(())
    }

    pub fn load_world(&self) -> Result<MixtureWorld> {
        match &self.world {
            Some(p) => MixtureWorld::load(p).with_context(|| format!("loading world {}", p.display())),
            None => Ok(MixtureWorld::desk()),
        }
    }
}
