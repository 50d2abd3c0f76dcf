//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ruas::io::{synthetic_dataset, Dataset, SplitDataset, SynthParams};
use ruas::model::NetworkConfig;
use ruas::scene::SceneConfig;
use ruas::search::SearchConfig;
use ruas::search_space::Architecture;
use ruas::task::TaskConfig;
use ruas::train::TrainConfig;
use ruas::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "RUAS_SEED";

/// In-memory synthetic data used when no data directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 16,
            size: 32,
            seed: DEFAULT_SEED,
            params: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `low/` (and optionally `high/`, `split.txt`) or plain
    /// PNGs. When absent the synthetic set is generated.
    pub dir: Option<PathBuf>,
    pub synthetic: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub task: TaskConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Discrete architecture for training when no searched logits are given.
    pub architecture: Option<Architecture>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            scene: self.scene.clone(),
            task: self.task.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.search.validate()?;
        self.train.validate()?;
        self.data.synthetic.params.validate()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    fn synthetic(&self) -> Result<Dataset> {
        let s = &self.data.synthetic;
        if s.count == 0 || s.size == 0 {
            return Err(Error::Config("synthetic data needs a positive count and size".into()));
        }
        synthetic_dataset(s.count, s.size, s.size, s.seed, &s.params)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.dir {
            Some(dir) => Dataset::load_dir(dir),
            None => self.synthetic(),
        }
    }

    pub fn split(&self) -> Result<SplitDataset> {
        match &self.data.dir {
            Some(dir) => SplitDataset::from_dir(dir),
            None => SplitDataset::interleaved(&self.synthetic()?),
        }
    }
}

/// Flag, then environment, then config file, then [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env {
        return text
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer")));
    }
    Ok(config.unwrap_or(DEFAULT_SEED))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), Some(3)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2"), Some(3)).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some(3)).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), DEFAULT_SEED);
        assert!(matches!(resolve_seed(None, Some("x"), None), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epochz": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"synthetic": {"sise": 8}}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"scene": {"stages": 2}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!((c.scene.stages, c.train.epochs), (2, 3));
        assert_eq!(c.search, SearchConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig { seed: Some(9), ..Default::default() };
        c.write(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join("run_config.json"))).unwrap();
        assert_eq!(back, c);
    }
}
