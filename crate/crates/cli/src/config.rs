//! Run configuration: every `TrainConfig` key at the top level, plus the
//! data source, forget sampling, evaluation strategy and output paths.

use std::path::{Path, PathBuf};

use forgekey_core::datagen::SyntheticSpec;
use forgekey_core::inference::{FusionStrategy, StrategyKind};
use forgekey_core::{Error, Result, TrainConfig};
use serde::Deserialize;
use serde_json::{Map, Value};

pub const SEED_VAR: &str = "FORGEKEY_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Synthetic data, used when `data_dir` is not set.
    pub data: SyntheticSpec,
    /// Directory holding `images.bin` and `labels.csv`.
    pub data_dir: Option<PathBuf>,
    pub forget_rate: f64,
    pub stratified: bool,
    pub strategy: StrategyKind,
    pub k: usize,
    pub fusion_tau: f64,
    /// Epoch CSV; defaults to the checkpoint path with a `.csv` extension.
    pub history_csv: Option<PathBuf>,
    /// Where to write the sampled forget ids, one per line.
    pub forget_out: Option<PathBuf>,
    /// Where to export the dataset the run used.
    pub data_out: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            data_dir: None,
            forget_rate: 0.1,
            stratified: true,
            strategy: StrategyKind::Ensemble,
            k: 4,
            fusion_tau: 0.07,
            history_csv: None,
            forget_out: None,
            data_out: None,
        }
    }
}

const RUN_KEYS: [&str; 10] = [
    "data",
    "data_dir",
    "forget_rate",
    "stratified",
    "strategy",
    "k",
    "fusion_tau",
    "history_csv",
    "forget_out",
    "data_out",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run: RunOptions,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let root: Map<String, Value> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not a JSON object: {e}")))?;
        let (run, train): (Map<_, _>, Map<_, _>) = root.into_iter().partition(|(k, _)| RUN_KEYS.contains(&k.as_str()));
        let train: TrainConfig =
            serde_json::from_value(Value::Object(train)).map_err(|e| Error::Config(format!("config: {e}")))?;
        let run: RunOptions = serde_json::from_value(Value::Object(run)).map_err(|e| Error::Config(format!("config: {e}")))?;
        let cfg = Self { train, run };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(seed) = seed_override()? {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.run.data_dir.is_none() {
            self.run.data.validate()?;
        }
        if !(self.run.forget_rate > 0.0 && self.run.forget_rate < 1.0) {
            return Err(Error::Config(format!("forget_rate {} outside (0, 1)", self.run.forget_rate)));
        }
        self.fusion().validate()
    }

    pub fn fusion(&self) -> FusionStrategy {
        FusionStrategy { kind: self.run.strategy, k: self.run.k, tau: self.run.fusion_tau }
    }
}

/// `FORGEKEY_SEED`, when set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR}={v} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_VAR}: {e}"))),
    }
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
    let mut spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("spec: {e}")))?;
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}
