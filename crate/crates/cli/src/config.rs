//! Run configuration: one TOML file, every section optional.

use std::path::Path;

use memo::experiment::{DatasetConfig, Mode, Scenario};
use memo::model::{BankMode, ModelConfig};
use memo::streaming::{EvalSetting, StreamConfig};
use memo::training::{SpeakerPretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Banks {
    None,
    Speaker,
    Contextual,
    Both,
}

impl Banks {
    pub fn mode(self) -> Option<BankMode> {
        match self {
            Self::None => None,
            Self::Speaker => Some(BankMode::Speaker),
            Self::Contextual => Some(BankMode::Contextual),
            Self::Both => Some(BankMode::Both),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub settings: Vec<EvalSetting>,
    pub scenarios: Vec<Scenario>,
    pub modes: Vec<Mode>,
    /// `none` treats the checkpoint as a bankless baseline.
    pub banks: Banks,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            settings: EvalSetting::ALL.to_vec(),
            scenarios: vec![Scenario::Clean, Scenario::Impaired],
            modes: vec![Mode::Offline, Mode::Online],
            banks: Banks::Contextual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub axes: Vec<String>,
    pub t_win: Vec<usize>,
    pub t_sh: Vec<usize>,
    pub ratio_width: f64,
    pub ratio_max: f64,
    pub beta: Vec<f64>,
    /// Epochs per retrained model in the beta sweep.
    pub beta_epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axes: ["slots", "t_win", "t_sh", "ratio"].map(String::from).to_vec(),
            t_win: vec![16_000, 32_000, 48_000],
            t_sh: vec![1_600, 3_200, 6_400],
            ratio_width: 0.2,
            ratio_max: 1.0,
            beta: vec![0.0, 0.2, 0.5, 1.0],
            beta_epochs: 10,
        }
    }
}

pub const SWEEP_AXES: [&str; 5] = ["slots", "t_win", "t_sh", "ratio", "beta"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwitchSection {
    /// Length of the transition segment after each switch, seconds.
    pub settle_s: f64,
    pub banks: BankMode,
}

impl Default for SwitchSection {
    fn default() -> Self {
        Self { settle_s: 2.0, banks: BankMode::Contextual }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub speaker_pretrain: SpeakerPretrainConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub switch: SwitchSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Overrides every section seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.seed = seed;
        self.speaker_pretrain.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: memo::Error| CliError::Config(e.to_string());
        self.data.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.stream.validate().map_err(cfg)?;
        for a in &self.sweep.axes {
            if !SWEEP_AXES.contains(&a.as_str()) {
                return Err(CliError::Config(format!("unknown sweep axis {a}; expected one of {SWEEP_AXES:?}")));
            }
        }
        if !(self.sweep.ratio_width > 0.0) || !(0.0..=1.0).contains(&self.sweep.ratio_max) {
            return Err(CliError::Config("ratio sweep needs width > 0 and max in [0, 1]".into()));
        }
        if !(self.switch.settle_s > 0.0) {
            return Err(CliError::Config("switch.settle_s must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}
