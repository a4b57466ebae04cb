//! The run config: one JSON document holding every knob of a run. Flags
//! override file values, which override defaults; the fully resolved config
//! is persisted next to the run's artifacts so any run can be replayed from
//! its own output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segforge_core::data::AugmentationSpec;
use segforge_core::element::Dtype;
use segforge_core::error::ConfigError;
use segforge_core::model::{Arch, ModelConfig};
use segforge_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationSpec,
    /// Element type for training and synthetic data; checkpoints remember it.
    pub dtype: Dtype,
    /// Root seed; every random decision in a run derives from it.
    pub seed: u64,
    /// 1 is the bitwise-reproducibility reference mode (metrics.csv seconds
    /// column reads 0). The current implementation is serial either way.
    pub threads: usize,
    /// Directory with images/ and masks/ subdirectories of PNG pairs.
    pub data_dir: Option<PathBuf>,
    /// Generate this many synthetic samples instead of loading data_dir.
    pub synth: Option<usize>,
    /// Edge length for synthetic samples; defaults to the model input size.
    pub synth_size: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationSpec::default(),
            dtype: Dtype::F32,
            seed: 0,
            threads: 1,
            data_dir: None,
            synth: None,
            synth_size: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate().map_err(|m| invalid("train", m))?;
        self.augment.validate().map_err(|m| invalid("augment", m))?;
        if self.augment.target_size != self.model.input_size {
            return Err(invalid(
                "augment.target_size",
                format!(
                    "must equal model.input_size ({} vs {}); set both, or use --input-size which sets the pair",
                    self.augment.target_size, self.model.input_size
                ),
            ));
        }
        if self.threads < 1 {
            return Err(invalid("threads", "must be at least 1"));
        }
        if let Some(s) = self.synth_size {
            if s < 16 {
                return Err(invalid("synth_size", format!("must be at least 16, got {s}")));
            }
        }
        if let Some(n) = self.synth {
            if n == 0 {
                return Err(invalid("synth", "sample count must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Parse a config document. Unknown keys are errors so a typo cannot
/// silently fall back to a default.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&text)
}

pub fn parse_arch(s: &str) -> Result<Arch, ConfigError> {
    match s {
        "resunetpp" => Ok(Arch::Resunetpp),
        "unet" | "unet_baseline" => Ok(Arch::UnetBaseline),
        other => Err(invalid(
            "arch",
            format!("expected resunetpp or unet, got {other:?}"),
        )),
    }
}

pub fn parse_dtype(s: &str) -> Result<Dtype, ConfigError> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(invalid(
            "dtype",
            format!("expected f32 or f64, got {other:?}"),
        )),
    }
}

pub fn parse_loss(s: &str) -> Result<segforge_core::loss::LossKind, ConfigError> {
    use segforge_core::loss::LossKind;
    match s {
        "dice" => Ok(LossKind::Dice),
        "bce" => Ok(LossKind::Bce),
        "bce_dice" => Ok(LossKind::BceDice),
        "mse" => Ok(LossKind::Mse),
        other => Err(invalid(
            "loss",
            format!("expected dice, bce, bce_dice, or mse, got {other:?}"),
        )),
    }
}

/// SEGFORGE_THREADS mirrors --threads; an explicit flag still wins.
pub fn threads_from_env() -> Result<Option<usize>, ConfigError> {
    match std::env::var("SEGFORGE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| invalid("SEGFORGE_THREADS", format!("not a thread count: {v:?}"))),
        Err(_) => Ok(None),
    }
}
