//! End-to-end commands: corpus synthesis, training, offline and streamed
//! estimation, evaluation and calibration.
//!
//! Every command takes a [`PipelineConfig`] and reads and writes the text
//! formats of [`crate::formats`], the weights format of
//! [`crate::net::save_weights`] and the calibration record of
//! [`crate::calibration`]. Errors carry a process exit code through
//! [`PipelineError::exit_code`].

mod commands;
mod estimator;

pub use commands::{
    cmd_calibrate, cmd_estimate, cmd_evaluate, cmd_stream, cmd_synthesize, cmd_train, fnv1a64, load_dataset,
    parse_stream, CalibrateArgs, CorpusEntry, CorpusManifest, EstimateOutput, EvaluateOutput, StreamArgs,
    StreamReport, SynthesizeOutput, TrainOutput, MANIFEST_FILE, STREAM_FORMAT_VERSION,
};
pub use estimator::{estimate_sequence, EstimatedFrame, Estimation, Estimator};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{BodyModelError, KinematicModel};
use crate::calibration::CalibrationError;
use crate::formats::FormatError;
use crate::metrics::MetricsError;
use crate::net::{NetError, NetworkConfig, TrainConfig};
use crate::physics::{PhysicsConfig, PhysicsError};
use crate::synthesis::{CorpusConfig, SynthesisError, DEFAULT_FRAME_RATE, DEFAULT_SMOOTHING};

/// Frames per window the network and the streaming latency are built around.
pub const WINDOW_FRAMES: usize = 26;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: Box<PipelineError> },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for bad or unusable input data,
    /// 4 for numerical and solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Format(_) | PipelineError::Io { .. } => 3,
            PipelineError::Net(e) => match e {
                NetError::InvalidConfig(_) => 2,
                NetError::NonFiniteLoss { .. } | NetError::Body(_) => 4,
                _ => 3,
            },
            PipelineError::Physics(e) => match e {
                PhysicsError::InvalidConfig(_) => 2,
                PhysicsError::Dimension(_) => 3,
                _ => 4,
            },
            PipelineError::Synthesis(_) | PipelineError::Metrics(_) | PipelineError::Calibration(_) => 3,
            PipelineError::Frame { source, .. } => source.exit_code(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Skeleton config; the built-in skeleton when absent.
    pub skeleton: Option<PathBuf>,
    /// Directory holding `manifest.toml`, `motion/` and `imu/`.
    pub corpus: PathBuf,
    pub weights: PathBuf,
    pub loss_csv: PathBuf,
    pub reports: PathBuf,
    /// Calibration record applied to IMU input before estimation.
    pub calibration: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            skeleton: None,
            corpus: "corpus".into(),
            weights: "model/weights.bin".into(),
            loss_csv: "model/loss.csv".into(),
            reports: "reports".into(),
            calibration: None,
        }
    }
}

/// Which corpus sequences and windows go into training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    /// Subject tags to train on; every corpus entry when empty.
    pub subjects: Vec<String>,
    /// Keep only the first this many windows.
    pub max_windows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSettings {
    /// Replay rate in frames per second; 0 replays as fast as possible.
    pub rate: f64,
    /// Frames the producer may run ahead of the estimator.
    pub queue: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        StreamSettings { rate: DEFAULT_FRAME_RATE, queue: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub frame_rate: f64,
    /// Finite-difference stride of synthesized accelerations.
    pub smoothing: usize,
    /// Seed of every command; `train.seed` is overwritten with it.
    pub seed: u64,
    pub physics: bool,
    pub network: NetworkConfig,
    pub corpus: CorpusConfig,
    pub dataset: DatasetSettings,
    pub train: TrainConfig,
    pub refine: PhysicsConfig,
    pub stream: StreamSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            frame_rate: DEFAULT_FRAME_RATE,
            smoothing: DEFAULT_SMOOTHING,
            seed: 0,
            physics: true,
            network: NetworkConfig::three_stage(),
            corpus: CorpusConfig::default(),
            dataset: DatasetSettings::default(),
            train: TrainConfig::default(),
            refine: PhysicsConfig::default(),
            stream: StreamSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if self.corpus.frame_rate != self.frame_rate {
            return bad(format!("corpus.frame_rate {} differs from frame_rate {}", self.corpus.frame_rate, self.frame_rate));
        }
        if self.smoothing == 0 {
            return bad("smoothing must be at least 1".into());
        }
        if self.network.window.total() != WINDOW_FRAMES {
            return bad(format!("window must span {WINDOW_FRAMES} frames, got {}", self.network.window.total()));
        }
        self.network.validate()?;
        self.refine.validate()?;
        if !(self.stream.rate >= 0.0 && self.stream.rate.is_finite()) || self.stream.queue == 0 {
            return bad("stream.rate must be non-negative and stream.queue positive".into());
        }
        if self.dataset.max_windows == Some(0) {
            return bad("dataset.max_windows must be positive".into());
        }
        Ok(())
    }

    /// The training settings with the command seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn model(&self) -> Result<KinematicModel, PipelineError> {
        match &self.paths.skeleton {
            None => Ok(KinematicModel::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::Config(format!("skeleton {}: {e}", p.display())))?;
                KinematicModel::from_config_str(&text).map_err(|e: BodyModelError| PipelineError::Config(e.to_string()))
            }
        }
    }
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{what} {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_map_to_exit_code_2() {
        for text in ["frame_rate = -1.0", "bogus = 1", "[network.window]\npast = 10\nfuture = 5", "[refine.gains]\nkp = 0.0\nkd = 1.0"] {
            let err = PipelineConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(PipelineError::Data("x".into()).exit_code(), 3);
        assert_eq!(PipelineError::Net(NetError::SequenceTooShort { frames: 3, required: 26 }).exit_code(), 3);
        assert_eq!(PipelineError::Net(NetError::NonFiniteLoss { epoch: 1, last_loss: 0.1 }).exit_code(), 4);
        assert_eq!(PipelineError::Physics(PhysicsError::SingularMassMatrix).exit_code(), 4);
        assert_eq!(PipelineError::Metrics(MetricsError::LengthMismatch { a: 1, b: 2 }).exit_code(), 3);
    }
}
