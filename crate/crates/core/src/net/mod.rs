//! Recurrent kinematics networks: a bidirectional two-layer LSTM stage, the
//! single-stage and three-stage variants built from it, training with
//! backpropagation through time, and weight storage.

mod kernels;
mod layers;
mod network;
mod targets;
mod train;
mod weights_io;

pub use layers::{BiLstm, BiLstmCache, Dense, LstmCell};
pub use network::{Network, NetworkOutput, Predictor, Stage};
pub use targets::{
    decode_pose, leaf_joints, pose_targets, sequence_targets, FrameTargets, SequenceTargets, LEAF_JOINT_NAMES,
};
pub use train::{
    dataset_loss, gradient_check, train, train_from, Adam, Dataset, LossWeights, StageSchedule, TrainConfig, TrainReport,
    TrainingSequence,
};
pub use weights_io::{load_weights, read_weights, save_weights, weights_to_bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::BodyModelError;
use crate::synthesis::NORMALIZED_INPUT_DIM;

/// Floating-point type the network runs in. Training and inference use
/// `f32`; gradient checks use `f64`.
pub trait Scalar:
    LinalgScalar + num_traits::Float + ScalarOperand + Debug + Sum + Send + Sync + std::ops::AddAssign + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    fn sigmoid_in_place(v: &mut [Self]) {
        for x in v {
            *x = Self::one() / (Self::one() + (-*x).exp());
        }
    }

    fn tanh_in_place(v: &mut [Self]) {
        for x in v {
            *x = x.tanh();
        }
    }

    /// A `(k, n)` weight matrix prepared for repeated products.
    type Packed: Clone + Debug + Send + Sync;

    fn pack(w: &[Self], k: usize, n: usize) -> Self::Packed;

    /// `out += x w`, all row-major: `x` is `(m, k)`, `out` is `(m, n)`.
    fn matmul_acc(w: &Self::Packed, x: &[Self], out: &mut [Self], m: usize);
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }

    fn sigmoid_in_place(v: &mut [Self]) {
        for x in v {
            *x = 1.0 / (1.0 + fast_exp(-*x));
        }
    }

    fn tanh_in_place(v: &mut [Self]) {
        for x in v {
            *x = 1.0 - 2.0 / (fast_exp(2.0 * *x) + 1.0);
        }
    }

    type Packed = kernels::Panels;

    fn pack(w: &[Self], k: usize, n: usize) -> Self::Packed {
        kernels::Panels::new(w, k, n)
    }

    fn matmul_acc(w: &Self::Packed, x: &[Self], out: &mut [Self], m: usize) {
        w.matmul_acc(x, out, m);
    }
}

/// Branch-free `exp` for `f32` that the compiler can vectorize: range
/// reduction by powers of two and a degree-6 polynomial on
/// `[-ln 2 / 2, ln 2 / 2]`. Relative error stays within a few ulp.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5·2²³ rounds to the nearest integer and leaves it in the
    // low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let t = x * std::f32::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let e = p * r * r + r + 1.0;
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127);
    e * f32::from_bits(k << 23)
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }

    type Packed = kernels::Plain<f64>;

    fn pack(w: &[Self], k: usize, n: usize) -> Self::Packed {
        kernels::Plain::new(w, k, n)
    }

    fn matmul_acc(w: &Self::Packed, x: &[Self], out: &mut [Self], m: usize) {
        w.matmul_acc(x, out, m);
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence has {frames} frames, need at least {required}")]
    SequenceTooShort { frames: usize, required: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, last_loss: f64 },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("weights file: {0}")]
    WeightsFormat(String),
    #[error(transparent)]
    Body(#[from] BodyModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleStage,
    ThreeStage,
}

/// Frames of context around the frame being estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub past: usize,
    pub future: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { past: 20, future: 5 }
    }
}

impl WindowSpec {
    pub fn total(&self) -> usize {
        self.past + 1 + self.future
    }

    /// Index of the estimated frame inside a window.
    pub fn current(&self) -> usize {
        self.past
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// One hidden size per stage.
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    /// Output size of every stage; the last one is the pose vector.
    pub stage_outputs: Vec<usize>,
    pub window: WindowSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::three_stage()
    }
}

impl NetworkConfig {
    pub fn single_stage() -> Self {
        NetworkConfig {
            variant: Variant::SingleStage,
            hidden: vec![256],
            input_dim: NORMALIZED_INPUT_DIM,
            stage_outputs: vec![96],
            window: WindowSpec::default(),
        }
    }

    /// Leaf positions (9), all upper-body positions (48), then 6D rotations (96).
    pub fn three_stage() -> Self {
        NetworkConfig {
            variant: Variant::ThreeStage,
            hidden: vec![256, 64, 128],
            input_dim: NORMALIZED_INPUT_DIM,
            stage_outputs: vec![9, 48, 96],
            window: WindowSpec::default(),
        }
    }

    pub fn stage_count(&self) -> usize {
        self.hidden.len()
    }

    pub fn output_dim(&self) -> usize {
        *self.stage_outputs.last().unwrap_or(&0)
    }

    /// Input width of stage `k`: the network input, plus the previous
    /// stage's output for every stage after the first.
    pub fn stage_input_dim(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.input_dim + self.stage_outputs[k - 1]
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let expected = match self.variant {
            Variant::SingleStage => 1,
            Variant::ThreeStage => 3,
        };
        if self.hidden.len() != expected || self.stage_outputs.len() != expected {
            return Err(NetError::InvalidConfig(format!(
                "{:?} needs {expected} hidden sizes and stage outputs, got {} and {}",
                self.variant,
                self.hidden.len(),
                self.stage_outputs.len()
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) || self.stage_outputs.contains(&0) {
            return Err(NetError::InvalidConfig("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Window for output frame `current` of a sequence: `frames` covers
/// `[current - past, current + future]`.
#[derive(Clone, Copy, Debug)]
pub struct Window<'a, T> {
    pub current: usize,
    pub frames: &'a [T],
}

/// All complete windows of a sequence, in frame order. Output frame `t`
/// runs from `past` to `len - future - 1`, giving `len - past - future`
/// windows.
pub fn make_windows<'a, T>(seq: &'a [T], spec: &WindowSpec) -> Result<Vec<Window<'a, T>>, NetError> {
    let total = spec.total();
    if seq.len() < total {
        return Err(NetError::SequenceTooShort { frames: seq.len(), required: total });
    }
    Ok((spec.past..seq.len() - spec.future)
        .map(|t| Window { current: t, frames: &seq[t - spec.past..=t + spec.future] })
        .collect())
}
