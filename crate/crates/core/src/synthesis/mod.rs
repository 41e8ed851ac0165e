//! Virtual IMU synthesis, input normalization and the synthetic motion corpus.

mod corpus;

pub use corpus::{generate_synthetic_corpus, seated_base_pose, CorpusConfig};

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::body_model::{forward_kinematics, BodyModelError, KinematicModel, Pose, Rotation, Sensor};

/// Default smoothing radius `n` of the finite-difference acceleration.
pub const DEFAULT_SMOOTHING: usize = 4;
pub const DEFAULT_FRAME_RATE: f64 = 60.0;
pub const NORMALIZED_INPUT_DIM: usize = 48;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("sequence has {frames} frames, need at least {required}")]
    SequenceTooShort { frames: usize, required: usize },
    #[error("frame rate must be positive, got {0}")]
    BadFrameRate(f64),
    #[error(transparent)]
    Body(#[from] BodyModelError),
}

/// Motion categories used to break evaluation results down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionType {
    Arm,
    UpperBody,
    Translation,
    Rotation,
    Combined,
}

impl MotionType {
    pub const ALL: [MotionType; 5] =
        [MotionType::Arm, MotionType::UpperBody, MotionType::Translation, MotionType::Rotation, MotionType::Combined];

    pub fn name(self) -> &'static str {
        match self {
            MotionType::Arm => "arm",
            MotionType::UpperBody => "upper_body",
            MotionType::Translation => "translation",
            MotionType::Rotation => "rotation",
            MotionType::Combined => "combined",
        }
    }
}

impl fmt::Display for MotionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        MotionType::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown motion type '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frame_rate: f64,
    pub frames: Vec<Pose>,
    pub subject_tag: String,
    pub motion_type: Option<MotionType>,
    /// Index of `frames[0]` in the source recording. Trimmed or windowed
    /// outputs carry the offset so they can be aligned with ground truth.
    pub start_frame: usize,
}

impl MotionSequence {
    pub fn new(frame_rate: f64, frames: Vec<Pose>, subject_tag: impl Into<String>) -> Self {
        MotionSequence { frame_rate, frames, subject_tag: subject_tag.into(), motion_type: None, start_frame: 0 }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `[start, start + len)` as their own sequence, keeping alignment.
    pub fn slice(&self, start: usize, len: usize) -> MotionSequence {
        MotionSequence {
            frame_rate: self.frame_rate,
            frames: self.frames[start..start + len].to_vec(),
            subject_tag: self.subject_tag.clone(),
            motion_type: self.motion_type,
            start_frame: self.start_frame + start,
        }
    }
}

/// One synchronized sample of all four sensors, in a shared global frame.
///
/// Orientations are kept as quaternions (canonical `w >= 0`) so that a frame
/// written to disk and read back is bit-identical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuFrame {
    pub timestamp: f64,
    /// Gravity-free linear acceleration in m/s², indexed by [`Sensor::index`].
    pub acc: [Vector3<f64>; 4],
    pub ori: [UnitQuaternion<f64>; 4],
}

impl ImuFrame {
    pub fn rotation(&self, s: Sensor) -> Rotation {
        Rotation::from_quaternion(&self.ori[s.index()])
    }

    pub fn acceleration(&self, s: Sensor) -> Vector3<f64> {
        self.acc[s.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuSequence {
    pub frame_rate: f64,
    pub frames: Vec<ImuFrame>,
    pub subject_tag: String,
    pub motion_type: Option<MotionType>,
    /// Motion-frame index of `frames[0]`.
    pub start_frame: usize,
}

impl ImuSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Central second difference with stride `n`:
/// `a(t) = (x(t-n) + x(t+n) - 2 x(t)) / (n dt)^2` for `t` in `[n, T-n)`.
pub fn finite_difference_acceleration(
    positions: &[Vector3<f64>],
    n: usize,
    dt: f64,
) -> Result<Vec<Vector3<f64>>, SynthesisError> {
    let n = n.max(1);
    if positions.len() < 2 * n + 1 {
        return Err(SynthesisError::SequenceTooShort { frames: positions.len(), required: 2 * n + 1 });
    }
    let h2 = (n as f64 * dt).powi(2);
    Ok((n..positions.len() - n)
        .map(|t| (positions[t - n] + positions[t + n] - 2.0 * positions[t]) / h2)
        .collect())
}

/// Places virtual sensors on the body and differentiates their trajectories.
/// The output drops `n` frames at each end.
pub fn synthesize_imu(model: &KinematicModel, motion: &MotionSequence, n: usize) -> Result<ImuSequence, SynthesisError> {
    if !(motion.frame_rate > 0.0) {
        return Err(SynthesisError::BadFrameRate(motion.frame_rate));
    }
    let n = n.max(1);
    let required = 2 * n + 1;
    if motion.len() < required {
        return Err(SynthesisError::SequenceTooShort { frames: motion.len(), required });
    }
    let dt = 1.0 / motion.frame_rate;
    let mut positions: [Vec<Vector3<f64>>; 4] = Default::default();
    let mut orientations: [Vec<UnitQuaternion<f64>>; 4] = Default::default();
    for pose in &motion.frames {
        let fk = forward_kinematics(model, pose)?;
        for s in Sensor::ALL {
            positions[s.index()].push(fk.sensor_position(model, s));
            orientations[s.index()].push(fk.rotations[model.sensor(s).joint].quaternion());
        }
    }
    let mut acc: [Vec<Vector3<f64>>; 4] = Default::default();
    for s in Sensor::ALL {
        acc[s.index()] = finite_difference_acceleration(&positions[s.index()], n, dt)?;
    }
    let frames = (0..motion.len() - 2 * n)
        .map(|k| {
            let t = k + n;
            ImuFrame {
                timestamp: (motion.start_frame + t) as f64 * dt,
                acc: std::array::from_fn(|s| acc[s][k]),
                ori: std::array::from_fn(|s| orientations[s][t]),
            }
        })
        .collect();
    Ok(ImuSequence {
        frame_rate: motion.frame_rate,
        frames,
        subject_tag: motion.subject_tag.clone(),
        motion_type: motion.motion_type,
        start_frame: motion.start_frame + n,
    })
}

/// Averages each sensor's acceleration over a centered window of
/// `2 * radius + 1` frames, shrinking the window at the ends. Intended for
/// recorded data, whose accelerations are not pre-smoothed.
pub fn smooth_accelerations(seq: &ImuSequence, radius: usize) -> ImuSequence {
    if radius == 0 || seq.frames.is_empty() {
        return seq.clone();
    }
    let len = seq.frames.len();
    let mut out = seq.clone();
    for (t, frame) in out.frames.iter_mut().enumerate() {
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(len - 1);
        for s in 0..4 {
            let sum: Vector3<f64> = (lo..=hi).map(|k| seq.frames[k].acc[s]).sum();
            frame.acc[s] = sum / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Adds zero-mean Gaussian noise: `acc_sigma` m/s² per axis, and a random
/// rotation of `ori_sigma` radians per axis to each orientation.
pub fn add_imu_noise<R: Rng + ?Sized>(seq: &ImuSequence, acc_sigma: f64, ori_sigma: f64, rng: &mut R) -> ImuSequence {
    let acc_noise = Normal::new(0.0, acc_sigma.max(0.0)).expect("finite sigma");
    let ori_noise = Normal::new(0.0, ori_sigma.max(0.0)).expect("finite sigma");
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for s in 0..4 {
            let da = Vector3::from_fn(|_, _| acc_noise.sample(rng));
            let dr = Vector3::from_fn(|_, _| ori_noise.sample(rng));
            frame.acc[s] += da;
            let q = UnitQuaternion::from_scaled_axis(dr) * frame.ori[s];
            frame.ori[s] = crate::body_model::canonical_quaternion(q);
        }
    }
    out
}

/// The 48-value network input for one frame.
///
/// Layout: `[ã_pelvis, ã_larm, ã_rarm, ã_head]` (12 values) followed by the
/// row-major matrices `R̃_pelvis, R̃_larm, R̃_rarm, R̃_head` (36 values), where
///
/// * `ã_leaf = R_pelvis⁻¹ (a_leaf − a_pelvis)`, `R̃_leaf = R_pelvis⁻¹ R_leaf`
/// * `ã_pelvis = R_pelvis⁻¹ a_pelvis`, `R̃_pelvis = R_pelvis`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedInput(pub [f64; NORMALIZED_INPUT_DIM]);

impl NormalizedInput {
    pub fn acceleration(&self, s: Sensor) -> Vector3<f64> {
        let i = 3 * s.index();
        Vector3::new(self.0[i], self.0[i + 1], self.0[i + 2])
    }

    pub fn orientation(&self, s: Sensor) -> Matrix3<f64> {
        let base = 12 + 9 * s.index();
        Matrix3::from_row_slice(&self.0[base..base + 9])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn normalize_frame(frame: &ImuFrame) -> NormalizedInput {
    let r_p = *frame.rotation(Sensor::PelvisOrChair).matrix();
    let r_p_inv = r_p.transpose();
    let a_p = frame.acceleration(Sensor::PelvisOrChair);
    let mut out = [0.0; NORMALIZED_INPUT_DIM];
    for s in Sensor::ALL {
        let (acc, ori) = if s == Sensor::PelvisOrChair {
            (r_p_inv * a_p, r_p)
        } else {
            (r_p_inv * (frame.acceleration(s) - a_p), r_p_inv * frame.rotation(s).matrix())
        };
        let i = 3 * s.index();
        out[i..i + 3].copy_from_slice(acc.as_slice());
        let base = 12 + 9 * s.index();
        for r in 0..3 {
            for c in 0..3 {
                out[base + 3 * r + c] = ori[(r, c)];
            }
        }
    }
    NormalizedInput(out)
}

pub fn normalize_sequence(seq: &ImuSequence) -> Vec<NormalizedInput> {
    seq.frames.iter().map(normalize_frame).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn frame_with(acc: [Vector3<f64>; 4], rot: [Rotation; 4]) -> ImuFrame {
        ImuFrame { timestamp: 0.0, acc, ori: rot.map(|r| r.quaternion()) }
    }

    #[test]
    fn constant_velocity_has_zero_acceleration() {
        let xs: Vec<_> = (0..30).map(|t| Vector3::new(0.3, -1.0, 2.0) * t as f64 / 60.0).collect();
        for a in finite_difference_acceleration(&xs, 4, 1.0 / 60.0).unwrap() {
            assert!(a.norm() < 1e-9);
        }
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let xs = vec![Vector3::zeros(); 8];
        assert_eq!(
            finite_difference_acceleration(&xs, 4, 0.1),
            Err(SynthesisError::SequenceTooShort { frames: 8, required: 9 })
        );
    }

    #[test]
    fn identity_pelvis_leaves_leaves_untouched() {
        let acc = [Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 0.0), Vector3::new(0.0, 0.0, 4.0)];
        let rot = [Rotation::identity(), Rotation::about_x(0.3), Rotation::about_y(-1.0), Rotation::about_z(2.0)];
        let n = normalize_frame(&frame_with(acc, rot));
        assert_eq!(n.acceleration(Sensor::PelvisOrChair), Vector3::zeros());
        assert_relative_eq!(n.orientation(Sensor::PelvisOrChair), Matrix3::identity(), epsilon = 1e-15);
        for s in [Sensor::LeftForearm, Sensor::RightForearm, Sensor::Head] {
            assert_relative_eq!(n.acceleration(s), acc[s.index()], epsilon = 1e-15);
            assert_relative_eq!(n.orientation(s), *rot[s.index()].matrix(), epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_turn_pelvis_example() {
        let rp = Rotation::about_z(FRAC_PI_2);
        let acc = [Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), Vector3::zeros(), Vector3::new(1.0, 1.0, 0.0)];
        let rot = [rp, Rotation::identity(), Rotation::identity(), rp];
        let n = normalize_frame(&frame_with(acc, rot));
        assert_relative_eq!(n.acceleration(Sensor::Head), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(n.orientation(Sensor::Head), Matrix3::identity(), epsilon = 1e-12);
        assert_eq!(n.0.len(), 48);
    }

    #[test]
    fn smoothing_radius_zero_is_identity() {
        let f = frame_with([Vector3::new(1.0, 2.0, 3.0); 4], [Rotation::identity(); 4]);
        let seq = ImuSequence { frame_rate: 60.0, frames: vec![f; 5], subject_tag: String::new(), motion_type: None, start_frame: 0 };
        assert_eq!(smooth_accelerations(&seq, 0), seq);
        assert_eq!(smooth_accelerations(&seq, 2), seq);
    }

    #[test]
    fn motion_type_names_parse() {
        for t in MotionType::ALL {
            assert_eq!(t.name().parse::<MotionType>(), Ok(t));
        }
    }
}
