//! Frame-at-a-time estimation shared by the offline and streaming commands.

use std::fmt::Write as _;

use super::PipelineError;
use crate::body_model::{KinematicModel, Pose};
use crate::calibration::{apply_calibration, CalibrationResult};
use crate::net::{decode_pose, Network, Predictor};
use crate::physics::{PhysicsConfig, RefinedFrame, Refiner};
use crate::synthesis::{normalize_frame, seated_base_pose, ImuFrame, ImuSequence, MotionSequence, NormalizedInput};

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatedFrame {
    /// Motion-frame index of the estimated frame.
    pub frame: usize,
    pub timestamp: f64,
    /// Network output with the lower body filled in from the seated posture.
    pub kinematic: Pose,
    pub refined: Option<RefinedFrame>,
}

impl EstimatedFrame {
    /// The refined pose when physics is on, the network pose otherwise.
    pub fn pose(&self) -> &Pose {
        self.refined.as_ref().map_or(&self.kinematic, |r| &r.pose)
    }
}

/// Consumes IMU frames one at a time. Once a full window has arrived, every
/// new frame yields the estimate for the frame `future` steps back.
pub struct Estimator<'a> {
    model: &'a KinematicModel,
    net: Predictor<f32>,
    calibration: Option<CalibrationResult>,
    refiner: Option<Refiner<'a>>,
    base: Pose,
    window: Vec<NormalizedInput>,
    stamps: Vec<f64>,
    received: usize,
    start_frame: usize,
}

impl<'a> Estimator<'a> {
    /// `start_frame` is the motion-frame index of the first IMU frame pushed.
    pub fn new(
        model: &'a KinematicModel,
        net: &'a Network<f32>,
        calibration: Option<CalibrationResult>,
        physics: Option<&PhysicsConfig>,
        frame_rate: f64,
        start_frame: usize,
    ) -> Result<Self, PipelineError> {
        let refiner = physics.map(|cfg| Refiner::new(model, cfg, frame_rate)).transpose()?;
        Ok(Estimator {
            model,
            net: net.predictor(),
            calibration,
            refiner,
            base: seated_base_pose(model),
            window: Vec::with_capacity(net.config.window.total()),
            stamps: Vec::with_capacity(net.config.window.total()),
            received: 0,
            start_frame,
        })
    }

    /// Frames between an input arriving and its estimate being emitted.
    pub fn latency_frames(&self) -> usize {
        self.net.config.window.future
    }

    /// Articulated joints the torques of refined frames refer to.
    pub fn torque_joints(&self) -> Vec<usize> {
        self.refiner.as_ref().map(|r| r.chain().joints.clone()).unwrap_or_default()
    }

    pub fn push(&mut self, frame: &ImuFrame) -> Result<Option<EstimatedFrame>, PipelineError> {
        let spec = self.net.config.window;
        let calibrated = match &self.calibration {
            Some(c) => apply_calibration(c, frame),
            None => *frame,
        };
        if self.window.len() == spec.total() {
            self.window.remove(0);
            self.stamps.remove(0);
        }
        self.window.push(normalize_frame(&calibrated));
        self.stamps.push(frame.timestamp);
        self.received += 1;
        if self.window.len() < spec.total() {
            return Ok(None);
        }
        let index = self.start_frame + self.received - 1 - spec.future;
        let at = |e: PipelineError| PipelineError::Frame { frame: index, source: Box::new(e) };
        let out = self.net.predict_window(&self.window).map_err(|e| at(e.into()))?;
        let mut kinematic = decode_pose(self.model, out.pose()).map_err(|e| at(e.into()))?;
        for (j, r) in kinematic.local_rotations.iter_mut().enumerate() {
            if !self.model.upper_body.contains(&j) {
                *r = self.base.local_rotations[j];
            }
        }
        kinematic.root_position = self.base.root_position;
        let refined = match self.refiner.as_mut() {
            Some(r) => Some(r.step(&kinematic).map_err(|e| at(e.into()))?),
            None => None,
        };
        Ok(Some(EstimatedFrame { frame: index, timestamp: self.stamps[spec.current()], kinematic, refined }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimation {
    pub frames: Vec<EstimatedFrame>,
    /// Joint of each torque entry; empty without physics.
    pub torque_joints: Vec<usize>,
}

impl Estimation {
    /// The emitted poses as a motion sequence aligned with the source recording.
    pub fn motion(&self, source: &ImuSequence) -> MotionSequence {
        let mut m = MotionSequence::new(source.frame_rate, self.frames.iter().map(|f| f.pose().clone()).collect(), source.subject_tag.clone());
        m.motion_type = source.motion_type;
        m.start_frame = self.frames.first().map_or(source.start_frame, |f| f.frame);
        m
    }

    /// The network poses before refinement.
    pub fn kinematic_motion(&self, source: &ImuSequence) -> MotionSequence {
        let mut m = self.motion(source);
        m.frames = self.frames.iter().map(|f| f.kinematic.clone()).collect();
        m
    }

    /// `frame,joint,tau_x,tau_y,tau_z` in N·m, pelvis frame. Header only
    /// without physics.
    pub fn torque_csv(&self, model: &KinematicModel) -> String {
        let mut out = String::from("frame,joint,tau_x,tau_y,tau_z\n");
        for f in &self.frames {
            let Some(r) = &f.refined else { continue };
            for (&j, t) in self.torque_joints.iter().zip(&r.torques) {
                let _ = writeln!(out, "{},{},{},{},{}", f.frame, model.joints[j].name, t.x, t.y, t.z);
            }
        }
        out
    }

    /// Largest KKT residual over all refined frames.
    pub fn max_kkt_residual(&self) -> f64 {
        self.frames.iter().filter_map(|f| f.refined.as_ref()).map(|r| r.kkt.max()).fold(0.0, f64::max)
    }

    pub fn fallback_count(&self) -> usize {
        self.frames.iter().filter(|f| f.refined.as_ref().is_some_and(|r| r.fallback)).count()
    }
}

/// Runs a whole recording through an [`Estimator`]. The result has
/// `imu.len() - (window - 1)` frames.
pub fn estimate_sequence(
    model: &KinematicModel,
    net: &Network<f32>,
    imu: &ImuSequence,
    calibration: Option<CalibrationResult>,
    physics: Option<&PhysicsConfig>,
) -> Result<Estimation, PipelineError> {
    let total = net.config.window.total();
    if imu.len() < total {
        return Err(crate::net::NetError::SequenceTooShort { frames: imu.len(), required: total }.into());
    }
    let mut est = Estimator::new(model, net, calibration, physics, imu.frame_rate, imu.start_frame)?;
    let mut frames = Vec::with_capacity(imu.len() + 1 - total);
    for f in &imu.frames {
        if let Some(e) = est.push(f)? {
            frames.push(e);
        }
    }
    Ok(Estimation { frames, torque_joints: est.torque_joints() })
}
