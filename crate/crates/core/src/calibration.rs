//! Sensor-to-body calibration from a single frame held in a reference pose.
//!
//! A raw sensor reports its orientation `R_raw` in its own global frame. Two
//! rotations map it onto the body model:
//!
//! * the heading `R_heading` takes the sensors' global frame to the model's
//!   global frame;
//! * the per-sensor offset `R_offset` takes the bone frame to the sensor's
//!   mounting frame.
//!
//! A calibrated orientation is `R_heading · R_raw · R_offset` and a calibrated
//! acceleration is `R_heading · a_raw`. Accelerations are only rotated; no
//! bias is estimated.
//!
//! With no external heading reference, the pelvis/chair sensor is assumed to
//! be mounted aligned with the pelvis, which fixes the heading.

use std::fmt::Write as _;

use nalgebra::Quaternion;
use thiserror::Error;

use crate::body_model::{
    canonical_quaternion, forward_kinematics, unit_quaternion, BodyModelError, KinematicModel, Pose, Rotation, Sensor,
    UNIT_QUATERNION_TOLERANCE,
};
use crate::synthesis::{ImuFrame, ImuSequence};

pub const CALIBRATION_FORMAT_VERSION: &str = "imupose-calibration v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("sensor {sensor}: orientation is not a unit quaternion (norm {norm})")]
    NonOrthonormalInput { sensor: &'static str, norm: f64 },
    #[error(transparent)]
    Body(#[from] BodyModelError),
    #[error("calibration record line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    /// Sensor global frame to model global frame, shared by all sensors.
    pub heading: Rotation,
    /// Bone frame to sensor frame, indexed by [`Sensor::index`].
    pub offsets: [Rotation; 4],
    /// Timestamp of the calibration frame.
    pub timestamp: f64,
}

impl CalibrationResult {
    pub fn identity() -> Self {
        CalibrationResult { heading: Rotation::identity(), offsets: [Rotation::identity(); 4], timestamp: 0.0 }
    }

    /// Applies an extra heading rotation after the current one.
    pub fn reheaded(&self, r: &Rotation) -> Self {
        CalibrationResult { heading: *r * self.heading, ..self.clone() }
    }

    pub fn to_record(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CALIBRATION_FORMAT_VERSION}");
        let _ = writeln!(out, "timestamp {}", self.timestamp);
        let q = self.heading.quaternion();
        let _ = writeln!(out, "heading {} {} {} {}", q.w, q.i, q.j, q.k);
        for s in Sensor::ALL {
            let q = self.offsets[s.index()].quaternion();
            let _ = writeln!(out, "offset {} {} {} {} {}", s.name(), q.w, q.i, q.j, q.k);
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self, CalibrationError> {
        let mut out = CalibrationResult::identity();
        let mut seen_header = false;
        let mut seen = [false; 4];
        let mut seen_heading = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| CalibrationError::Parse { line, message };
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if !seen_header {
                if l != CALIBRATION_FORMAT_VERSION {
                    return Err(err(format!("expected '{CALIBRATION_FORMAT_VERSION}'")));
                }
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = l.split_whitespace().collect();
            let nums = |fs: &[&str]| -> Result<Vec<f64>, CalibrationError> {
                fs.iter().map(|s| s.parse::<f64>().map_err(|e| err(format!("bad number '{s}': {e}")))).collect()
            };
            let quat = |v: &[f64]| -> Result<Rotation, CalibrationError> {
                if v.len() != 4 {
                    return Err(err("expected a quaternion w x y z".into()));
                }
                let q = unit_quaternion(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
                Ok(Rotation::from_quaternion(&q))
            };
            match f[0] {
                "timestamp" if f.len() == 2 => out.timestamp = nums(&f[1..])?[0],
                "heading" => {
                    out.heading = quat(&nums(&f[1..])?)?;
                    seen_heading = true;
                }
                "offset" if f.len() >= 2 => {
                    let s = Sensor::from_name(f[1]).ok_or_else(|| err(format!("unknown sensor '{}'", f[1])))?;
                    out.offsets[s.index()] = quat(&nums(&f[2..])?)?;
                    seen[s.index()] = true;
                }
                other => return Err(err(format!("unexpected record '{other}'"))),
            }
        }
        if !seen_header || !seen_heading || seen.contains(&false) {
            return Err(CalibrationError::Parse { line: 0, message: "incomplete calibration record".into() });
        }
        Ok(out)
    }
}

fn check_frame(frame: &ImuFrame) -> Result<(), CalibrationError> {
    for s in Sensor::ALL {
        let norm = frame.ori[s.index()].as_ref().norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_QUATERNION_TOLERANCE {
            return Err(CalibrationError::NonOrthonormalInput { sensor: s.name(), norm });
        }
    }
    Ok(())
}

/// Orientation of each sensor's bone in the reference pose.
fn reference_bones(reference_pose: &Pose, model: &KinematicModel) -> Result<[Rotation; 4], CalibrationError> {
    let fk = forward_kinematics(model, reference_pose)?;
    Ok(std::array::from_fn(|s| fk.rotations[model.sensors[s].joint]))
}

/// Calibrates against a known heading.
pub fn compute_calibration_with_heading(
    cal_frame: &ImuFrame,
    reference_pose: &Pose,
    model: &KinematicModel,
    heading: Rotation,
) -> Result<CalibrationResult, CalibrationError> {
    check_frame(cal_frame)?;
    let bones = reference_bones(reference_pose, model)?;
    let offsets = std::array::from_fn(|s| (heading * cal_frame.rotation(Sensor::ALL[s])).inverse() * bones[s]);
    Ok(CalibrationResult { heading, offsets, timestamp: cal_frame.timestamp })
}

/// Calibrates from one frame captured while the user holds `reference_pose`,
/// taking the heading from the pelvis/chair sensor.
pub fn compute_calibration(
    cal_frame: &ImuFrame,
    reference_pose: &Pose,
    model: &KinematicModel,
) -> Result<CalibrationResult, CalibrationError> {
    check_frame(cal_frame)?;
    let bones = reference_bones(reference_pose, model)?;
    let pelvis = Sensor::PelvisOrChair;
    let heading = bones[pelvis.index()] * cal_frame.rotation(pelvis).inverse();
    compute_calibration_with_heading(cal_frame, reference_pose, model, heading)
}

/// Re-estimates only the heading so that the pelvis/chair sensor of `frame`
/// matches the pelvis-bone orientation of `pose`. Offsets are kept.
pub fn recalibrate_heading(
    cal: &CalibrationResult,
    frame: &ImuFrame,
    pose: &Pose,
    model: &KinematicModel,
) -> Result<CalibrationResult, CalibrationError> {
    check_frame(frame)?;
    let bones = reference_bones(pose, model)?;
    let p = Sensor::PelvisOrChair;
    let heading = bones[p.index()] * (frame.rotation(p) * cal.offsets[p.index()]).inverse();
    Ok(CalibrationResult { heading, offsets: cal.offsets, timestamp: frame.timestamp })
}

pub fn apply_calibration(cal: &CalibrationResult, frame: &ImuFrame) -> ImuFrame {
    let h = cal.heading.quaternion();
    ImuFrame {
        timestamp: frame.timestamp,
        acc: std::array::from_fn(|s| cal.heading.apply(&frame.acc[s])),
        ori: std::array::from_fn(|s| {
            let q: Quaternion<f64> = (h * frame.ori[s] * cal.offsets[s].quaternion()).into_inner();
            canonical_quaternion(nalgebra::UnitQuaternion::new_normalize(q))
        }),
    }
}

pub fn apply_to_sequence(cal: &CalibrationResult, seq: &ImuSequence) -> ImuSequence {
    ImuSequence { frames: seq.frames.iter().map(|f| apply_calibration(cal, f)).collect(), ..seq.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn raw_frame(rots: [Rotation; 4]) -> ImuFrame {
        ImuFrame { timestamp: 1.5, acc: [Vector3::new(0.0, 1.0, 0.0); 4], ori: rots.map(|r| r.quaternion()) }
    }

    fn close(a: &Rotation, b: &Rotation, tol: f64) -> bool {
        (a.matrix() - b.matrix()).norm() < tol
    }

    #[test]
    fn aligned_sensors_give_identity_offsets() {
        let model = KinematicModel::default();
        let pose = Pose::identity(&model);
        let cal = compute_calibration(&raw_frame([Rotation::identity(); 4]), &pose, &model).unwrap();
        assert!(close(&cal.heading, &Rotation::identity(), 1e-12));
        for o in &cal.offsets {
            assert!(close(o, &Rotation::identity(), 1e-12));
        }
    }

    #[test]
    fn identity_calibration_leaves_frame_unchanged() {
        let f = raw_frame([Rotation::about_x(0.2), Rotation::about_y(1.0), Rotation::about_z(-0.4), Rotation::identity()]);
        let out = apply_calibration(&CalibrationResult::identity(), &f);
        for s in 0..4 {
            assert_eq!(out.acc[s], f.acc[s]);
            assert!((out.ori[s].into_inner() - f.ori[s].into_inner()).norm() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_unit_orientation() {
        let model = KinematicModel::default();
        let mut f = raw_frame([Rotation::identity(); 4]);
        f.ori[2] = nalgebra::UnitQuaternion::new_unchecked(Quaternion::new(2.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            compute_calibration(&f, &Pose::identity(&model), &model),
            Err(CalibrationError::NonOrthonormalInput { sensor: "right_forearm", .. })
        ));
    }

    #[test]
    fn record_round_trip() {
        let cal = CalibrationResult {
            heading: Rotation::about_y(0.7),
            offsets: [Rotation::about_x(0.1), Rotation::about_y(0.2), Rotation::about_z(0.3), Rotation::identity()],
            timestamp: 2.25,
        };
        let back = CalibrationResult::from_record(&cal.to_record()).unwrap();
        assert_eq!(back.timestamp, cal.timestamp);
        assert!(close(&back.heading, &cal.heading, 1e-12));
        for s in 0..4 {
            assert!(close(&back.offsets[s], &cal.offsets[s], 1e-12));
        }
        assert!(CalibrationResult::from_record("imupose-calibration v1\ntimestamp 0\n").is_err());
    }
}
