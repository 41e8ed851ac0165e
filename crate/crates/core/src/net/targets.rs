//! Supervision targets derived from ground-truth poses, and decoding of
//! network outputs back into poses.

use super::{NetError, NetworkConfig, Variant};
use crate::body_model::{forward_kinematics, matrix_to_rot6d, rot6d_to_matrix, KinematicModel, Pose};
use crate::synthesis::MotionSequence;

/// Joints whose positions the first of three stages predicts.
pub const LEAF_JOINT_NAMES: [&str; 3] = ["head", "l_wrist", "r_wrist"];

pub fn leaf_joints(model: &KinematicModel) -> Result<[usize; 3], NetError> {
    let mut out = [0; 3];
    for (o, name) in out.iter_mut().zip(LEAF_JOINT_NAMES) {
        *o = model.joint_index(name).ok_or_else(|| NetError::InvalidConfig(format!("skeleton has no joint '{name}'")))?;
    }
    Ok(out)
}

/// Targets for one frame. Positions are relative to the pelvis and expressed
/// in the pelvis frame, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    /// Head, left wrist, right wrist (9 values).
    pub leaf_positions: Vec<f64>,
    /// Every upper-body joint in model order (48 values).
    pub joint_positions: Vec<f64>,
    /// 6D rotation per upper-body joint (96 values): the pelvis in the global
    /// frame, every other joint relative to its parent.
    pub pose6d: Vec<f64>,
}

impl FrameTargets {
    /// Target vector for each stage of `config`.
    pub fn for_config(&self, config: &NetworkConfig) -> Vec<Vec<f64>> {
        match config.variant {
            Variant::SingleStage => vec![self.pose6d.clone()],
            Variant::ThreeStage => vec![self.leaf_positions.clone(), self.joint_positions.clone(), self.pose6d.clone()],
        }
    }
}

pub fn pose_targets(model: &KinematicModel, pose: &Pose) -> Result<FrameTargets, NetError> {
    let fk = forward_kinematics(model, pose)?;
    let root = fk.rotations[0].inverse();
    let origin = fk.positions[0];
    let rel = |j: usize| root.apply(&(fk.positions[j] - origin));
    let leaf_positions = leaf_joints(model)?.iter().flat_map(|&j| rel(j).iter().copied().collect::<Vec<_>>()).collect();
    let joint_positions = model.upper_body.iter().flat_map(|&j| rel(j).iter().copied().collect::<Vec<_>>()).collect();
    let pose6d = model.upper_body.iter().flat_map(|&j| matrix_to_rot6d(&pose.local_rotations[j])).collect();
    Ok(FrameTargets { leaf_positions, joint_positions, pose6d })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTargets {
    /// Motion-frame index of `frames[0]`.
    pub start_frame: usize,
    pub frames: Vec<FrameTargets>,
}

pub fn sequence_targets(model: &KinematicModel, motion: &MotionSequence) -> Result<SequenceTargets, NetError> {
    let frames = motion.frames.iter().map(|p| pose_targets(model, p)).collect::<Result<Vec<_>, _>>()?;
    Ok(SequenceTargets { start_frame: motion.start_frame, frames })
}

/// Turns a 96-value 6D vector into a full pose: upper-body rotations from
/// the vector, identity for every other joint, root at the origin.
pub fn decode_pose(model: &KinematicModel, pose6d: &[f64]) -> Result<Pose, NetError> {
    let expected = 6 * model.upper_body.len();
    if pose6d.len() != expected {
        return Err(NetError::ShapeMismatch(format!("pose vector has {} values, expected {expected}", pose6d.len())));
    }
    let mut pose = Pose::identity(model);
    for (slot, &j) in model.upper_body.iter().enumerate() {
        let r: [f64; 6] = pose6d[6 * slot..6 * slot + 6].try_into().expect("six values");
        pose.local_rotations[j] = rot6d_to_matrix(&r)?;
    }
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::Rotation;

    #[test]
    fn targets_round_trip_through_decoding() {
        let model = KinematicModel::default();
        let mut pose = Pose::identity(&model);
        pose.local_rotations[0] = Rotation::about_y(0.4);
        pose.local_rotations[model.joint_index("l_elbow").unwrap()] = Rotation::about_x(-0.9);
        let t = pose_targets(&model, &pose).unwrap();
        assert_eq!((t.leaf_positions.len(), t.joint_positions.len(), t.pose6d.len()), (9, 48, 96));
        let back = decode_pose(&model, &t.pose6d).unwrap();
        for &j in &model.upper_body {
            assert!((back.local_rotations[j].matrix() - pose.local_rotations[j].matrix()).norm() < 1e-12);
        }
        // Pelvis-frame positions ignore the pelvis heading.
        let mut turned = pose.clone();
        turned.local_rotations[0] = Rotation::about_y(-1.3);
        let t2 = pose_targets(&model, &turned).unwrap();
        for (a, b) in t.joint_positions.iter().zip(&t2.joint_positions) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_prediction_is_reported() {
        let model = KinematicModel::default();
        assert!(matches!(decode_pose(&model, &[0.0; 96]), Err(NetError::Body(_))));
        assert!(decode_pose(&model, &[0.0; 95]).is_err());
    }
}
