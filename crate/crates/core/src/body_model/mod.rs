//! Kinematic skeleton, rotations, forward kinematics and the proxy mesh.

mod rotation;
mod skeleton;

pub use rotation::{
    canonical_quaternion, left_jacobian, left_jacobian_rate, matrix_to_rot6d, orthonormality_error,
    quat_distance, rot6d_to_matrix, skew, unit_quaternion, unwrap_axis_angle, Rotation,
    DEGENERATE_NORM, UNIT_QUATERNION_TOLERANCE,
};
pub use skeleton::{
    forward_kinematics, proxy_mesh_positions, FkResult, Joint, KinematicModel, Pose, Sensor,
    SensorAttachment, DEFAULT_SKELETON, SKELETON_FORMAT_VERSION, UPPER_BODY_JOINT_COUNT,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyModelError {
    #[error("degenerate 6D rotation: {which} has norm {norm:e}")]
    DegenerateInput { which: &'static str, norm: f64 },
    #[error("quaternion norm {norm} is not unit")]
    NonUnitQuaternion { norm: f64 },
    #[error("matrix is not a rotation (orthonormality error {error:e})")]
    NotOrthonormal { error: f64 },
    #[error("pose has {got} joints, model has {expected}")]
    PoseLength { expected: usize, got: usize },
    #[error("skeleton config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid skeleton: {0}")]
    InvalidModel(String),
}
