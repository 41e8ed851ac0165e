use imupose::body_model::{
    canonical_quaternion, forward_kinematics, matrix_to_rot6d, rot6d_to_matrix, KinematicModel, Pose, Rotation, Sensor,
};
use imupose::formats::{imu_from_str, imu_to_string, motion_from_str, motion_to_string};
use imupose::metrics::{angular_error, jitter, mesh_error, position_error};
use imupose::synthesis::{finite_difference_acceleration, normalize_frame, ImuFrame, ImuSequence, MotionSequence};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn quat() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 0.01)
        .prop_map(|(w, x, y, z)| canonical_quaternion(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))))
}

fn rotation() -> impl Strategy<Value = Rotation> {
    quat().prop_map(|q| Rotation::from_quaternion(&q))
}

fn pose(model: &KinematicModel) -> impl Strategy<Value = Pose> {
    (proptest::collection::vec(rotation(), model.joint_count()), vec3(2.0))
        .prop_map(|(local_rotations, root_position)| Pose { local_rotations, root_position })
}

fn imu_frame() -> impl Strategy<Value = ImuFrame> {
    (proptest::collection::vec(vec3(30.0), 4), proptest::collection::vec(quat(), 4), 0.0..100.0f64).prop_map(|(a, q, t)| {
        ImuFrame { timestamp: t, acc: std::array::from_fn(|i| a[i]), ori: std::array::from_fn(|i| q[i]) }
    })
}

proptest! {
    #[test]
    fn axis_angle_round_trip(r in rotation()) {
        let back = Rotation::from_axis_angle(&r.axis_angle());
        prop_assert!(back.angle_to(&r) < 1e-9);
        prop_assert!(r.axis_angle().norm() <= std::f64::consts::PI + 1e-12);
    }

    #[test]
    fn six_d_round_trip(r in rotation()) {
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
        prop_assert!((back.matrix() - r.matrix()).amax() < 1e-12);
    }

    #[test]
    fn six_d_decoding_is_orthonormal(v in proptest::array::uniform6(-3.0..3.0f64)) {
        prop_assume!(Vector3::new(v[0], v[1], v[2]).cross(&Vector3::new(v[3], v[4], v[5])).norm() > 1e-3);
        let r = rot6d_to_matrix(&v).unwrap();
        prop_assert!(r.orthonormality_error() < 1e-12);
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_equivariant(frame in imu_frame(), g in quat()) {
        let rotated = ImuFrame { timestamp: frame.timestamp, acc: frame.acc.map(|a| g * a), ori: frame.ori.map(|q| g * q) };
        let (a, b) = (normalize_frame(&frame), normalize_frame(&rotated));
        let gm = *Rotation::from_quaternion(&g).matrix();
        for s in Sensor::ALL {
            prop_assert!((a.acceleration(s) - b.acceleration(s)).amax() < 1e-9);
            let expected = if s == Sensor::PelvisOrChair { gm * a.orientation(s) } else { a.orientation(s) };
            prop_assert!((b.orientation(s) - expected).amax() < 1e-9);
        }
    }

    #[test]
    fn forward_kinematics_is_rigidly_invariant(p in pose(&KinematicModel::default()), g in rotation(), t in vec3(5.0)) {
        let model = KinematicModel::default();
        let mut moved = p.clone();
        moved.local_rotations[0] = g * p.local_rotations[0];
        moved.root_position = g.apply(&p.root_position) + t;
        let (a, b) = (forward_kinematics(&model, &p).unwrap(), forward_kinematics(&model, &moved).unwrap());
        for j in 0..model.joint_count() {
            prop_assert!((g.apply(&a.positions[j]) + t - b.positions[j]).amax() < 1e-9);
        }
    }

    #[test]
    fn bone_lengths_do_not_depend_on_pose(p in pose(&KinematicModel::default())) {
        let model = KinematicModel::default();
        let fk = forward_kinematics(&model, &p).unwrap();
        for (j, joint) in model.joints.iter().enumerate() {
            if let Some(parent) = joint.parent {
                prop_assert!(((fk.positions[j] - fk.positions[parent]).norm() - joint.offset.norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_acceleration_is_exact(a in vec3(2.0), b in vec3(2.0), c in vec3(2.0), n in 1usize..8, extra in 0usize..40) {
        let dt = 1.0 / 60.0;
        let p: Vec<_> = (0..2 * n + 1 + extra).map(|i| { let t = i as f64 * dt; a + b * t + c * t * t }).collect();
        for v in finite_difference_acceleration(&p, n, dt).unwrap() {
            prop_assert!((v - 2.0 * c).amax() < 1e-9);
        }
    }

    #[test]
    fn errors_vanish_on_identical_poses_and_are_symmetric(p in pose(&KinematicModel::default()), q in pose(&KinematicModel::default())) {
        let model = KinematicModel::default();
        prop_assert!(angular_error(&model, &p, &p).unwrap() < 1e-6);
        prop_assert!(position_error(&model, &p, &p, &model.upper_body).unwrap() < 1e-12);
        prop_assert!(mesh_error(&model, &p, &p).unwrap() < 1e-12);
        let (pq, qp) = (angular_error(&model, &p, &q).unwrap(), angular_error(&model, &q, &p).unwrap());
        prop_assert!((pq - qp).abs() < 1e-9);
        let (pq, qp) = (mesh_error(&model, &p, &q).unwrap(), mesh_error(&model, &q, &p).unwrap());
        prop_assert!((pq - qp).abs() < 1e-9);
    }

    #[test]
    fn position_error_ignores_a_common_root_shift(p in pose(&KinematicModel::default()), q in pose(&KinematicModel::default()), t in vec3(3.0)) {
        let model = KinematicModel::default();
        let before = position_error(&model, &p, &q, &model.upper_body).unwrap();
        let mut shifted = p.clone();
        shifted.root_position += t;
        let after = position_error(&model, &shifted, &q, &model.upper_body).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn jitter_of_a_cubic_is_its_constant_jerk(c in vec3(1.0), d in vec3(1.0), frames in 4usize..30) {
        let fr = 60.0;
        let traj: Vec<Vec<Vector3<f64>>> = (0..frames)
            .map(|i| { let t = i as f64 / fr; vec![d * t * t + c * t * t * t] })
            .collect();
        let j = jitter(&traj, fr).unwrap();
        prop_assert!((j - 6.0 * c.norm()).abs() < 1e-6 * (1.0 + 6.0 * c.norm()), "{} vs {}", j, 6.0 * c.norm());
    }

    #[test]
    fn imu_text_round_trip_is_exact(frames in proptest::collection::vec(imu_frame(), 1..6), start in 0usize..100) {
        let seq = ImuSequence { frame_rate: 60.0, frames, subject_tag: "s01".into(), motion_type: None, start_frame: start };
        let back = imu_from_str(&imu_to_string(&seq)).unwrap();
        prop_assert_eq!(back, seq);
    }

    #[test]
    fn motion_text_round_trip(poses in proptest::collection::vec(pose(&KinematicModel::default()), 1..4)) {
        let model = KinematicModel::default();
        let motion = MotionSequence::new(60.0, poses, "s02");
        let text = motion_to_string(&model, &motion);
        let back = motion_from_str(&model, &text).unwrap();
        prop_assert_eq!(back.len(), motion.len());
        for (a, b) in back.frames.iter().zip(&motion.frames) {
            prop_assert_eq!(a.root_position, b.root_position);
            for (x, y) in a.local_rotations.iter().zip(&b.local_rotations) {
                prop_assert!(x.angle_to(y) < 1e-12);
            }
        }
    }
}
