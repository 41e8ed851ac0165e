//! Parameterized seated upper-body motions.
//!
//! Every motion is a sum of minimum-jerk moves laid over a seated base
//! posture, so trajectories are smooth and accelerations stay bounded.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MotionSequence, MotionType, DEFAULT_FRAME_RATE};
use crate::body_model::{KinematicModel, Pose, Rotation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Sequences generated for every entry of `motion_types`.
    pub sequences_per_type: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub motion_types: Vec<MotionType>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sequences_per_type: 2,
            frames: 240,
            frame_rate: DEFAULT_FRAME_RATE,
            motion_types: MotionType::ALL.to_vec(),
        }
    }
}

impl Serialize for MotionType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MotionType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sitting with thighs forward, shins down and both arms hanging slightly
/// away from the trunk.
pub fn seated_base_pose(model: &KinematicModel) -> Pose {
    let mut pose = Pose::identity(model);
    let mut set = |name: &str, r: Rotation| {
        if let Some(j) = model.joint_index(name) {
            pose.local_rotations[j] = r;
        }
    };
    set("l_hip", Rotation::about_x(-PI / 2.0));
    set("r_hip", Rotation::about_x(-PI / 2.0));
    set("l_knee", Rotation::about_x(PI / 2.0));
    set("r_knee", Rotation::about_x(PI / 2.0));
    set("l_shoulder", Rotation::about_z(-70f64.to_radians()));
    set("r_shoulder", Rotation::about_z(70f64.to_radians()));
    set("l_elbow", Rotation::about_y(-15f64.to_radians()));
    set("r_elbow", Rotation::about_y(15f64.to_radians()));
    pose
}

fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Goes 0 -> 1 over `[t0, t0 + rise]`, holds, and returns to 0 over
/// `[t1, t1 + rise]`.
fn bump(t: f64, t0: f64, rise: f64, t1: f64) -> f64 {
    min_jerk((t - t0) / rise) - min_jerk((t - t1) / rise)
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
    Both,
}

/// Shoulder and elbow targets for one arm: plane of elevation `azimuth`
/// (0 = sideways, pi/2 = forward), elevation measured from horizontal, and
/// elbow flexion.
fn arm_rotations(left: bool, azimuth: f64, elevation: f64, flexion: f64) -> (Rotation, Rotation) {
    if left {
        (Rotation::about_y(-azimuth) * Rotation::about_z(elevation), Rotation::about_y(-flexion))
    } else {
        (Rotation::about_y(azimuth) * Rotation::about_z(-elevation), Rotation::about_y(flexion))
    }
}

struct Joints {
    pelvis: usize,
    spine: [usize; 3],
    neck: usize,
    head: usize,
    shoulder: [usize; 2],
    elbow: [usize; 2],
    wrist: [usize; 2],
}

impl Joints {
    fn find(model: &KinematicModel) -> Option<Joints> {
        let j = |n: &str| model.joint_index(n);
        Some(Joints {
            pelvis: 0,
            spine: [j("spine1")?, j("spine2")?, j("spine3")?],
            neck: j("neck")?,
            head: j("head")?,
            shoulder: [j("l_shoulder")?, j("r_shoulder")?],
            elbow: [j("l_elbow")?, j("r_elbow")?],
            wrist: [j("l_wrist")?, j("r_wrist")?],
        })
    }
}

/// Randomized parameters for one sequence.
struct Plan {
    kind: MotionType,
    duration: f64,
    heading: f64,
    // arm raise
    side: Side,
    azimuth: f64,
    elevation: f64,
    flexion: f64,
    raise_start: f64,
    raise_time: f64,
    hold_end: f64,
    // trunk
    lean: Vector3<f64>,
    lean_start: f64,
    lean_time: f64,
    lean_end: f64,
    // locomotion
    travel_dir: f64,
    stroke_len: f64,
    stroke_time: f64,
    yaw: f64,
    yaw_start: f64,
    yaw_time: f64,
    // secondary motion
    wrist_amp: f64,
    neck_amp: f64,
    phase: f64,
}

impl Plan {
    fn sample(kind: MotionType, duration: f64, rng: &mut ChaCha8Rng) -> Plan {
        let side = match rng.random_range(0..3) {
            0 => Side::Left,
            1 => Side::Right,
            _ => Side::Both,
        };
        let azimuth: f64 = [0.0, 45.0, 90.0][rng.random_range(0..3)];
        let overhead = rng.random_bool(0.25);
        let elevation: f64 = if overhead { rng.random_range(80.0..100.0) } else { rng.random_range(0.0..60.0) };
        let raise_start = duration * rng.random_range(0.08..0.2);
        let raise_time = duration * rng.random_range(0.2..0.3);
        let hold_end = raise_start + raise_time + duration * rng.random_range(0.05..0.15);
        let lean_start = duration * rng.random_range(0.05..0.2);
        let lean_time = duration * rng.random_range(0.2..0.35);
        Plan {
            kind,
            duration,
            heading: rng.random_range(-30f64..30.0).to_radians(),
            side,
            azimuth: azimuth.to_radians(),
            elevation: elevation.to_radians(),
            flexion: rng.random_range(5f64..60.0).to_radians(),
            raise_start,
            raise_time,
            hold_end,
            lean: Vector3::new(
                rng.random_range(-5f64..25.0).to_radians(),
                rng.random_range(-25f64..25.0).to_radians(),
                rng.random_range(-15f64..15.0).to_radians(),
            ),
            lean_start,
            lean_time,
            lean_end: lean_start + lean_time + duration * rng.random_range(0.05..0.2),
            travel_dir: rng.random_range(-0.4..0.4),
            stroke_len: rng.random_range(0.3..0.7),
            stroke_time: rng.random_range(0.7..1.1),
            yaw: rng.random_range(45f64..120.0).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            yaw_start: duration * rng.random_range(0.1..0.25),
            yaw_time: duration * rng.random_range(0.35..0.55),
            wrist_amp: rng.random_range(5f64..20.0).to_radians(),
            neck_amp: rng.random_range(3f64..12.0).to_radians(),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn pose_at(&self, t: f64, base: &Pose, j: &Joints) -> Pose {
        let mut pose = base.clone();
        let raise = matches!(self.kind, MotionType::Arm | MotionType::Combined);
        let trunk = matches!(self.kind, MotionType::UpperBody | MotionType::Combined);
        let travel = matches!(self.kind, MotionType::Translation | MotionType::Combined);
        let turn = matches!(self.kind, MotionType::Rotation | MotionType::Combined);
        let propel = travel || turn;

        let mut heading = self.heading;
        if turn {
            heading += self.yaw * min_jerk((t - self.yaw_start) / self.yaw_time);
        }
        pose.local_rotations[j.pelvis] = Rotation::about_y(heading);

        if travel {
            // Pushes of equal length separated by coasting: position is a
            // staircase of minimum-jerk steps.
            let cycles = t / self.stroke_time;
            let k = cycles.floor();
            let dist = self.stroke_len * (k + min_jerk((cycles - k) / 0.6));
            let dir = Rotation::about_y(self.heading + self.travel_dir).apply(&Vector3::new(0.0, 0.0, 1.0));
            pose.root_position = dir * dist;
        }

        if trunk {
            let s = bump(t, self.lean_start, self.lean_time, self.lean_end);
            let per = Rotation::from_axis_angle(&(self.lean * (s / 3.0)));
            for &sp in &j.spine {
                pose.local_rotations[sp] = per;
            }
        }

        let w = 2.0 * PI * t / self.duration;
        pose.local_rotations[j.neck] = Rotation::about_x(self.neck_amp * (w + self.phase).sin());
        pose.local_rotations[j.head] = Rotation::about_y(0.7 * self.neck_amp * (1.3 * w).sin());

        for (k, left) in [(0usize, true), (1usize, false)] {
            let mut elevation = -70f64.to_radians();
            let mut azimuth = 0.0;
            let mut flexion = 15f64.to_radians();
            let active = match self.side {
                Side::Left => left,
                Side::Right => !left,
                Side::Both => true,
            };
            if raise && active {
                let s = bump(t, self.raise_start, self.raise_time, self.hold_end);
                elevation += (self.elevation + 70f64.to_radians()) * s;
                azimuth = self.azimuth * min_jerk((t - self.raise_start) / self.raise_time);
                flexion += self.flexion * s;
            }
            if propel {
                // Pushing: arms swing forward and back in step with the
                // strokes; mirrored when turning on the spot.
                let dir = if turn && !travel && !left { -1.0 } else { 1.0 };
                let stroke = (2.0 * PI * t / self.stroke_time).sin();
                azimuth += 0.5 * (1.0 + dir * stroke) * 60f64.to_radians();
                flexion += 0.5 * (1.0 - dir * stroke) * 40f64.to_radians();
                elevation += 10f64.to_radians() * dir * stroke;
            }
            let (sh, el) = arm_rotations(left, azimuth, elevation, flexion);
            pose.local_rotations[j.shoulder[k]] = sh;
            pose.local_rotations[j.elbow[k]] = el;
            let sign = if left { 1.0 } else { -1.0 };
            pose.local_rotations[j.wrist[k]] = Rotation::about_x(sign * self.wrist_amp * (1.7 * w + self.phase).sin());
        }
        pose
    }
}

/// Deterministic for a given model, config and seed. Sequences come out
/// grouped by motion type in the order of `config.motion_types`.
pub fn generate_synthetic_corpus(model: &KinematicModel, config: &CorpusConfig, seed: u64) -> Vec<MotionSequence> {
    let joints = Joints::find(model).expect("corpus generation needs the default joint names");
    let base = seated_base_pose(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / config.frame_rate;
    let duration = config.frames as f64 * dt;
    let mut out = Vec::with_capacity(config.sequences_per_type * config.motion_types.len());
    for &kind in &config.motion_types {
        for i in 0..config.sequences_per_type {
            let plan = Plan::sample(kind, duration, &mut rng);
            let frames = (0..config.frames).map(|f| plan.pose_at(f as f64 * dt, &base, &joints)).collect();
            let mut seq = MotionSequence::new(config.frame_rate, frames, format!("{}_{i:03}", kind.name()));
            seq.motion_type = Some(kind);
            out.push(seq);
        }
    }
    out
}
