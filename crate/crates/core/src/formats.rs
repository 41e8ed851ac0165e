//! Text formats for motion and IMU recordings.
//!
//! Both formats are line oriented. A fixed header of `key value` lines
//! follows the version line, then one line per frame with space-separated
//! numbers. Floats are written with Rust's shortest round-trip formatting, so
//! reading a written file reproduces every value bit for bit.
//!
//! Motion body line: `root_x root_y root_z` then `w x y z` for every joint in
//! header order.
//!
//! IMU body line: `timestamp` then, for each sensor in the order
//! `pelvis_or_chair left_forearm right_forearm head`, `ax ay az qw qx qy qz`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::body_model::{unit_quaternion, KinematicModel, Pose, Rotation, Sensor};
use crate::synthesis::{ImuFrame, ImuSequence, MotionSequence, MotionType};

pub const MOTION_FORMAT_VERSION: &str = "imupose-motion v1";
pub const IMU_FORMAT_VERSION: &str = "imupose-imu v1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl FormatError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        FormatError::Parse { line, message: message.into() }
    }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|source| FormatError::Io { path: dir.display().to_string(), source })?;
        }
    }
    std::fs::write(path, text).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { inner: text.lines().enumerate(), last: 0 }
    }

    /// Next non-blank, non-comment line with its 1-based number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let t = l.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((i + 1, t));
            }
        }
        None
    }

    fn expect(&mut self) -> Result<(usize, &'a str), FormatError> {
        self.next_content().ok_or_else(|| FormatError::parse(self.last + 1, "unexpected end of file"))
    }

    fn header(&mut self, key: &str) -> Result<(usize, &'a str), FormatError> {
        let (n, line) = self.expect()?;
        match line.split_once(char::is_whitespace) {
            Some((k, v)) if k == key => Ok((n, v.trim())),
            None if line == key => Ok((n, "")),
            _ => Err(FormatError::parse(n, format!("expected '{key}' header, found '{line}'"))),
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, FormatError>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| FormatError::parse(line, format!("bad number '{s}': {e}")))
}

fn parse_floats(line: usize, s: &str, expected: usize) -> Result<Vec<f64>, FormatError> {
    let v = s.split_whitespace().map(|f| parse_num::<f64>(line, f)).collect::<Result<Vec<_>, _>>()?;
    if v.len() != expected {
        return Err(FormatError::parse(line, format!("expected {expected} numbers, found {}", v.len())));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(FormatError::parse(line, format!("non-finite value {bad}")));
    }
    Ok(v)
}

fn motion_type_field(t: Option<MotionType>) -> &'static str {
    t.map(MotionType::name).unwrap_or("-")
}

fn parse_motion_type(line: usize, s: &str) -> Result<Option<MotionType>, FormatError> {
    if s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e: String| FormatError::parse(line, e))
    }
}

fn tag_field(tag: &str) -> String {
    if tag.is_empty() {
        "-".into()
    } else {
        tag.split_whitespace().collect::<Vec<_>>().join("_")
    }
}

fn parse_tag(s: &str) -> String {
    if s == "-" {
        String::new()
    } else {
        s.to_string()
    }
}

pub fn motion_to_string(model: &KinematicModel, motion: &MotionSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MOTION_FORMAT_VERSION}");
    let _ = writeln!(out, "frame_rate {}", motion.frame_rate);
    let _ = writeln!(out, "joints {}", model.joint_count());
    let names: Vec<&str> = model.joints.iter().map(|j| j.name.as_str()).collect();
    let _ = writeln!(out, "names {}", names.join(" "));
    let _ = writeln!(out, "subject {}", tag_field(&motion.subject_tag));
    let _ = writeln!(out, "motion_type {}", motion_type_field(motion.motion_type));
    let _ = writeln!(out, "start_frame {}", motion.start_frame);
    let _ = writeln!(out, "frames {}", motion.len());
    for pose in &motion.frames {
        let p = pose.root_position;
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        for r in &pose.local_rotations {
            let q = r.quaternion();
            let _ = write!(out, " {} {} {} {}", q.w, q.i, q.j, q.k);
        }
        out.push('\n');
    }
    out
}

pub fn motion_from_str(model: &KinematicModel, text: &str) -> Result<MotionSequence, FormatError> {
    let mut lines = Lines::new(text);
    let (n, v) = lines.expect()?;
    if v != MOTION_FORMAT_VERSION {
        return Err(FormatError::parse(n, format!("expected '{MOTION_FORMAT_VERSION}', found '{v}'")));
    }
    let (n, v) = lines.header("frame_rate")?;
    let frame_rate: f64 = parse_num(n, v)?;
    if !(frame_rate > 0.0) {
        return Err(FormatError::parse(n, "frame rate must be positive"));
    }
    let (n, v) = lines.header("joints")?;
    let joints: usize = parse_num(n, v)?;
    if joints != model.joint_count() {
        return Err(FormatError::parse(n, format!("file has {joints} joints, skeleton has {}", model.joint_count())));
    }
    let (n, v) = lines.header("names")?;
    let names: Vec<&str> = v.split_whitespace().collect();
    if names.len() != joints || names.iter().zip(&model.joints).any(|(a, b)| *a != b.name) {
        return Err(FormatError::parse(n, "joint names do not match the skeleton"));
    }
    let (_, v) = lines.header("subject")?;
    let subject_tag = parse_tag(v);
    let (n, v) = lines.header("motion_type")?;
    let motion_type = parse_motion_type(n, v)?;
    let (n, v) = lines.header("start_frame")?;
    let start_frame: usize = parse_num(n, v)?;
    let (n, v) = lines.header("frames")?;
    let count: usize = parse_num(n, v)?;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines.expect()?;
        let vals = parse_floats(n, line, 3 + 4 * joints)?;
        let mut local_rotations = Vec::with_capacity(joints);
        for j in 0..joints {
            let q = &vals[3 + 4 * j..7 + 4 * j];
            let uq = unit_quaternion(q[0], q[1], q[2], q[3])
                .map_err(|e| FormatError::parse(n, format!("joint {}: {e}", model.joints[j].name)))?;
            local_rotations.push(Rotation::from_quaternion(&uq));
        }
        frames.push(Pose { local_rotations, root_position: Vector3::new(vals[0], vals[1], vals[2]) });
    }
    if let Some((n, _)) = lines.next_content() {
        return Err(FormatError::parse(n, "trailing data after the declared frame count"));
    }
    Ok(MotionSequence { frame_rate, frames, subject_tag, motion_type, start_frame })
}

pub fn imu_to_string(seq: &ImuSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{IMU_FORMAT_VERSION}");
    let _ = writeln!(out, "frame_rate {}", seq.frame_rate);
    let _ = writeln!(out, "subject {}", tag_field(&seq.subject_tag));
    let _ = writeln!(out, "motion_type {}", motion_type_field(seq.motion_type));
    let _ = writeln!(out, "start_frame {}", seq.start_frame);
    let _ = writeln!(out, "frames {}", seq.len());
    for f in &seq.frames {
        let _ = write!(out, "{}", f.timestamp);
        for s in Sensor::ALL {
            let a = f.acc[s.index()];
            let q = f.ori[s.index()];
            let _ = write!(out, " {} {} {} {} {} {} {}", a.x, a.y, a.z, q.w, q.i, q.j, q.k);
        }
        out.push('\n');
    }
    out
}

pub fn imu_from_str(text: &str) -> Result<ImuSequence, FormatError> {
    let mut lines = Lines::new(text);
    let (n, v) = lines.expect()?;
    if v != IMU_FORMAT_VERSION {
        return Err(FormatError::parse(n, format!("expected '{IMU_FORMAT_VERSION}', found '{v}'")));
    }
    let (n, v) = lines.header("frame_rate")?;
    let frame_rate: f64 = parse_num(n, v)?;
    if !(frame_rate > 0.0) {
        return Err(FormatError::parse(n, "frame rate must be positive"));
    }
    let (_, v) = lines.header("subject")?;
    let subject_tag = parse_tag(v);
    let (n, v) = lines.header("motion_type")?;
    let motion_type = parse_motion_type(n, v)?;
    let (n, v) = lines.header("start_frame")?;
    let start_frame: usize = parse_num(n, v)?;
    let (n, v) = lines.header("frames")?;
    let count: usize = parse_num(n, v)?;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines.expect()?;
        let vals = parse_floats(n, line, 29)?;
        let mut acc = [Vector3::zeros(); 4];
        let mut ori = [nalgebra::UnitQuaternion::identity(); 4];
        for s in 0..4 {
            let b = 1 + 7 * s;
            acc[s] = Vector3::new(vals[b], vals[b + 1], vals[b + 2]);
            ori[s] = unit_quaternion(vals[b + 3], vals[b + 4], vals[b + 5], vals[b + 6])
                .map_err(|e| FormatError::parse(n, format!("sensor {}: {e}", Sensor::ALL[s].name())))?;
        }
        frames.push(ImuFrame { timestamp: vals[0], acc, ori });
    }
    if let Some((n, _)) = lines.next_content() {
        return Err(FormatError::parse(n, "trailing data after the declared frame count"));
    }
    Ok(ImuSequence { frame_rate, frames, subject_tag, motion_type, start_frame })
}

pub fn read_motion(model: &KinematicModel, path: &Path) -> Result<MotionSequence, FormatError> {
    motion_from_str(model, &read_text(path)?)
}

pub fn write_motion(model: &KinematicModel, motion: &MotionSequence, path: &Path) -> Result<(), FormatError> {
    write_text(path, &motion_to_string(model, motion))
}

pub fn read_imu(path: &Path) -> Result<ImuSequence, FormatError> {
    imu_from_str(&read_text(path)?)
}

pub fn write_imu(seq: &ImuSequence, path: &Path) -> Result<(), FormatError> {
    write_text(path, &imu_to_string(seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{generate_synthetic_corpus, synthesize_imu, CorpusConfig};

    #[test]
    fn imu_round_trip_is_exact() {
        let model = KinematicModel::default();
        let cfg = CorpusConfig { sequences_per_type: 1, frames: 40, ..Default::default() };
        let motion = &generate_synthetic_corpus(&model, &cfg, 3)[4];
        let imu = synthesize_imu(&model, motion, 4).unwrap();
        let back = imu_from_str(&imu_to_string(&imu)).unwrap();
        assert_eq!(back, imu);
    }

    #[test]
    fn motion_round_trip_preserves_rotations() {
        let model = KinematicModel::default();
        let cfg = CorpusConfig { sequences_per_type: 1, frames: 12, ..Default::default() };
        let motion = &generate_synthetic_corpus(&model, &cfg, 3)[2];
        let text = motion_to_string(&model, motion);
        let back = motion_from_str(&model, &text).unwrap();
        assert_eq!(back.len(), motion.len());
        assert_eq!(back.motion_type, motion.motion_type);
        for (a, b) in back.frames.iter().zip(&motion.frames) {
            assert_eq!(a.root_position, b.root_position);
            for (ra, rb) in a.local_rotations.iter().zip(&b.local_rotations) {
                assert!((ra.matrix() - rb.matrix()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn parse_errors_report_lines() {
        let bad = "imupose-imu v1\nframe_rate 60\nsubject -\nmotion_type -\nstart_frame 0\nframes 1\n0 1 2\n";
        match imu_from_str(bad) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(imu_from_str("imupose-imu v2\n").is_err());
    }
}
