//! Evaluation metrics: joint angular error, pelvis-aligned position errors,
//! mesh error, jitter, and the sensor-similarity statistics used to justify
//! treating the chair as a proxy for the pelvis.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::body_model::{forward_kinematics, quat_distance, BodyModelError, FkResult, KinematicModel, Pose, Rotation};
use crate::synthesis::MotionType;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sequence has {frames} frames, need at least {required}")]
    SequenceTooShort { frames: usize, required: usize },
    #[error("sequences differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("axis {axis} has zero variance")]
    ZeroVariance { axis: usize },
    #[error(transparent)]
    Body(#[from] BodyModelError),
}

/// The six reported metrics, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    AngErr,
    PosErr,
    MeshErr,
    Jitter,
    WristPosErr,
    ElbowPosErr,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::AngErr, Metric::PosErr, Metric::MeshErr, Metric::Jitter, Metric::WristPosErr, Metric::ElbowPosErr];

    pub fn column(self) -> &'static str {
        match self {
            Metric::AngErr => "Ang Err",
            Metric::PosErr => "Pos Err",
            Metric::MeshErr => "Mesh Err",
            Metric::Jitter => "Jitter",
            Metric::WristPosErr => "Wrist Pos Err",
            Metric::ElbowPosErr => "Elbow Pos Err",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::AngErr => "deg",
            Metric::Jitter => "m/s^3",
            _ => "cm",
        }
    }
}

/// Mean of the geodesic angles, in degrees, between predicted and true global
/// rotations of the upper-body joints.
pub fn angular_error(model: &KinematicModel, pred: &Pose, gt: &Pose) -> Result<f64, MetricsError> {
    let (a, b) = (forward_kinematics(model, pred)?, forward_kinematics(model, gt)?);
    Ok(angular_error_fk(model, &a, &b))
}

fn angular_error_fk(model: &KinematicModel, a: &FkResult, b: &FkResult) -> f64 {
    let sum: f64 = model.upper_body.iter().map(|&j| a.rotations[j].angle_to(&b.rotations[j])).sum();
    (sum / model.upper_body.len() as f64).to_degrees()
}

fn aligned_distance(a: &[Vector3<f64>], a0: &Vector3<f64>, b: &[Vector3<f64>], b0: &Vector3<f64>) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(p, q)| ((p - a0) - (q - b0)).norm()).sum();
    100.0 * sum / a.len().max(1) as f64
}

/// Mean distance in cm over `joints` after translating both poses so their
/// pelvis joints coincide.
pub fn position_error(model: &KinematicModel, pred: &Pose, gt: &Pose, joints: &[usize]) -> Result<f64, MetricsError> {
    let (a, b) = (forward_kinematics(model, pred)?, forward_kinematics(model, gt)?);
    Ok(position_error_fk(&a, &b, joints))
}

fn position_error_fk(a: &FkResult, b: &FkResult, joints: &[usize]) -> f64 {
    let pa: Vec<_> = joints.iter().map(|&j| a.positions[j]).collect();
    let pb: Vec<_> = joints.iter().map(|&j| b.positions[j]).collect();
    aligned_distance(&pa, &a.positions[0], &pb, &b.positions[0])
}

/// As [`position_error`] over every proxy mesh vertex.
pub fn mesh_error(model: &KinematicModel, pred: &Pose, gt: &Pose) -> Result<f64, MetricsError> {
    let (a, b) = (forward_kinematics(model, pred)?, forward_kinematics(model, gt)?);
    Ok(mesh_error_fk(model, &a, &b))
}

fn mesh_error_fk(model: &KinematicModel, a: &FkResult, b: &FkResult) -> f64 {
    aligned_distance(&a.mesh_positions(model), &a.positions[0], &b.mesh_positions(model), &b.positions[0])
}

/// Jerk magnitude per frame, averaged over the tracked points: third forward
/// difference times `frame_rate³`. `positions[t]` holds every point at frame
/// `t`; the result has `T - 3` entries.
pub fn jerk_per_frame(positions: &[Vec<Vector3<f64>>], frame_rate: f64) -> Result<Vec<f64>, MetricsError> {
    if positions.len() < 4 {
        return Err(MetricsError::SequenceTooShort { frames: positions.len(), required: 4 });
    }
    let k = frame_rate.powi(3);
    Ok(positions
        .windows(4)
        .map(|w| {
            let n = w[0].len().max(1) as f64;
            let sum: f64 = (0..w[0].len()).map(|j| (w[3][j] - w[2][j] * 3.0 + w[1][j] * 3.0 - w[0][j]).norm()).sum();
            k * sum / n
        })
        .collect())
}

/// Mean jerk in m/s³.
pub fn jitter(positions: &[Vec<Vector3<f64>>], frame_rate: f64) -> Result<f64, MetricsError> {
    let per = jerk_per_frame(positions, frame_rate)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Upper-body joint positions of every frame, relative to the pelvis joint
/// when `pelvis_aligned` is set.
pub fn upper_body_trajectory(model: &KinematicModel, poses: &[Pose], pelvis_aligned: bool) -> Result<Vec<Vec<Vector3<f64>>>, MetricsError> {
    poses
        .iter()
        .map(|p| {
            let fk = forward_kinematics(model, p)?;
            let origin = if pelvis_aligned { fk.positions[0] } else { Vector3::zeros() };
            Ok(model.upper_body.iter().map(|&j| fk.positions[j] - origin).collect())
        })
        .collect()
}

/// Pearson correlation of each axis.
pub fn correlation_by_axis(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<[f64; 3], MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::SequenceTooShort { frames: a.len(), required: 2 });
    }
    let n = a.len() as f64;
    let mut out = [0.0; 3];
    for (axis, o) in out.iter_mut().enumerate() {
        let ma = a.iter().map(|v| v[axis]).sum::<f64>() / n;
        let mb = b.iter().map(|v| v[axis]).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (da, db) = (x[axis] - ma, y[axis] - mb);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
        if saa == 0.0 || sbb == 0.0 {
            return Err(MetricsError::ZeroVariance { axis });
        }
        *o = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Mean and population standard deviation of `1 - |q_a · q_b|` per frame.
pub fn orientation_similarity_stats(a: &[Rotation], b: &[Rotation]) -> Result<(f64, f64), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| quat_distance(x.quaternion().as_ref(), y.quaternion().as_ref()))
        .collect::<Result<_, _>>()?;
    let s = Stat::of(&d);
    Ok((s.mean, s.std))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    /// NaN mean and deviation for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Stat { mean, std: var.sqrt(), count: n }
    }
}

/// Per-frame values of every metric, gathered over one or more sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSamples {
    pub values: [Vec<f64>; 6],
}

impl MetricSamples {
    pub fn extend(&mut self, other: &MetricSamples) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.extend_from_slice(b);
        }
    }

    pub fn row(&self) -> [Stat; 6] {
        std::array::from_fn(|i| Stat::of(&self.values[i]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Compute jitter on pelvis-relative positions.
    pub pelvis_aligned_jitter: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { pelvis_aligned_jitter: true }
    }
}

/// Every metric at every frame of an aligned prediction and ground truth.
pub fn evaluate_sequence(
    model: &KinematicModel,
    pred: &[Pose],
    gt: &[Pose],
    frame_rate: f64,
    options: &EvalOptions,
) -> Result<MetricSamples, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { a: pred.len(), b: gt.len() });
    }
    let wrists: Vec<usize> = ["l_wrist", "r_wrist"].iter().filter_map(|n| model.joint_index(n)).collect();
    let elbows: Vec<usize> = ["l_elbow", "r_elbow"].iter().filter_map(|n| model.joint_index(n)).collect();
    let mut s = MetricSamples::default();
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (forward_kinematics(model, p)?, forward_kinematics(model, g)?);
        s.values[0].push(angular_error_fk(model, &a, &b));
        s.values[1].push(position_error_fk(&a, &b, &model.upper_body));
        s.values[2].push(mesh_error_fk(model, &a, &b));
        s.values[4].push(position_error_fk(&a, &b, &wrists));
        s.values[5].push(position_error_fk(&a, &b, &elbows));
    }
    let traj = upper_body_trajectory(model, pred, options.pelvis_aligned_jitter)?;
    s.values[3] = jerk_per_frame(&traj, frame_rate)?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: [Stat; 6],
    /// One row per motion category, in category order, when any input was tagged.
    pub per_type: Vec<(MotionType, [Stat; 6])>,
}

/// One evaluated sequence and its optional category.
#[derive(Clone, Debug)]
pub struct TaggedSamples {
    pub motion_type: Option<MotionType>,
    pub samples: MetricSamples,
}

impl EvalReport {
    pub fn from_samples(items: &[TaggedSamples]) -> Self {
        let mut all = MetricSamples::default();
        for it in items {
            all.extend(&it.samples);
        }
        let per_type = if items.iter().any(|i| i.motion_type.is_some()) {
            MotionType::ALL
                .iter()
                .map(|&t| {
                    let mut m = MetricSamples::default();
                    for it in items.iter().filter(|i| i.motion_type == Some(t)) {
                        m.extend(&it.samples);
                    }
                    (t, m.row())
                })
                .collect()
        } else {
            Vec::new()
        };
        EvalReport { overall: all.row(), per_type }
    }

    fn rows(&self) -> Vec<(String, &[Stat; 6])> {
        let mut rows = vec![("overall".to_string(), &self.overall)];
        rows.extend(self.per_type.iter().map(|(t, r)| (t.name().to_string(), r)));
        rows
    }

    /// Header `group,stat,<six metric columns>`; a mean row and a std row
    /// per group. Jitter is in m/s³, angles in degrees, distances in cm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,stat");
        for m in Metric::ALL {
            out.push(',');
            out.push_str(m.column());
        }
        out.push('\n');
        for (name, row) in self.rows() {
            for (label, pick) in [("mean", 0), ("std", 1)] {
                let _ = write!(out, "{name},{label}");
                for s in row {
                    let v = if pick == 0 { s.mean } else { s.std };
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Aligned text table of `mean (std)` cells. Jitter is shown ×10⁻².
    pub fn to_table(&self) -> String {
        let header: Vec<String> = std::iter::once("Group".to_string()).chain(Metric::ALL.iter().map(|m| m.column().to_string())).collect();
        let units: Vec<String> = std::iter::once(String::new())
            .chain(Metric::ALL.iter().map(|m| if *m == Metric::Jitter { "(m/s^3 x1e-2)".into() } else { format!("({})", m.unit()) }))
            .collect();
        let mut lines = vec![header, units];
        for (name, row) in self.rows() {
            let mut line = vec![name];
            for (m, s) in Metric::ALL.iter().zip(row) {
                let k = if *m == Metric::Jitter { 1e-2 } else { 1.0 };
                line.push(if s.count == 0 { "n/a".into() } else { format!("{:.2} ({:.2})", s.mean * k, s.std * k) });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..7).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn one_joint_off_by_thirty_degrees() {
        let model = KinematicModel::default();
        let gt = Pose::identity(&model);
        let mut pred = gt.clone();
        let head = model.joint_index("head").unwrap();
        pred.local_rotations[head] = Rotation::about_axis(&Vector3::new(1.0, 2.0, -0.5), 30f64.to_radians());
        assert_relative_eq!(angular_error(&model, &pred, &gt).unwrap(), 30.0 / 16.0, epsilon = 1e-12);
        assert_eq!(angular_error(&model, &gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn translation_does_not_count() {
        let model = KinematicModel::default();
        let gt = Pose::identity(&model);
        let mut moved = gt.clone();
        moved.root_position += Vector3::new(1.0, 0.0, 0.0);
        assert!(position_error(&model, &moved, &gt, &model.upper_body).unwrap() < 1e-12);
        assert!(mesh_error(&model, &moved, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn cubic_trajectory_has_constant_jerk() {
        let c = 0.7;
        let fr = 60.0;
        let traj: Vec<Vec<Vector3<f64>>> =
            (0..20).map(|t| vec![Vector3::new(c * (t as f64 / fr).powi(3), 0.0, 0.0)]).collect();
        for j in jerk_per_frame(&traj, fr).unwrap() {
            assert_relative_eq!(j, 6.0 * c, max_relative = 1e-9);
        }
        let quad: Vec<Vec<Vector3<f64>>> = (0..10).map(|t| vec![Vector3::new(1.0, 2.0 * t as f64, 0.5 * (t * t) as f64)]).collect();
        assert!(jitter(&quad, fr).unwrap() < 1e-6);
        assert!(matches!(jitter(&quad[..3], fr), Err(MetricsError::SequenceTooShort { .. })));
    }

    #[test]
    fn correlation_cases() {
        let a: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.3).cos(), i as f64)).collect();
        let neg: Vec<_> = a.iter().map(|v| -v).collect();
        let affine: Vec<_> = a.iter().map(|v| v * 2.0 + Vector3::repeat(3.0)).collect();
        for (b, expect) in [(&a, 1.0), (&neg, -1.0), (&affine, 1.0)] {
            for r in correlation_by_axis(&a, b).unwrap() {
                assert_relative_eq!(r, expect, epsilon = 1e-12);
            }
        }
        let flat = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        assert!(matches!(correlation_by_axis(&flat, &flat), Err(MetricsError::ZeroVariance { axis: 0 })));
    }

    #[test]
    fn orientation_stats_for_a_fixed_offset() {
        let a: Vec<Rotation> = (0..10).map(|i| Rotation::about_y(0.1 * i as f64)).collect();
        let b: Vec<Rotation> = a.iter().map(|r| *r * Rotation::about_x(std::f64::consts::FRAC_PI_2)).collect();
        let (m, s) = orientation_similarity_stats(&a, &b).unwrap();
        assert_relative_eq!(m, 1.0 - 45f64.to_radians().cos(), epsilon = 1e-12);
        assert!(s < 1e-12);
        let (m0, s0) = orientation_similarity_stats(&a, &a).unwrap();
        assert!(m0 < 1e-12 && s0 < 1e-12);
    }

    #[test]
    fn report_layout() {
        let model = KinematicModel::default();
        let poses = vec![Pose::identity(&model); 6];
        let s = evaluate_sequence(&model, &poses, &poses, 60.0, &EvalOptions::default()).unwrap();
        let r = EvalReport::from_samples(&[TaggedSamples { motion_type: Some(MotionType::Arm), samples: s }]);
        let csv = r.to_csv();
        assert!(csv.starts_with("group,stat,Ang Err,Pos Err,Mesh Err,Jitter,Wrist Pos Err,Elbow Pos Err\n"));
        assert_eq!(r.per_type.len(), 5);
        assert!(r.overall.iter().all(|s| s.mean < 1e-9), "{:?}", r.overall);
        assert!(r.to_table().contains("upper_body"));
    }
}
