use std::fmt::Write as _;

use nalgebra::Vector3;

use super::{BodyModelError, Rotation};

pub const SKELETON_FORMAT_VERSION: &str = "skeleton v1";
pub const UPPER_BODY_JOINT_COUNT: usize = 16;

/// The shipped 24-joint skeleton. Y is up, +X is the body's left, +Z faces
/// forward. Offsets are in meters and approximate a mean adult body.
///
/// The upper-body set is every joint above the pelvis plus the pelvis itself:
/// the spine chain, neck, head, both collars, shoulders, elbows, wrists and
/// hands.
pub const DEFAULT_SKELETON: &str = "\
skeleton v1
# joint <name> <parent or -> <offset x y z>
joint pelvis - 0 0 0
joint l_hip pelvis 0.0586 -0.0823 -0.0177
joint r_hip pelvis -0.0603 -0.0905 -0.0105
joint spine1 pelvis 0.0044 0.1244 -0.0384
joint l_knee l_hip 0.0434 -0.3865 0.0080
joint r_knee r_hip -0.0433 -0.3837 -0.0048
joint spine2 spine1 0.0045 0.1380 0.0268
joint l_ankle l_knee -0.0148 -0.4269 -0.0374
joint r_ankle r_knee 0.0191 -0.4200 -0.0346
joint spine3 spine2 -0.0023 0.0560 0.0029
joint l_foot l_ankle 0.0411 -0.0603 0.1220
joint r_foot r_ankle -0.0348 -0.0621 0.1303
joint neck spine3 -0.0134 0.2116 -0.0335
joint l_collar spine3 0.0717 0.1140 -0.0189
joint r_collar spine3 -0.0830 0.1125 -0.0237
joint head neck 0.0101 0.0889 0.0504
joint l_shoulder l_collar 0.1229 0.0452 -0.0190
joint r_shoulder r_collar -0.1132 0.0469 -0.0085
joint l_elbow l_shoulder 0.2553 -0.0156 -0.0229
joint r_elbow r_shoulder -0.2601 -0.0144 -0.0313
joint l_wrist l_elbow 0.2657 0.0127 -0.0074
joint r_wrist r_elbow -0.2691 0.0068 -0.0060
joint l_hand l_wrist 0.0867 -0.0106 -0.0156
joint r_hand r_wrist -0.0888 -0.0099 -0.0137
upper pelvis spine1 spine2 spine3 neck head l_collar r_collar l_shoulder r_shoulder l_elbow r_elbow l_wrist r_wrist l_hand r_hand
# sensor <id> <joint> <local offset x y z>
sensor pelvis_or_chair pelvis 0 0 0
sensor left_forearm l_elbow 0.2 0 0
sensor right_forearm r_elbow -0.2 0 0
sensor head head 0 0.09 0.02
";

/// The four instrumented sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sensor {
    PelvisOrChair,
    LeftForearm,
    RightForearm,
    Head,
}

impl Sensor {
    pub const ALL: [Sensor; 4] = [Sensor::PelvisOrChair, Sensor::LeftForearm, Sensor::RightForearm, Sensor::Head];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Sensor::PelvisOrChair => "pelvis_or_chair",
            Sensor::LeftForearm => "left_forearm",
            Sensor::RightForearm => "right_forearm",
            Sensor::Head => "head",
        }
    }

    pub fn from_name(name: &str) -> Option<Sensor> {
        Sensor::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the parent's rest frame.
    pub offset: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorAttachment {
    pub joint: usize,
    pub offset: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicModel {
    pub joints: Vec<Joint>,
    /// Joints predicted by the kinematics network, in output order.
    pub upper_body: Vec<usize>,
    /// Indexed by [`Sensor::index`].
    pub sensors: [SensorAttachment; 4],
    /// Rigidly attached stand-ins for mesh vertices: `(joint, local offset)`.
    pub proxy_vertices: Vec<(usize, Vector3<f64>)>,
}

impl Default for KinematicModel {
    fn default() -> Self {
        Self::from_config_str(DEFAULT_SKELETON).expect("embedded skeleton is valid")
    }
}

impl KinematicModel {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.joints[joint].parent
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints.iter().enumerate().filter(move |(_, j)| j.parent == Some(joint)).map(|(i, _)| i)
    }

    /// True when `ancestor` lies on the path from `joint` to the root
    /// (a joint counts as its own ancestor).
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            cur = self.joints[j].parent;
        }
        false
    }

    pub fn sensor(&self, s: Sensor) -> &SensorAttachment {
        &self.sensors[s.index()]
    }

    /// Position of `upper` within [`KinematicModel::upper_body`].
    pub fn upper_slot(&self, joint: usize) -> Option<usize> {
        self.upper_body.iter().position(|&j| j == joint)
    }

    /// Builds a model from joints, the upper-body set and sensors, checking
    /// every structural invariant. When `proxy_vertices` is empty a proxy
    /// vertex cloud is generated.
    pub fn new(
        joints: Vec<Joint>,
        upper_body: Vec<usize>,
        sensors: [SensorAttachment; 4],
        proxy_vertices: Vec<(usize, Vector3<f64>)>,
    ) -> Result<Self, BodyModelError> {
        let mut model = KinematicModel { joints, upper_body, sensors, proxy_vertices };
        if model.proxy_vertices.is_empty() {
            model.proxy_vertices = generate_proxy_vertices(&model);
        }
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), BodyModelError> {
        let bad = |m: String| Err(BodyModelError::InvalidModel(m));
        if self.joints.is_empty() {
            return bad("no joints".into());
        }
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || self.joints[0].parent.is_some() {
            return bad(format!("expected exactly one root at index 0, found {roots} roots"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return bad(format!("joint {} has parent index {p} not before it", j.name));
                }
            }
            if !j.offset.iter().all(|v| v.is_finite()) {
                return bad(format!("joint {} has a non-finite offset", j.name));
            }
        }
        if self.upper_body.len() != UPPER_BODY_JOINT_COUNT {
            return bad(format!("{} upper-body joints, need {UPPER_BODY_JOINT_COUNT}", self.upper_body.len()));
        }
        let mut seen = vec![false; self.joints.len()];
        for &u in &self.upper_body {
            if u >= self.joints.len() || seen[u] {
                return bad(format!("upper-body index {u} is out of range or repeated"));
            }
            seen[u] = true;
        }
        for s in &self.sensors {
            if s.joint >= self.joints.len() {
                return bad(format!("sensor attached to missing joint {}", s.joint));
            }
        }
        if let Some((j, _)) = self.proxy_vertices.iter().find(|(j, _)| *j >= self.joints.len()) {
            return bad(format!("proxy vertex attached to missing joint {j}"));
        }
        Ok(())
    }

    pub fn from_config_str(text: &str) -> Result<Self, BodyModelError> {
        let mut joints: Vec<Joint> = Vec::new();
        let mut upper: Option<Vec<usize>> = None;
        let mut sensors: [Option<SensorAttachment>; 4] = [None; 4];
        let mut vertices = Vec::new();
        let mut saw_header = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let err = |message: String| BodyModelError::Config { line: line_no, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != SKELETON_FORMAT_VERSION {
                    return Err(err(format!("expected header '{SKELETON_FORMAT_VERSION}', found '{line}'")));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let find = |name: &str, joints: &[Joint]| {
                joints.iter().position(|j| j.name == name).ok_or_else(|| err(format!("unknown joint '{name}'")))
            };
            let vec3 = |f: &[&str]| -> Result<Vector3<f64>, BodyModelError> {
                if f.len() != 3 {
                    return Err(err(format!("expected 3 numbers, found {}", f.len())));
                }
                let mut v = Vector3::zeros();
                for (k, s) in f.iter().enumerate() {
                    v[k] = s.parse::<f64>().map_err(|e| err(format!("bad number '{s}': {e}")))?;
                }
                Ok(v)
            };
            match fields[0] {
                "joint" => {
                    if fields.len() != 6 {
                        return Err(err("joint needs: name parent x y z".into()));
                    }
                    let parent = match fields[2] {
                        "-" => None,
                        p => Some(find(p, &joints)?),
                    };
                    if joints.iter().any(|j| j.name == fields[1]) {
                        return Err(err(format!("duplicate joint '{}'", fields[1])));
                    }
                    joints.push(Joint { name: fields[1].to_string(), parent, offset: vec3(&fields[3..])? });
                }
                "upper" => {
                    let idx = fields[1..].iter().map(|n| find(n, &joints)).collect::<Result<Vec<_>, _>>()?;
                    upper = Some(idx);
                }
                "sensor" => {
                    if fields.len() != 6 {
                        return Err(err("sensor needs: id joint x y z".into()));
                    }
                    let s = Sensor::from_name(fields[1]).ok_or_else(|| err(format!("unknown sensor '{}'", fields[1])))?;
                    sensors[s.index()] = Some(SensorAttachment { joint: find(fields[2], &joints)?, offset: vec3(&fields[3..])? });
                }
                "vertex" => {
                    if fields.len() != 5 {
                        return Err(err("vertex needs: joint x y z".into()));
                    }
                    vertices.push((find(fields[1], &joints)?, vec3(&fields[2..])?));
                }
                other => return Err(err(format!("unknown record '{other}'"))),
            }
        }
        if !saw_header {
            return Err(BodyModelError::Config { line: 0, message: "empty skeleton config".into() });
        }
        let upper = upper.ok_or_else(|| BodyModelError::InvalidModel("missing 'upper' record".into()))?;
        let mut attached = Vec::with_capacity(4);
        for s in Sensor::ALL {
            attached.push(
                sensors[s.index()]
                    .ok_or_else(|| BodyModelError::InvalidModel(format!("sensor '{}' is not attached", s.name())))?,
            );
        }
        let sensors: [SensorAttachment; 4] = attached.try_into().expect("four sensors");
        Self::new(joints, upper, sensors, vertices)
    }

    /// Serializes the model, including its proxy vertices, in the text format
    /// accepted by [`KinematicModel::from_config_str`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        out.push_str(SKELETON_FORMAT_VERSION);
        out.push('\n');
        for j in &self.joints {
            let parent = j.parent.map(|p| self.joints[p].name.as_str()).unwrap_or("-");
            let _ = writeln!(out, "joint {} {} {} {} {}", j.name, parent, j.offset.x, j.offset.y, j.offset.z);
        }
        out.push_str("upper");
        for &u in &self.upper_body {
            out.push(' ');
            out.push_str(&self.joints[u].name);
        }
        out.push('\n');
        for s in Sensor::ALL {
            let a = self.sensor(s);
            let _ = writeln!(out, "sensor {} {} {} {} {}", s.name(), self.joints[a.joint].name, a.offset.x, a.offset.y, a.offset.z);
        }
        for (j, v) in &self.proxy_vertices {
            let _ = writeln!(out, "vertex {} {} {} {}", self.joints[*j].name, v.x, v.y, v.z);
        }
        out
    }

    /// Joints of the upper body that are not the root.
    pub fn articulated_upper(&self) -> Vec<usize> {
        self.upper_body.iter().copied().filter(|&j| self.joints[j].parent.is_some()).collect()
    }

    /// Offset, in the joint's own frame, to the end of the segment it drives.
    /// Uses the first upper-body child when there is one, otherwise extends
    /// the incoming bone direction.
    pub fn segment_end(&self, joint: usize) -> Vector3<f64> {
        let child = self
            .children(joint)
            .find(|c| self.upper_body.contains(c))
            .or_else(|| self.children(joint).next());
        match child {
            Some(c) => self.joints[c].offset,
            None => {
                let incoming = self.joints[joint].offset;
                let n = incoming.norm();
                if n > 1e-9 {
                    incoming * (0.08 / n)
                } else {
                    Vector3::new(0.0, 0.08, 0.0)
                }
            }
        }
    }
}

/// Eight corners of a cube around the midpoint of each upper-body segment.
fn generate_proxy_vertices(model: &KinematicModel) -> Vec<(usize, Vector3<f64>)> {
    let mut out = Vec::with_capacity(model.upper_body.len() * 8);
    for &j in &model.upper_body {
        let end = model.segment_end(j);
        let center = end * 0.5;
        let half = (0.3 * end.norm()).clamp(0.02, 0.08);
        for corner in 0..8 {
            let sx = if corner & 1 == 0 { -half } else { half };
            let sy = if corner & 2 == 0 { -half } else { half };
            let sz = if corner & 4 == 0 { -half } else { half };
            out.push((j, center + Vector3::new(sx, sy, sz)));
        }
    }
    out
}

/// Per-joint local rotations plus the root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub local_rotations: Vec<Rotation>,
    pub root_position: Vector3<f64>,
}

impl Pose {
    pub fn identity(model: &KinematicModel) -> Self {
        Pose { local_rotations: vec![Rotation::identity(); model.joint_count()], root_position: Vector3::zeros() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FkResult {
    pub rotations: Vec<Rotation>,
    pub positions: Vec<Vector3<f64>>,
}

pub fn forward_kinematics(model: &KinematicModel, pose: &Pose) -> Result<FkResult, BodyModelError> {
    let n = model.joint_count();
    if pose.local_rotations.len() != n {
        return Err(BodyModelError::PoseLength { expected: n, got: pose.local_rotations.len() });
    }
    let mut rotations: Vec<Rotation> = Vec::with_capacity(n);
    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for (i, joint) in model.joints.iter().enumerate() {
        match joint.parent {
            None => {
                rotations.push(pose.local_rotations[i]);
                positions.push(pose.root_position);
            }
            Some(p) => {
                let parent_rot = rotations[p];
                positions.push(positions[p] + parent_rot.matrix() * joint.offset);
                rotations.push(parent_rot * pose.local_rotations[i]);
            }
        }
    }
    Ok(FkResult { rotations, positions })
}

pub fn proxy_mesh_positions(model: &KinematicModel, pose: &Pose) -> Result<Vec<Vector3<f64>>, BodyModelError> {
    let fk = forward_kinematics(model, pose)?;
    Ok(fk.mesh_positions(model))
}

impl FkResult {
    pub fn mesh_positions(&self, model: &KinematicModel) -> Vec<Vector3<f64>> {
        model
            .proxy_vertices
            .iter()
            .map(|(j, offset)| self.positions[*j] + self.rotations[*j].matrix() * offset)
            .collect()
    }

    pub fn sensor_position(&self, model: &KinematicModel, s: Sensor) -> Vector3<f64> {
        let a = model.sensor(s);
        self.positions[a.joint] + self.rotations[a.joint].matrix() * a.offset
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn chain3() -> KinematicModel {
        let joints = vec![
            Joint { name: "root".into(), parent: None, offset: Vector3::zeros() },
            Joint { name: "mid".into(), parent: Some(0), offset: Vector3::new(1.0, 0.0, 0.0) },
            Joint { name: "leaf".into(), parent: Some(1), offset: Vector3::new(0.5, 0.0, 0.0) },
        ];
        let att = SensorAttachment { joint: 2, offset: Vector3::zeros() };
        let mut model = KinematicModel {
            joints,
            upper_body: vec![0; 16],
            sensors: [att; 4],
            proxy_vertices: vec![(2, Vector3::new(0.0, 0.1, 0.0))],
        };
        model.upper_body = (0..16).map(|i| i % 3).collect();
        model
    }

    #[test]
    fn default_model_is_valid() {
        let m = KinematicModel::default();
        assert_eq!(m.joint_count(), 24);
        assert_eq!(m.upper_body.len(), 16);
        assert!(m.proxy_vertices.len() >= 8 * 16);
        for &u in &m.upper_body {
            assert!(m.proxy_vertices.iter().filter(|(j, _)| *j == u).count() >= 8);
        }
        m.validate().unwrap();
    }

    #[test]
    fn config_round_trip() {
        let m = KinematicModel::default();
        let again = KinematicModel::from_config_str(&m.to_config_string()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        let text = "skeleton v1\njoint a - 0 0 0\njoint b zz 0 0 0\n";
        match KinematicModel::from_config_str(text) {
            Err(BodyModelError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(KinematicModel::from_config_str("skeleton v9\n").is_err());
    }

    #[test]
    fn rest_pose_positions_are_cumulative_offsets() {
        let m = KinematicModel::default();
        let fk = forward_kinematics(&m, &Pose::identity(&m)).unwrap();
        for (i, j) in m.joints.iter().enumerate() {
            let mut expected = Vector3::zeros();
            let mut cur = Some(i);
            while let Some(c) = cur {
                expected += m.joints[c].offset;
                cur = m.joints[c].parent;
            }
            assert_relative_eq!(fk.positions[i], expected, epsilon = 1e-15);
            assert_eq!(fk.rotations[i], Rotation::identity(), "{}", j.name);
        }
    }

    #[test]
    fn three_joint_chain_matches_matrix_composition() {
        let m = chain3();
        let mut pose = Pose::identity(&m);
        pose.local_rotations[1] = Rotation::about_z(FRAC_PI_2);
        let fk = forward_kinematics(&m, &pose).unwrap();
        // leaf = root + R0 * o1 + (R0 R1) * o2 with R0 = I, R1 = Rz(90)
        assert_relative_eq!(fk.positions[2], Vector3::new(1.0, 0.5, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn pose_length_checked() {
        let m = KinematicModel::default();
        let pose = Pose { local_rotations: vec![Rotation::identity(); 3], root_position: Vector3::zeros() };
        assert!(matches!(forward_kinematics(&m, &pose), Err(BodyModelError::PoseLength { .. })));
    }

    #[test]
    fn single_joint_rotation_moves_only_its_subtree_vertices() {
        let m = KinematicModel::default();
        let elbow = m.joint_index("l_elbow").unwrap();
        let rest = proxy_mesh_positions(&m, &Pose::identity(&m)).unwrap();
        let mut pose = Pose::identity(&m);
        pose.local_rotations[elbow] = Rotation::about_y(0.8);
        let moved = proxy_mesh_positions(&m, &pose).unwrap();
        let fk = forward_kinematics(&m, &pose).unwrap();
        for (k, (j, off)) in m.proxy_vertices.iter().enumerate() {
            if m.is_ancestor(elbow, *j) {
                let expected = fk.positions[*j] + fk.rotations[*j].matrix() * off;
                assert_relative_eq!(moved[k], expected, epsilon = 1e-15);
                assert!((moved[k] - rest[k]).norm() > 1e-6);
            } else {
                assert_eq!(moved[k], rest[k]);
            }
        }
    }

    #[test]
    fn sensor_names_round_trip() {
        for s in Sensor::ALL {
            assert_eq!(Sensor::from_name(s.name()), Some(s));
        }
    }
}
