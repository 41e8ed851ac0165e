//! Frame-by-frame refinement: PD reference, dynamics, QP, integration.

use nalgebra::{DMatrix, DVector, Vector3};

use super::dynamics::{build_dynamics, ArticulatedChain, Dynamics};
use super::qp::{solve_qp, KktResiduals, QpProblem};
use super::{integrate, pd_reference, DynamicsState, PhysicsConfig, PhysicsError};
use crate::body_model::{forward_kinematics, unwrap_axis_angle, KinematicModel, Pose, Rotation};

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedFrame {
    pub pose: Pose,
    /// Axis-angle coordinates of the articulated joints, chain order.
    pub theta: Vec<Vector3<f64>>,
    pub theta_dot: Vec<Vector3<f64>>,
    /// Accelerations chosen at the last substep.
    pub theta_ddot: Vec<Vector3<f64>>,
    /// Joint torques in the pelvis frame, N·m, averaged over substeps.
    pub torques: Vec<Vector3<f64>>,
    /// Torques that would hold the same pose still against gravity.
    pub static_torques: Vec<Vector3<f64>>,
    /// One force per contact, pelvis frame, averaged over substeps.
    pub contact_forces: Vec<Vector3<f64>>,
    /// Worst KKT residuals over the frame's QPs.
    pub kkt: KktResiduals,
    /// Largest contact acceleration left by the solutions, m/s².
    pub contact_residual: f64,
    /// The QP failed and the input pose was passed through.
    pub fallback: bool,
}

/// QP over `x = [q̈, λ]`: stay close to the reference joint accelerations
/// and keep the root still, subject to the unactuated root rows of the
/// equation of motion, no-sliding contacts, and torque bounds on the joint
/// rows. Torques are eliminated through `τ = M_j q̈ + h_j − J_c,jᵀ λ`.
pub fn frame_qp(dynamics: &Dynamics, reference: &[Vector3<f64>], config: &PhysicsConfig) -> QpProblem {
    let n = dynamics.mass.nrows();
    let nc = dynamics.contact_jacobian.nrows();
    let nj = n - 6;
    let dim = n + nc;
    let mut h = DVector::from_element(dim, 2.0);
    h.rows_mut(n, nc).fill(2.0 * config.contact_force_weight);
    let mut g = DVector::zeros(dim);
    for (i, r) in reference.iter().enumerate() {
        for k in 0..3 {
            g[6 + 3 * i + k] = -2.0 * r[k];
        }
    }
    let jt = dynamics.contact_jacobian.transpose();

    // Contact points are fixed to the root, so the no-slide rows only touch
    // the six root columns and have rank at most six. Keep an independent
    // set of them.
    let (contact_rows, contact_rhs) = independent_contact_rows(dynamics);
    let nk = contact_rows.nrows();
    let mut a = DMatrix::zeros(6 + nk, dim);
    a.view_mut((0, 0), (6, n)).copy_from(&dynamics.mass.rows(0, 6));
    a.view_mut((0, n), (6, nc)).copy_from(&(-jt.rows(0, 6)));
    a.view_mut((6, 0), (nk, 6)).copy_from(&contact_rows);
    let mut b = DVector::zeros(6 + nk);
    b.rows_mut(0, 6).copy_from(&(-dynamics.bias.rows(0, 6)));
    b.rows_mut(6, nk).copy_from(&contact_rhs);

    let mut c = DMatrix::zeros(nj, dim);
    c.view_mut((0, 0), (nj, n)).copy_from(&dynamics.mass.rows(6, nj));
    c.view_mut((0, n), (nj, nc)).copy_from(&(-jt.rows(6, nj)));
    let hj = dynamics.bias.rows(6, nj);
    let lower = hj.map(|v| -config.torque_limit - v);
    let upper = hj.map(|v| config.torque_limit - v);

    QpProblem::unconstrained(DMatrix::from_diagonal(&h), g).with_equalities(a, b).with_inequalities(c, lower, upper)
}

/// Rows spanning `J q̈ = -bias` for contact Jacobians that vanish past the
/// root columns, one per nonzero singular value of the root block.
fn independent_contact_rows(dynamics: &Dynamics) -> (DMatrix<f64>, DVector<f64>) {
    let j = &dynamics.contact_jacobian;
    if j.nrows() == 0 {
        return (DMatrix::zeros(0, 6), DVector::zeros(0));
    }
    debug_assert!(j.columns(6, j.ncols() - 6).iter().all(|v| *v == 0.0));
    let svd = j.columns(0, 6).into_owned().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let cutoff = svd.singular_values.max() * 1e-10 * j.nrows().max(6) as f64;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cutoff).collect();
    let mut rows = DMatrix::zeros(keep.len(), 6);
    let mut rhs = DVector::zeros(keep.len());
    for (k, &i) in keep.iter().enumerate() {
        rows.set_row(k, &(vt.row(i) * svd.singular_values[i]));
        rhs[k] = -u.column(i).dot(&dynamics.contact_bias);
    }
    (rows, rhs)
}

#[derive(Clone, Debug)]
struct State {
    joints: DynamicsState,
    pelvis: DynamicsState,
}

/// Stateful refiner: feed it kinematic poses in order, one per frame.
#[derive(Clone, Debug)]
pub struct Refiner<'m> {
    model: &'m KinematicModel,
    chain: ArticulatedChain,
    config: PhysicsConfig,
    frame_rate: f64,
    contact_joints: Vec<usize>,
    state: Option<State>,
    frame: usize,
}

impl<'m> Refiner<'m> {
    pub fn new(model: &'m KinematicModel, config: &PhysicsConfig, frame_rate: f64) -> Result<Self, PhysicsError> {
        config.validate()?;
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(PhysicsError::InvalidConfig(format!("frame rate {frame_rate}")));
        }
        let chain = ArticulatedChain::from_model(model, config)?;
        let contact_joints = config
            .contact_joints
            .iter()
            .map(|n| model.joint_index(n).ok_or_else(|| PhysicsError::InvalidConfig(format!("no contact joint {n}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(&j) = contact_joints.iter().find(|&&j| model.upper_body.contains(&j)) {
            return Err(PhysicsError::InvalidConfig(format!(
                "contact joint {} moves with the upper body",
                model.joints[j].name
            )));
        }
        Ok(Refiner { model, chain, config: config.clone(), frame_rate, contact_joints, state: None, frame: 0 })
    }

    pub fn chain(&self) -> &ArticulatedChain {
        &self.chain
    }

    fn targets(&self, pose: &Pose, state: Option<&State>) -> (Vec<Vector3<f64>>, Vector3<f64>) {
        let joints = self
            .chain
            .joints
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let v = pose.local_rotations[j].axis_angle();
                state.map_or(v, |s| unwrap_axis_angle(&v, &s.joints.theta[i]))
            })
            .collect();
        let p = pose.local_rotations[0].axis_angle();
        let pelvis = state.map_or(p, |s| unwrap_axis_angle(&p, &s.pelvis.theta[0]));
        (joints, pelvis)
    }

    fn contacts(&self, pose: &Pose) -> Result<Vec<Vector3<f64>>, PhysicsError> {
        let fk = forward_kinematics(self.model, pose)?;
        let inv = fk.rotations[0].inverse();
        Ok(self.contact_joints.iter().map(|&j| inv.apply(&(fk.positions[j] - fk.positions[0]))).collect())
    }

    fn compose(&self, target: &Pose, state: &State) -> Pose {
        let mut pose = target.clone();
        for (i, &j) in self.chain.joints.iter().enumerate() {
            pose.local_rotations[j] = Rotation::from_axis_angle(&state.joints.theta[i]);
        }
        pose.local_rotations[0] = Rotation::from_axis_angle(&state.pelvis.theta[0]);
        pose
    }

    /// Refines the next frame. Solver failures fall back to the input pose
    /// and restart the simulation from it at rest.
    pub fn step(&mut self, target: &Pose) -> Result<RefinedFrame, PhysicsError> {
        if target.local_rotations.len() != self.model.joint_count() {
            return Err(PhysicsError::Dimension(format!(
                "pose has {} joints, model {}",
                target.local_rotations.len(),
                self.model.joint_count()
            )));
        }
        let frame = self.frame;
        self.frame += 1;
        let (theta_k, pelvis_k) = self.targets(target, self.state.as_ref());
        let timestamp = frame as f64 / self.frame_rate;
        let state = self.state.take().unwrap_or_else(|| State {
            joints: DynamicsState::at_rest(theta_k.clone(), timestamp),
            pelvis: DynamicsState::at_rest(vec![pelvis_k], timestamp),
        });
        match self.simulate(target, state, &theta_k, pelvis_k) {
            Ok((out, next)) => {
                self.state = Some(next);
                Ok(out)
            }
            Err(PhysicsError::Body(e)) => Err(PhysicsError::Frame { frame, source: Box::new(PhysicsError::Body(e)) }),
            Err(e) => {
                log::warn!("frame {frame}: physics refinement failed ({e}); passing the kinematic pose through");
                let rest = State {
                    joints: DynamicsState::at_rest(theta_k.clone(), timestamp),
                    pelvis: DynamicsState::at_rest(vec![pelvis_k], timestamp),
                };
                let nl = theta_k.len();
                let out = RefinedFrame {
                    pose: target.clone(),
                    theta: theta_k,
                    theta_dot: vec![Vector3::zeros(); nl],
                    theta_ddot: vec![Vector3::zeros(); nl],
                    torques: vec![Vector3::repeat(f64::NAN); nl],
                    static_torques: vec![Vector3::repeat(f64::NAN); nl],
                    contact_forces: vec![Vector3::repeat(f64::NAN); self.contact_joints.len()],
                    kkt: KktResiduals::default(),
                    contact_residual: 0.0,
                    fallback: true,
                };
                self.state = Some(rest);
                Ok(out)
            }
        }
    }

    fn simulate(
        &self,
        target: &Pose,
        mut state: State,
        theta_k: &[Vector3<f64>],
        pelvis_k: Vector3<f64>,
    ) -> Result<(RefinedFrame, State), PhysicsError> {
        let contacts = self.contacts(target)?;
        let nl = theta_k.len();
        let steps = self.config.substeps;
        let dt = 1.0 / (self.frame_rate * steps as f64);
        let mut torques = vec![Vector3::zeros(); nl];
        let mut static_torques = vec![Vector3::zeros(); nl];
        let mut forces = vec![Vector3::zeros(); contacts.len()];
        let mut kkt = KktResiduals::default();
        let mut contact_residual: f64 = 0.0;
        let mut theta_ddot = vec![Vector3::zeros(); nl];
        let n = self.chain.dofs();
        for _ in 0..steps {
            let reference = pd_reference(&state.joints, theta_k, &self.config.gains)?;
            let pelvis_acc = pd_reference(&state.pelvis, &[pelvis_k], &self.config.gains)?;
            let pelvis_rot = Rotation::from_axis_angle(&state.pelvis.theta[0]);
            let gravity = pelvis_rot.inverse().apply(&Vector3::new(0.0, -self.config.gravity, 0.0));
            let dynamics = build_dynamics(&self.chain, &state.joints.theta, &state.joints.theta_dot, &gravity, &contacts)?;
            let qp = frame_qp(&dynamics, &reference, &self.config);
            let sol = solve_qp(&qp, &self.config.qp)?;
            let qdd = sol.x.rows(0, n).into_owned();
            let lambda = sol.x.rows(n, sol.x.len() - n);
            let generalized = dynamics.mass.rows(6, n - 6) * &qdd + dynamics.bias.rows(6, n - 6)
                - dynamics.contact_jacobian.columns(6, n - 6).transpose() * lambda;
            let tau = dynamics.joint_torques(generalized.as_slice());
            let tau_static = dynamics.joint_torques(dynamics.gravity_bias.rows(6, n - 6).into_owned().as_slice());
            for i in 0..nl {
                torques[i] += tau[i] / steps as f64;
                static_torques[i] += tau_static[i] / steps as f64;
                theta_ddot[i] = Vector3::new(qdd[6 + 3 * i], qdd[6 + 3 * i + 1], qdd[6 + 3 * i + 2]);
            }
            for (k, f) in forces.iter_mut().enumerate() {
                *f += Vector3::new(lambda[3 * k], lambda[3 * k + 1], lambda[3 * k + 2]) / steps as f64;
            }
            let slide = &dynamics.contact_jacobian * &qdd + &dynamics.contact_bias;
            contact_residual = contact_residual.max(slide.amax());
            let r = sol.residuals;
            kkt = KktResiduals {
                stationarity: kkt.stationarity.max(r.stationarity),
                equality: kkt.equality.max(r.equality),
                inequality: kkt.inequality.max(r.inequality),
                complementarity: kkt.complementarity.max(r.complementarity),
                dual: kkt.dual.max(r.dual),
            };
            state.joints = integrate(&state.joints, &theta_ddot, dt);
            state.pelvis = integrate(&state.pelvis, &pelvis_acc, dt);
        }
        if !state.joints.theta.iter().chain(&state.pelvis.theta).all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(PhysicsError::NonFinite("integrated state".into()));
        }
        let frame = RefinedFrame {
            pose: self.compose(target, &state),
            theta: state.joints.theta.clone(),
            theta_dot: state.joints.theta_dot.clone(),
            theta_ddot,
            torques,
            static_torques,
            contact_forces: forces,
            kkt,
            contact_residual,
            fallback: false,
        };
        Ok((frame, state))
    }
}

/// Refines a whole sequence in order.
pub fn refine_sequence(
    model: &KinematicModel,
    poses: &[Pose],
    frame_rate: f64,
    config: &PhysicsConfig,
) -> Result<Vec<RefinedFrame>, PhysicsError> {
    let mut refiner = Refiner::new(model, config, frame_rate)?;
    poses.iter().map(|p| refiner.step(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::seated_base_pose;

    #[test]
    fn constant_pose_converges_to_gravity_compensation() {
        let model = KinematicModel::default();
        let mut pose = seated_base_pose(&model);
        pose.local_rotations[model.joint_index("l_elbow").unwrap()] = Rotation::about_y(-0.6);
        let frames = refine_sequence(&model, &vec![pose.clone(); 30], 60.0, &PhysicsConfig::default()).unwrap();
        let last = frames.last().unwrap();
        assert!(!last.fallback);
        for &j in &model.upper_body {
            let e = last.pose.local_rotations[j].angle_to(&pose.local_rotations[j]);
            assert!(e < 1e-9, "{e}");
        }
        for (t, s) in last.torques.iter().zip(&last.static_torques) {
            assert!((t - s).norm() < 1e-6 * (1.0 + s.norm()), "{t} vs {s}");
        }
        assert!(last.kkt.max() < 1e-6, "{:?}", last.kkt);
        assert!(last.contact_residual < 1e-5);
    }

    #[test]
    fn no_gravity_no_error_means_no_torque() {
        let model = KinematicModel::default();
        let pose = seated_base_pose(&model);
        let config = PhysicsConfig { gravity: 0.0, ..PhysicsConfig::default() };
        let frames = refine_sequence(&model, &[pose.clone(), pose], 60.0, &config).unwrap();
        for f in &frames {
            assert!(f.torques.iter().all(|t| t.norm() < 1e-9));
            assert!(f.theta_ddot.iter().all(|a| a.norm() < 1e-9));
        }
    }

    #[test]
    fn torque_limits_bind_on_violent_targets() {
        let model = KinematicModel::default();
        let start = seated_base_pose(&model);
        let mut jump = start.clone();
        let s = model.joint_index("l_shoulder").unwrap();
        jump.local_rotations[s] = Rotation::about_z(1.2);
        let config = PhysicsConfig { torque_limit: 5.0, ..PhysicsConfig::default() };
        let frames = refine_sequence(&model, &[start, jump.clone(), jump], 60.0, &config).unwrap();
        let f = &frames[1];
        assert!(!f.fallback);
        assert!(f.kkt.max() < 1e-6, "{:?}", f.kkt);
        // Bounds apply to generalized torques; the largest must sit at the limit.
        let max = f.torques.iter().map(|t| t.amax()).fold(0.0, f64::max);
        assert!(max > 1.0, "{max}");
    }
}
