//! Equation of motion of the upper body in the pelvis frame.
//!
//! Generalized coordinates are six root coordinates (linear then angular
//! acceleration of the pelvis frame; their velocity is zero because the
//! frame moves with the pelvis) followed by three axis-angle coordinates per
//! articulated joint. Each joint drives one link modeled as a point mass at
//! the middle of its segment with an isotropic inertia `m ρ²`. The pelvis,
//! legs and seat form the root body.
//!
//! `M q̈ + h = [0; τ] + J_cᵀ λ`, where `h` collects velocity products and
//! gravity, and `J_c` maps `q̈` to the linear accelerations of the contact
//! points.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{PhysicsConfig, PhysicsError};
use crate::body_model::{left_jacobian, left_jacobian_rate, skew, KinematicModel, Rotation};

/// A link of the chain, driven by a spherical joint.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub name: String,
    /// Chain index of the parent link; `None` when the joint sits on the root body.
    pub parent: Option<usize>,
    /// Joint position in the parent link's frame (or the root frame).
    pub offset: Vector3<f64>,
    /// Center of mass in the link's own frame.
    pub com: Vector3<f64>,
    pub mass: f64,
    /// Radius of gyration.
    pub gyration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedChain {
    /// Parents come before their children.
    pub links: Vec<Link>,
    pub root_mass: f64,
    pub root_gyration: f64,
    /// Model joint index of each link.
    pub joints: Vec<usize>,
}

impl ArticulatedChain {
    /// One link per upper-body joint other than the pelvis.
    pub fn from_model(model: &KinematicModel, config: &PhysicsConfig) -> Result<Self, PhysicsError> {
        let joints = model.articulated_upper();
        let mut links = Vec::with_capacity(joints.len());
        for &j in &joints {
            let joint = &model.joints[j];
            let parent = joint.parent.and_then(|p| joints.iter().position(|&q| q == p));
            if parent.is_none() && joint.parent != Some(0) {
                return Err(PhysicsError::InvalidConfig(format!(
                    "joint {} hangs from a joint outside the upper body",
                    joint.name
                )));
            }
            let mass = *config
                .link_masses
                .get(&joint.name)
                .ok_or_else(|| PhysicsError::InvalidConfig(format!("no mass given for link {}", joint.name)))?;
            let end = model.segment_end(j);
            links.push(Link {
                name: joint.name.clone(),
                parent,
                offset: joint.offset,
                com: end * 0.5,
                mass,
                gyration: config.gyration_ratio * end.norm(),
            });
        }
        let chain = ArticulatedChain { links, root_mass: config.root_mass, root_gyration: config.root_gyration, joints };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (i, l) in self.links.iter().enumerate() {
            if l.parent.is_some_and(|p| p >= i) {
                return Err(PhysicsError::InvalidConfig(format!("link {} comes before its parent", l.name)));
            }
            if !(l.mass > 0.0) || !(l.gyration >= 0.0) {
                return Err(PhysicsError::InvalidConfig(format!("link {} needs a positive mass", l.name)));
            }
        }
        if !(self.root_mass > 0.0) || !(self.root_gyration > 0.0) {
            return Err(PhysicsError::InvalidConfig("root mass and gyration must be positive".into()));
        }
        Ok(())
    }

    /// Number of generalized coordinates.
    pub fn dofs(&self) -> usize {
        6 + 3 * self.links.len()
    }

    /// Copy with every mass multiplied by `k`.
    pub fn scaled_masses(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.root_mass *= k;
        for l in &mut out.links {
            l.mass *= k;
        }
        out
    }
}

/// Orientation and joint position of every link in the root frame.
pub fn link_frames(chain: &ArticulatedChain, theta: &[Vector3<f64>]) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let mut out: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(chain.links.len());
    for (i, l) in chain.links.iter().enumerate() {
        let (gp, pp) = l.parent.map(|p| out[p]).unwrap_or((Matrix3::identity(), Vector3::zeros()));
        let p = pp + gp * l.offset;
        let g = gp * Rotation::from_axis_angle(&theta[i]).matrix();
        out.push((g, p));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub mass: DMatrix<f64>,
    /// Velocity-product and gravity terms.
    pub bias: DVector<f64>,
    /// The gravity part of `bias`: the bias at zero velocity.
    pub gravity_bias: DVector<f64>,
    /// Three rows per contact.
    pub contact_jacobian: DMatrix<f64>,
    /// Contact acceleration at `q̈ = 0`.
    pub contact_bias: DVector<f64>,
    /// Maps each joint's axis-angle rate to the angular velocity it adds,
    /// in the root frame.
    pub motion_subspaces: Vec<Matrix3<f64>>,
}

impl Dynamics {
    /// Physical joint torques, in the root frame, from generalized ones.
    pub fn joint_torques(&self, generalized: &[f64]) -> Vec<Vector3<f64>> {
        self.motion_subspaces
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let q = Vector3::new(generalized[3 * i], generalized[3 * i + 1], generalized[3 * i + 2]);
                s.transpose().lu().solve(&q).unwrap_or_else(|| Vector3::repeat(f64::NAN))
            })
            .collect()
    }

    pub fn check_positive_definite(&self) -> Result<(), PhysicsError> {
        let sym = (&self.mass - self.mass.transpose()).amax();
        if sym > 1e-9 * (1.0 + self.mass.amax()) || self.mass.clone().cholesky().is_none() {
            return Err(PhysicsError::SingularMassMatrix);
        }
        Ok(())
    }
}

/// Mass matrix, bias forces and contact Jacobian, without checking that the
/// mass matrix is invertible. `gravity` is the gravity vector in the root
/// frame; `contacts` are points fixed to the root body.
pub fn assemble_dynamics(
    chain: &ArticulatedChain,
    theta: &[Vector3<f64>],
    theta_dot: &[Vector3<f64>],
    gravity: &Vector3<f64>,
    contacts: &[Vector3<f64>],
) -> Result<Dynamics, PhysicsError> {
    let nl = chain.links.len();
    if theta.len() != nl || theta_dot.len() != nl {
        return Err(PhysicsError::Dimension(format!(
            "chain has {nl} links, state has {} and {}",
            theta.len(),
            theta_dot.len()
        )));
    }
    if theta.iter().chain(theta_dot).any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(PhysicsError::NonFinite("joint state".into()));
    }
    let n = chain.dofs();

    // Forward pass: frames, motion subspaces, velocities and the parts of the
    // accelerations that do not depend on q̈.
    let mut rot = Vec::with_capacity(nl);
    let mut pos = Vec::with_capacity(nl);
    let mut sub = Vec::with_capacity(nl);
    let mut omega = Vec::with_capacity(nl);
    let mut alpha_b = Vec::with_capacity(nl);
    let mut acc_b: Vec<Vector3<f64>> = Vec::with_capacity(nl);
    for (i, l) in chain.links.iter().enumerate() {
        let (gp, pp, wp, alp, ap) = match l.parent {
            Some(p) => (rot[p], pos[p], omega[p], alpha_b[p], acc_b[p]),
            None => (Matrix3::identity(), Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), Vector3::zeros()),
        };
        let r = gp * l.offset;
        let p = pp + r;
        let a = ap + alp.cross(&r) + wp.cross(&wp.cross(&r));
        let s = gp * left_jacobian(&theta[i]);
        let rel = s * theta_dot[i];
        let w = wp + rel;
        let al = alp + wp.cross(&rel) + gp * left_jacobian_rate(&theta[i], &theta_dot[i]) * theta_dot[i];
        rot.push(gp * Rotation::from_axis_angle(&theta[i]).matrix());
        pos.push(p);
        sub.push(s);
        omega.push(w);
        alpha_b.push(al);
        acc_b.push(a);
    }

    let mut mass = DMatrix::zeros(n, n);
    let mut bias = DVector::zeros(n);
    let mut gravity_bias = DVector::zeros(n);

    // Root body: point mass at the origin with isotropic inertia.
    let m0 = chain.root_mass;
    let i0 = m0 * chain.root_gyration * chain.root_gyration;
    for k in 0..3 {
        mass[(k, k)] += m0;
        mass[(3 + k, 3 + k)] += i0;
        bias[k] -= m0 * gravity[k];
        gravity_bias[k] -= m0 * gravity[k];
    }

    // Each link's Jacobians are nonzero only on the root columns and its
    // ancestors, so they are kept as (column, linear, angular) 3x3 blocks.
    let mut blocks: Vec<(usize, Matrix3<f64>, Matrix3<f64>)> = Vec::new();
    for (i, l) in chain.links.iter().enumerate() {
        let r = rot[i] * l.com;
        let c = pos[i] + r;
        blocks.clear();
        blocks.push((0, Matrix3::identity(), Matrix3::zeros()));
        blocks.push((3, -skew(&c), Matrix3::identity()));
        let mut k = Some(i);
        while let Some(a) = k {
            blocks.push((6 + 3 * a, -skew(&(c - pos[a])) * sub[a], sub[a]));
            k = chain.links[a].parent;
        }
        let a_c = acc_b[i] + alpha_b[i].cross(&r) + omega[i].cross(&omega[i].cross(&r));
        let inertia = l.mass * l.gyration * l.gyration;
        let force = (a_c - gravity) * l.mass;
        let weight = -gravity * l.mass;
        let moment = alpha_b[i] * inertia;
        for (ci, vi, wi) in &blocks {
            let (vt, wt) = (vi.transpose(), wi.transpose());
            for (cj, vj, wj) in &blocks {
                let m = vt * vj * l.mass + wt * wj * inertia;
                let mut view = mass.fixed_view_mut::<3, 3>(*ci, *cj);
                view += m;
            }
            // Isotropic inertia has no gyroscopic term.
            let mut b = bias.fixed_rows_mut::<3>(*ci);
            b += vt * force + wt * moment;
            let mut g = gravity_bias.fixed_rows_mut::<3>(*ci);
            g += vt * weight;
        }
    }
    // Exact symmetry for the factorizations downstream.
    let mass = (&mass + mass.transpose()) * 0.5;

    let mut contact_jacobian = DMatrix::zeros(3 * contacts.len(), n);
    for (k, p) in contacts.iter().enumerate() {
        contact_jacobian.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(&Matrix3::identity());
        contact_jacobian.fixed_view_mut::<3, 3>(3 * k, 3).copy_from(&(-skew(p)));
    }
    // The root frame does not rotate, so points fixed to it have no
    // velocity-dependent acceleration.
    let contact_bias = DVector::zeros(3 * contacts.len());

    Ok(Dynamics { mass, bias, gravity_bias, contact_jacobian, contact_bias, motion_subspaces: sub })
}

/// As [`assemble_dynamics`], failing when the mass matrix is not symmetric
/// positive definite.
pub fn build_dynamics(
    chain: &ArticulatedChain,
    theta: &[Vector3<f64>],
    theta_dot: &[Vector3<f64>],
    gravity: &Vector3<f64>,
    contacts: &[Vector3<f64>],
) -> Result<Dynamics, PhysicsError> {
    let d = assemble_dynamics(chain, theta, theta_dot, gravity, contacts)?;
    d.check_positive_definite()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::PhysicsConfig;
    use approx::assert_relative_eq;

    fn pendulum(m: f64, l: f64, gyration: f64) -> ArticulatedChain {
        ArticulatedChain {
            links: vec![Link {
                name: "link".into(),
                parent: None,
                offset: Vector3::zeros(),
                com: Vector3::new(0.0, -l, 0.0),
                mass: m,
                gyration,
            }],
            root_mass: 1.0,
            root_gyration: 0.1,
            joints: vec![1],
        }
    }

    #[test]
    fn single_pendulum() {
        let (m, l, g) = (2.0, 0.7, 9.81);
        let chain = pendulum(m, l, 0.0);
        for angle in [0.0, 0.3, -1.2, 2.0] {
            let theta = [Vector3::new(0.0, 0.0, angle)];
            let d = assemble_dynamics(&chain, &theta, &[Vector3::zeros()], &Vector3::new(0.0, -g, 0.0), &[]).unwrap();
            let z = 6 + 2;
            assert_relative_eq!(d.mass[(z, z)], m * l * l, epsilon = 1e-12);
            assert_relative_eq!(d.bias[z], m * g * l * angle.sin(), epsilon = 1e-12);
        }
        // With a radius of gyration the link adds its own inertia.
        let chain = pendulum(m, l, 0.2);
        let d = build_dynamics(&chain, &[Vector3::zeros()], &[Vector3::zeros()], &Vector3::zeros(), &[]).unwrap();
        assert_relative_eq!(d.mass[(8, 8)], m * (l * l + 0.04), epsilon = 1e-12);
    }

    fn default_chain() -> (KinematicModel, ArticulatedChain) {
        let model = KinematicModel::default();
        let chain = ArticulatedChain::from_model(&model, &PhysicsConfig::default()).unwrap();
        (model, chain)
    }

    fn random_state(n: usize, seed: u64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |s: f64| Vector3::from_fn(|_, _| rng.random_range(-s..s));
        let theta = (0..n).map(|_| v(0.8)).collect();
        let rate = (0..n).map(|_| v(2.0)).collect();
        (theta, rate)
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let (_, chain) = default_chain();
        assert_eq!(chain.links.len(), 15);
        for seed in 0..5 {
            let (theta, rate) = random_state(15, seed);
            let d = build_dynamics(&chain, &theta, &rate, &Vector3::new(0.0, -9.81, 0.0), &[]).unwrap();
            assert_eq!(d.mass, d.mass.transpose());
        }
    }

    #[test]
    fn velocity_terms_vanish_at_rest_and_mass_scales_linearly() {
        let (_, chain) = default_chain();
        let (theta, rate) = random_state(15, 7);
        let rest = vec![Vector3::zeros(); 15];
        let d = build_dynamics(&chain, &theta, &rest, &Vector3::zeros(), &[]).unwrap();
        assert!(d.bias.amax() < 1e-12);
        let g = Vector3::new(0.0, -9.81, 0.0);
        let d1 = build_dynamics(&chain, &theta, &rate, &g, &[]).unwrap();
        let d2 = build_dynamics(&chain.scaled_masses(2.0), &theta, &rate, &g, &[]).unwrap();
        assert_relative_eq!(d2.mass, d1.mass * 2.0, epsilon = 1e-12);
        assert_relative_eq!(d2.bias, d1.bias * 2.0, epsilon = 1e-10);
    }

    #[test]
    fn gravity_bias_is_the_bias_at_rest() {
        let (_, chain) = default_chain();
        let (theta, rate) = random_state(15, 3);
        let g = Vector3::new(0.3, -9.81, 0.2);
        let moving = build_dynamics(&chain, &theta, &rate, &g, &[]).unwrap();
        let still = build_dynamics(&chain, &theta, &vec![Vector3::zeros(); 15], &g, &[]).unwrap();
        assert_relative_eq!(moving.gravity_bias, still.bias, epsilon = 1e-12);
        assert_relative_eq!(still.gravity_bias, still.bias, epsilon = 1e-12);
    }

    /// Centers of mass and link orientations along θ(t) = θ + θ̇ t + ½ θ̈ t².
    fn coms(chain: &ArticulatedChain, theta: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        link_frames(chain, theta).iter().zip(&chain.links).map(|((g, p), l)| p + g * l.com).collect()
    }

    #[test]
    fn equation_of_motion_matches_newton_euler_by_finite_differences() {
        // Power balance: for any q̈, q̇ᵀ(M q̈ + h) with gravity off equals
        // the rate of change of kinetic energy computed numerically.
        let (_, chain) = default_chain();
        let (theta, rate) = random_state(15, 11);
        let (acc, _) = random_state(15, 12);
        let path = |t: f64| -> Vec<Vector3<f64>> {
            theta.iter().zip(&rate).zip(&acc).map(|((a, b), c)| a + b * t + c * (0.5 * t * t)).collect()
        };
        let vel = |t: f64| -> Vec<Vector3<f64>> { rate.iter().zip(&acc).map(|(b, c)| b + c * t).collect() };
        let kinetic = |t: f64| -> f64 {
            let h = 1e-6;
            let (a, b) = (coms(&chain, &path(t + h)), coms(&chain, &path(t - h)));
            let (fa, fb) = (link_frames(&chain, &path(t + h)), link_frames(&chain, &path(t - h)));
            let mut e = 0.0;
            for (i, l) in chain.links.iter().enumerate() {
                let v = (a[i] - b[i]) / (2.0 * h);
                let rdot = (fa[i].0 - fb[i].0) / (2.0 * h);
                let (g, _) = link_frames(&chain, &path(t))[i];
                let w_hat = rdot * g.transpose();
                let w = Vector3::new(w_hat[(2, 1)], w_hat[(0, 2)], w_hat[(1, 0)]);
                e += 0.5 * l.mass * (v.norm_squared() + l.gyration * l.gyration * w.norm_squared());
            }
            e
        };
        let dt = 1e-4;
        let de = (kinetic(dt) - kinetic(-dt)) / (2.0 * dt);
        let d = build_dynamics(&chain, &theta, &vel(0.0), &Vector3::zeros(), &[]).unwrap();
        let mut qdd = DVector::zeros(chain.dofs());
        let mut qd = DVector::zeros(chain.dofs());
        for i in 0..15 {
            for k in 0..3 {
                qdd[6 + 3 * i + k] = acc[i][k];
                qd[6 + 3 * i + k] = rate[i][k];
            }
        }
        let power = qd.dot(&(&d.mass * &qdd + &d.bias));
        assert_relative_eq!(power, de, max_relative = 1e-4);
    }

    #[test]
    fn jacobian_predicts_center_of_mass_acceleration() {
        let (_, chain) = default_chain();
        let (theta, rate) = random_state(15, 3);
        let (acc, _) = random_state(15, 4);
        let path = |t: f64| -> Vec<Vector3<f64>> {
            theta.iter().zip(&rate).zip(&acc).map(|((a, b), c)| a + b * t + c * (0.5 * t * t)).collect()
        };
        let h = 1e-4;
        let (cp, c0, cm) = (coms(&chain, &path(h)), coms(&chain, &path(0.0)), coms(&chain, &path(-h)));
        // With unit mass on one link, switching gravity on changes the bias
        // by -Jᵀ g, which isolates a row of the link's Jacobian.
        for i in [0, 4, 10, 14] {
            let fd = (cp[i] - c0[i] * 2.0 + cm[i]) / (h * h);
            let mut single = chain.scaled_masses(1e-12);
            single.links[i].mass = 1.0;
            single.links[i].gyration = 0.0;
            let with_g = assemble_dynamics(&single, &theta, &rate, &Vector3::new(0.0, -1.0, 0.0), &[]).unwrap();
            let without = assemble_dynamics(&single, &theta, &rate, &Vector3::zeros(), &[]).unwrap();
            let jy = &with_g.bias - &without.bias;
            let mut qdd = DVector::zeros(chain.dofs());
            for j in 0..15 {
                for k in 0..3 {
                    qdd[6 + 3 * j + k] = acc[j][k];
                }
            }
            // The root linear y coordinate of the unit-mass bias is the
            // center of mass's velocity-product acceleration along y.
            let predicted = jy.dot(&qdd) + without.bias[1];
            assert_relative_eq!(predicted, fd.y, max_relative = 1e-4, epsilon = 1e-5);
        }
    }

    #[test]
    fn contact_rows_pin_the_root() {
        let (_, chain) = default_chain();
        let contacts = [Vector3::new(0.1, -0.1, 0.0), Vector3::new(-0.1, -0.1, 0.0), Vector3::new(0.1, -0.5, 0.4)];
        let d = build_dynamics(&chain, &vec![Vector3::zeros(); 15], &vec![Vector3::zeros(); 15], &Vector3::zeros(), &contacts)
            .unwrap();
        assert_eq!(d.contact_jacobian.rank(1e-10), 6);
        assert!(d.contact_jacobian.columns(6, chain.dofs() - 6).amax() == 0.0);
    }
}
