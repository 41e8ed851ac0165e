//! Physics-based refinement of kinematic pose estimates.
//!
//! Each frame a PD controller turns the gap between the current simulated
//! pose and the network's pose into reference joint accelerations. A QP then
//! finds the accelerations closest to that reference that satisfy the
//! equation of motion of the upper body, keep the seat contacts (hips and
//! feet) from sliding in the pelvis frame, and respect joint torque limits.
//! The accelerations are integrated twice to give the refined pose.

mod dynamics;
mod qp;
mod refine;

pub use dynamics::{assemble_dynamics, build_dynamics, link_frames, ArticulatedChain, Dynamics, Link};
pub use qp::{solve_qp, KktResiduals, QpProblem, QpSettings, QpSolution};
pub use refine::{frame_qp, refine_sequence, RefinedFrame, Refiner};

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::BodyModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("mass matrix is singular (check link masses and sizes)")]
    SingularMassMatrix,
    #[error("infeasible problem: {detail} (residual {residual:.3e})")]
    Infeasible { residual: f64, detail: String },
    #[error("no solution after {iterations} iterations (violation {violation:.3e})")]
    MaxIterations { iterations: usize, violation: f64 },
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: Box<PhysicsError> },
    #[error("invalid physics config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Body(#[from] BodyModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    /// Stiffness, 1/s².
    pub kp: f64,
    /// Damping, 1/s.
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        PdGains { kp: 3600.0, kd: 60.0 }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if self.kp > 0.0 && self.kd > 0.0 && self.kp.is_finite() && self.kd.is_finite() {
            Ok(())
        } else {
            Err(PhysicsError::InvalidConfig(format!("gains must be positive, got kp={} kd={}", self.kp, self.kd)))
        }
    }
}

/// Axis-angle joint coordinates and their rates.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsState {
    pub theta: Vec<Vector3<f64>>,
    pub theta_dot: Vec<Vector3<f64>>,
    pub timestamp: f64,
}

impl DynamicsState {
    pub fn at_rest(theta: Vec<Vector3<f64>>, timestamp: f64) -> Self {
        let n = theta.len();
        DynamicsState { theta, theta_dot: vec![Vector3::zeros(); n], timestamp }
    }
}

/// θ̈_ref = kp (θ_target − θ) − kd θ̇, per coordinate.
pub fn pd_reference(state: &DynamicsState, target: &[Vector3<f64>], gains: &PdGains) -> Result<Vec<Vector3<f64>>, PhysicsError> {
    if target.len() != state.theta.len() || state.theta_dot.len() != state.theta.len() {
        return Err(PhysicsError::Dimension(format!(
            "state has {} joints, target {}",
            state.theta.len(),
            target.len()
        )));
    }
    Ok(state
        .theta
        .iter()
        .zip(&state.theta_dot)
        .zip(target)
        .map(|((th, thd), tk)| (tk - th) * gains.kp - thd * gains.kd)
        .collect())
}

/// Semi-implicit Euler: the velocity is updated first and the new velocity
/// moves the position.
pub fn integrate(state: &DynamicsState, theta_ddot: &[Vector3<f64>], dt: f64) -> DynamicsState {
    let theta_dot: Vec<Vector3<f64>> = state.theta_dot.iter().zip(theta_ddot).map(|(v, a)| v + a * dt).collect();
    let theta = state.theta.iter().zip(&theta_dot).map(|(t, v)| t + v * dt).collect();
    DynamicsState { theta, theta_dot, timestamp: state.timestamp + dt }
}

pub const DEFAULT_CONTACT_JOINTS: [&str; 4] = ["l_hip", "r_hip", "l_foot", "r_foot"];

/// Link masses in kg, keyed by the joint that drives the link.
pub fn default_link_masses() -> BTreeMap<String, f64> {
    [
        ("spine1", 3.0),
        ("spine2", 3.0),
        ("spine3", 10.0),
        ("neck", 1.0),
        ("head", 5.0),
        ("l_collar", 1.5),
        ("r_collar", 1.5),
        ("l_shoulder", 1.9),
        ("r_shoulder", 1.9),
        ("l_elbow", 1.1),
        ("r_elbow", 1.1),
        ("l_wrist", 0.4),
        ("r_wrist", 0.4),
        ("l_hand", 0.1),
        ("r_hand", 0.1),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub gains: PdGains,
    /// Integration steps per input frame. One step at 60 Hz with the stock
    /// gains makes the loop deadbeat, so it would copy its input unfiltered.
    pub substeps: usize,
    /// Bound on every generalized joint torque component, N·m.
    pub torque_limit: f64,
    /// m/s².
    pub gravity: f64,
    pub link_masses: BTreeMap<String, f64>,
    /// Radius of gyration of each link as a fraction of its length.
    pub gyration_ratio: f64,
    /// Pelvis, legs and seat-side mass carried by the contacts, kg.
    pub root_mass: f64,
    pub root_gyration: f64,
    pub contact_joints: Vec<String>,
    /// Weight of the contact-force regularizer that picks one force split
    /// among the many that balance the body.
    pub contact_force_weight: f64,
    pub qp: QpSettings,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            gains: PdGains::default(),
            substeps: 4,
            torque_limit: 250.0,
            gravity: 9.81,
            link_masses: default_link_masses(),
            gyration_ratio: 0.3,
            root_mass: 30.0,
            root_gyration: 0.15,
            contact_joints: DEFAULT_CONTACT_JOINTS.iter().map(|s| s.to_string()).collect(),
            contact_force_weight: 1e-9,
            qp: QpSettings::default(),
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.gains.validate()?;
        let bad = |m: &str| Err(PhysicsError::InvalidConfig(m.into()));
        if self.substeps == 0 {
            return bad("substeps must be at least 1");
        }
        if !(self.torque_limit > 0.0) {
            return bad("torque_limit must be positive");
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            return bad("gravity must be finite and non-negative");
        }
        if !(self.gyration_ratio > 0.0 && self.root_mass > 0.0 && self.root_gyration > 0.0) {
            return bad("gyration_ratio, root_mass and root_gyration must be positive");
        }
        if self.link_masses.values().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("link masses must be positive");
        }
        if !(self.contact_force_weight > 0.0) {
            return bad("contact_force_weight must be positive");
        }
        if self.qp.max_iterations == 0 || !(self.qp.tolerance > 0.0) {
            return bad("qp settings must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(theta: f64, theta_dot: f64) -> DynamicsState {
        DynamicsState {
            theta: vec![Vector3::new(theta, 0.0, 0.0)],
            theta_dot: vec![Vector3::new(theta_dot, 0.0, 0.0)],
            timestamp: 0.0,
        }
    }

    #[test]
    fn pd_reference_cases() {
        let g = PdGains::default();
        assert_eq!(pd_reference(&state(0.3, 0.0), &[Vector3::new(0.3, 0.0, 0.0)], &g).unwrap()[0], Vector3::zeros());
        assert_eq!(pd_reference(&state(0.0, 0.0), &[Vector3::new(1.0, 0.0, 0.0)], &g).unwrap()[0].x, 3600.0);
        assert_eq!(pd_reference(&state(0.0, 2.0), &[Vector3::zeros()], &g).unwrap()[0].x, -120.0);
        assert!(pd_reference(&state(0.0, 0.0), &[], &g).is_err());
    }

    #[test]
    fn integration_from_rest_under_constant_acceleration() {
        let dt = 1.0 / 60.0;
        let a = 2.5;
        let mut s = state(0.0, 0.0);
        let still = integrate(&s, &[Vector3::zeros()], dt);
        assert_eq!((still.theta.clone(), still.theta_dot.clone()), (s.theta.clone(), s.theta_dot.clone()));
        let k = 30;
        let mut expected = 0.0;
        for i in 1..=k {
            s = integrate(&s, &[Vector3::new(a, 0.0, 0.0)], dt);
            expected += a * i as f64 * dt * dt;
        }
        assert!((s.theta_dot[0].x - a * k as f64 * dt).abs() < 1e-12);
        assert!((s.theta[0].x - expected).abs() < 1e-12);
    }

    #[test]
    fn default_config_is_valid() {
        PhysicsConfig::default().validate().unwrap();
        let c = PhysicsConfig { substeps: 0, ..PhysicsConfig::default() };
        assert!(c.validate().is_err());
        let text = toml::to_string(&PhysicsConfig::default()).unwrap();
        assert_eq!(toml::from_str::<PhysicsConfig>(&text).unwrap(), PhysicsConfig::default());
    }
}
