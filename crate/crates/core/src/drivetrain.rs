//! Eccentrically loaded drivetrain benchmark.
//!
//! A flywheel is radially loaded at distance `r` from its centre by a spring
//! and damper suspended at distance `l > r`. The spring-damper chord length
//! is `sqrt(c(theta))` with `c(theta) = r^2 + l^2 - 2 r l cos(theta)`, its
//! rate of change and moment arm are both `r l sin(theta) / sqrt(c)`, and the
//! spring rest length equals the chord at the rest angle `theta0`, giving
//!
//! ```text
//! T_k(theta)        = k (1 - sqrt(c(theta0)) / sqrt(c(theta))) r l sin(theta)
//! T_b(theta, omega) = b r^2 l^2 sin^2(theta) / c(theta) * omega
//! ```
//!
//! with dynamics `J theta'' + T_k + T_b = u`. The rest angle
//! `theta0 = pi/2 + omega pi/4` is uncertain with `omega ~ U(-1, 1)`, so the
//! uncertainty enters both the dynamics and the rest initial state. Depending
//! on the input torque the step response either sustains rotation or settles
//! into a non-rotating equilibrium; in between the system bifurcates.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::basis::{Distribution, ParameterSpace};
use crate::error::{Error, Result};
use crate::propagation::{FnSystem, UncertainSystem};
use crate::socp::ControlledSystem;

/// Physical constants of the benchmark rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivetrainParams {
    /// Flywheel inertia J (kg m^2).
    pub inertia: f64,
    /// Spring constant k (N/m).
    pub spring: f64,
    /// Damper constant b (N s/m).
    pub damper: f64,
    /// Eccentric load radius r (m).
    pub eccentric_radius: f64,
    /// Suspension distance l (m).
    pub suspension_distance: f64,
}

impl Default for DrivetrainParams {
    fn default() -> Self {
        Self {
            inertia: 1.0,
            spring: 1.0,
            damper: 0.5,
            eccentric_radius: 1.0,
            suspension_distance: 1.5,
        }
    }
}

impl DrivetrainParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.inertia > 0.0
            && self.spring > 0.0
            && self.damper > 0.0
            && self.eccentric_radius > 0.0
            && self.suspension_distance > 0.0;
        if !all_positive {
            return Err(Error::InvalidSpace(
                "drivetrain parameters must be positive".into(),
            ));
        }
        if self.suspension_distance <= self.eccentric_radius {
            return Err(Error::InvalidSpace(
                "suspension distance must exceed the eccentric radius".into(),
            ));
        }
        Ok(())
    }

    /// Squared spring-damper lever length `c(theta)`.
    fn chord_sq(&self, theta: f64) -> f64 {
        let r = self.eccentric_radius;
        let l = self.suspension_distance;
        r * r + l * l - 2.0 * r * l * theta.cos()
    }
}

/// Uncertain rest angle `theta0 = pi/2 + omega pi/4` for `omega ~ U(-1, 1)`.
pub fn rest_angle(omega: f64) -> f64 {
    PI / 2.0 + omega * PI / 4.0
}

/// Parameter space of the rest-angle uncertainty.
pub fn rest_angle_space() -> ParameterSpace {
    ParameterSpace::univariate(Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap()
}

/// Nonlinear spring torque `T_k`: spring force `k (chord - rest length)`
/// times the moment arm `r l sin(theta) / chord`.
pub fn spring_torque(theta: f64, theta0: f64, params: &DrivetrainParams) -> f64 {
    let r = params.eccentric_radius;
    let l = params.suspension_distance;
    let rest_over_chord = (params.chord_sq(theta0) / params.chord_sq(theta)).sqrt();
    params.spring * (1.0 - rest_over_chord) * r * l * theta.sin()
}

/// Nonlinear damper torque `T_b`.
pub fn damper_torque(theta: f64, theta_dot: f64, params: &DrivetrainParams) -> f64 {
    let r = params.eccentric_radius;
    let l = params.suspension_distance;
    let sin = theta.sin();
    params.damper * r * r * l * l * sin * sin / params.chord_sq(theta) * theta_dot
}

/// State derivative of `(theta, theta_dot)` under input torque `u`.
pub fn state_derivative(
    state: &DVector<f64>,
    u: f64,
    theta0: f64,
    params: &DrivetrainParams,
) -> DVector<f64> {
    let theta = state[0];
    let theta_dot = state[1];
    let accel = (u - spring_torque(theta, theta0, params)
        - damper_torque(theta, theta_dot, params))
        / params.inertia;
    DVector::from_vec(vec![theta_dot, accel])
}

/// Smoothed-ramp reference `(r1, r1', r1'')`: parabolic blend for `t < 2`,
/// constant slope `pi/2` afterwards.
pub fn reference_trajectory(t: f64) -> (f64, f64, f64) {
    if t < 2.0 {
        (PI / 8.0 * t * t + PI / 2.0, PI / 4.0 * t, PI / 4.0)
    } else {
        (PI / 2.0 * t, PI / 2.0, 0.0)
    }
}

/// The two step-input experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Step of 0.5 N m; the response bifurcates over the rest-angle range.
    One,
    /// Step of 1 N m; rotation is sustained for every rest angle.
    Two,
}

impl Scenario {
    pub fn step_torque(&self) -> f64 {
        match self {
            Scenario::One => 0.5,
            Scenario::Two => 1.0,
        }
    }
}

/// Constant-torque start-up from rest as an uncertain ODE in `omega`.
pub fn step_system(
    params: DrivetrainParams,
    torque: f64,
) -> impl UncertainSystem {
    FnSystem::new(
        2,
        |omega: &[f64]| DVector::from_vec(vec![rest_angle(omega[0]), 0.0]),
        move |_t: f64, state: &DVector<f64>, omega: &[f64]| {
            state_derivative(state, torque, rest_angle(omega[0]), &params)
        },
    )
}

/// Computed-torque feedforward along the reference at the nominal rest angle:
/// `u = J r1'' + T_k(r1) + T_b(r1, r1')`.
pub fn computed_torque(t: f64, params: &DrivetrainParams) -> f64 {
    let (r1, r1_dot, r1_ddot) = reference_trajectory(t);
    let theta0 = rest_angle(0.0);
    params.inertia * r1_ddot
        + spring_torque(r1, theta0, params)
        + damper_torque(r1, r1_dot, params)
}

/// The drivetrain as a controlled uncertain system (torque input).
#[derive(Debug, Clone, Copy, Default)]
pub struct Drivetrain {
    pub params: DrivetrainParams,
}

impl ControlledSystem for Drivetrain {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, omega: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![rest_angle(omega[0]), 0.0])
    }

    fn dynamics(&self, state: &DVector<f64>, control: &DVector<f64>, omega: &[f64]) -> DVector<f64> {
        state_derivative(state, control[0], rest_angle(omega[0]), &self.params)
    }
}
