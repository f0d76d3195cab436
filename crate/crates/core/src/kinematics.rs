//! Differential-drive motion model.
//!
//! State is the wheel-axis centre `(x, y)` and heading `theta`. One step
//! advances the pose by one sample period using the heading at the start of
//! the step. Heading changes with `omega_left - omega_right`; the sign is a
//! convention and is used consistently by the Jacobians below.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("invalid robot parameter {name} = {value} (must be finite and > 0)")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("process noise scale must be finite and >= 0, got {0}")]
    NegativeDelta(f64),
}

/// Wraps an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotParams {
    wheel_radius: f64,
    wheel_base: f64,
    sample_period: f64,
}

impl RobotParams {
    pub fn new(
        wheel_radius: f64,
        wheel_base: f64,
        sample_period: f64,
    ) -> Result<Self, KinematicsError> {
        for (name, value) in [
            ("wheel_radius", wheel_radius),
            ("wheel_base", wheel_base),
            ("sample_period", sample_period),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(KinematicsError::InvalidParam { name, value });
            }
        }
        Ok(Self {
            wheel_radius,
            wheel_base,
            sample_period,
        })
    }

    /// Wheel radius in meters.
    pub fn wheel_radius(&self) -> f64 {
        self.wheel_radius
    }

    /// Distance between the wheels in meters.
    pub fn wheel_base(&self) -> f64 {
        self.wheel_base
    }

    /// Sample period in seconds.
    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Heading rate produced by the given wheel speeds, rad/s.
    pub fn turn_rate(&self, u: WheelSpeeds) -> f64 {
        self.wheel_radius / self.wheel_base * (u.omega_left - u.omega_right)
    }
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            wheel_radius: 0.05,
            wheel_base: 0.51,
            sample_period: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    /// Builds a pose, wrapping the heading.
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Component-wise `self - other` with the heading difference wrapped.
    pub fn deviation_from(&self, other: &Pose) -> Vector3<f64> {
        Vector3::new(
            self.x - other.x,
            self.y - other.y,
            wrap_angle(self.theta - other.theta),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WheelSpeeds {
    pub omega_left: f64,
    pub omega_right: f64,
}

impl WheelSpeeds {
    pub const ZERO: WheelSpeeds = WheelSpeeds {
        omega_left: 0.0,
        omega_right: 0.0,
    };

    pub fn new(omega_left: f64, omega_right: f64) -> Self {
        Self {
            omega_left,
            omega_right,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega_left.is_finite() && self.omega_right.is_finite()
    }
}

/// Advances `pose` by one sample period under wheel speeds `u`.
pub fn step(pose: Pose, u: WheelSpeeds, params: &RobotParams) -> Result<Pose, KinematicsError> {
    if !pose.is_finite() {
        return Err(KinematicsError::NonFinite("pose"));
    }
    if !u.is_finite() {
        return Err(KinematicsError::NonFinite("wheel speeds"));
    }
    let ts = params.sample_period;
    let v = translational_speed(u, params);
    let (sin, cos) = pose.theta.sin_cos();
    Ok(Pose {
        x: pose.x + ts * v * cos,
        y: pose.y + ts * v * sin,
        theta: wrap_angle(pose.theta + ts * params.turn_rate(u)),
    })
}

/// `v_c = R/2 * (omega_left + omega_right)`.
pub fn translational_speed(u: WheelSpeeds, params: &RobotParams) -> f64 {
    params.wheel_radius / 2.0 * (u.omega_left + u.omega_right)
}

/// Jacobian of [`step`] with respect to the pose.
pub fn state_jacobian(pose_estimate: &Pose, u: WheelSpeeds, params: &RobotParams) -> Matrix3<f64> {
    let ts_v = params.sample_period * translational_speed(u, params);
    let (sin, cos) = pose_estimate.theta.sin_cos();
    Matrix3::new(
        1.0,
        0.0,
        -ts_v * sin, //
        0.0,
        1.0,
        ts_v * cos, //
        0.0,
        0.0,
        1.0,
    )
}

/// Jacobian of the step with respect to additive (translational, rotational)
/// speed noise.
pub fn noise_jacobian(pose_estimate: &Pose, params: &RobotParams) -> Matrix3x2<f64> {
    let ts = params.sample_period;
    let (sin, cos) = pose_estimate.theta.sin_cos();
    Matrix3x2::new(
        ts * cos,
        0.0, //
        ts * sin,
        0.0, //
        0.0,
        ts,
    )
}

/// Input-noise covariance `diag(delta * omega_right^2, delta * omega_left^2)`.
pub fn process_noise_cov(u: WheelSpeeds, delta: f64) -> Result<Matrix2<f64>, KinematicsError> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(KinematicsError::NegativeDelta(delta));
    }
    Ok(Matrix2::new(
        delta * u.omega_right * u.omega_right,
        0.0,
        0.0,
        delta * u.omega_left * u.omega_left,
    ))
}
