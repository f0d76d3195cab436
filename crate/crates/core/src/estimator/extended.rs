//! Extended filters for the differential-drive robot.
//!
//! The robot's pose is measured directly (`h(x) = x`, `H = V = I`), so the
//! only nonlinearity is in the motion model.

use nalgebra::{DMatrix, DVector, Matrix3};

use super::history::{compute_f, HistoryBuffer, HistoryRecord};
use super::{
    delayed_correction, invert_innovation, symmetrized, DelayedMeasurement, EstimatorError,
    FuseOutcome, GaussianEstimate, Step,
};
use crate::kinematics::{self, wrap_angle, Pose, RobotParams, WheelSpeeds};

fn to_dmatrix(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

fn pose_of(est: &GaussianEstimate) -> Result<Pose, EstimatorError> {
    if est.dim() != 3 {
        return Err(EstimatorError::DimensionMismatch(format!(
            "robot estimate must have 3 states, got {}",
            est.dim()
        )));
    }
    Ok(Pose {
        x: est.mean[0],
        y: est.mean[1],
        theta: est.mean[2],
    })
}

fn pose_vector(p: &Pose) -> DVector<f64> {
    DVector::from_vec(vec![p.x, p.y, p.theta])
}

/// Time update plus the state Jacobian it used.
fn transition(
    est: &GaussianEstimate,
    u: WheelSpeeds,
    params: &RobotParams,
    delta: f64,
) -> Result<(GaussianEstimate, DMatrix<f64>), EstimatorError> {
    let pose = pose_of(est)?;
    let next = kinematics::step(pose, u, params)?;
    let a = to_dmatrix(&kinematics::state_jacobian(&pose, u, params));
    let w = kinematics::noise_jacobian(&pose, params);
    let q = kinematics::process_noise_cov(u, delta)?;
    let wqw = w * q * w.transpose();
    let covariance = &a * &est.covariance * a.transpose() + to_dmatrix(&wqw);
    Ok((
        GaussianEstimate {
            mean: pose_vector(&next),
            covariance: symmetrized(&covariance),
        },
        a,
    ))
}

/// Propagates the pose estimate with the input that reached the robot.
///
/// The Jacobians and input-noise covariance are evaluated at the previous
/// posterior and `u_delayed`.
pub fn poekf_time_update(
    est: &GaussianEstimate,
    u_delayed: WheelSpeeds,
    params: &RobotParams,
    delta: f64,
) -> Result<GaussianEstimate, EstimatorError> {
    transition(est, u_delayed, params, delta).map(|(e, _)| e)
}

fn pose_innovation(
    z: &DVector<f64>,
    predicted: &DVector<f64>,
) -> Result<DVector<f64>, EstimatorError> {
    if z.len() != 3 || predicted.len() != 3 {
        return Err(EstimatorError::DimensionMismatch(
            "pose measurements have 3 components".into(),
        ));
    }
    let mut innovation = z - predicted;
    innovation[2] = wrap_angle(innovation[2]);
    Ok(innovation)
}

fn rewrap(mut est: GaussianEstimate) -> GaussianEstimate {
    est.mean[2] = wrap_angle(est.mean[2]);
    est
}

/// Fuses a delayed pose measurement. The heading innovation is wrapped to
/// (-pi, pi] before the gain is applied.
pub fn poekf_data_update(
    est: &GaussianEstimate,
    history: &HistoryBuffer,
    z: &DelayedMeasurement,
    meas_noise: &Matrix3<f64>,
) -> Result<(GaussianEstimate, DMatrix<f64>), EstimatorError> {
    pose_of(est)?;
    let f = compute_f(history, z.origin_step, z.arrival_step)?;
    let origin = history
        .get(z.origin_step)
        .ok_or(EstimatorError::DelayExceedsHistory {
            origin: z.origin_step,
            oldest: history.oldest_step(),
        })?;
    let innovation = pose_innovation(&z.value, &origin.priori.mean)?;
    let h = DMatrix::identity(3, 3);
    let (next, gain) = delayed_correction(
        est,
        &origin.priori.covariance,
        &f,
        &h,
        &to_dmatrix(meas_noise),
        &innovation,
    )?;
    Ok((rewrap(next), gain))
}

/// Standard EKF correction with a direct pose measurement.
pub fn ekf_update(
    est: &GaussianEstimate,
    z: &Pose,
    meas_noise: &Matrix3<f64>,
) -> Result<GaussianEstimate, EstimatorError> {
    pose_of(est)?;
    let p = &est.covariance;
    let s = p + to_dmatrix(meas_noise);
    let gain = p * invert_innovation(&s)?;
    let innovation = pose_innovation(&pose_vector(z), &est.mean)?;
    let mean = &est.mean + &gain * innovation;
    let covariance = (DMatrix::identity(3, 3) - &gain) * p;
    Ok(rewrap(GaussianEstimate {
        mean,
        covariance: symmetrized(&covariance),
    }))
}

fn pose_estimate(initial: Pose, covariance: &Matrix3<f64>) -> GaussianEstimate {
    GaussianEstimate {
        mean: pose_vector(&initial),
        covariance: to_dmatrix(covariance),
    }
}

/// Robot localization filter that fuses timestamped, delayed pose
/// measurements and propagates with the input actually applied.
#[derive(Debug, Clone)]
pub struct PoExtendedKalmanFilter {
    params: RobotParams,
    delta: f64,
    meas_noise: Matrix3<f64>,
    estimate: GaussianEstimate,
    history: HistoryBuffer,
    step: Step,
    last_fused_origin: Option<Step>,
    fused: usize,
    rejected: usize,
}

impl PoExtendedKalmanFilter {
    pub fn new(
        params: RobotParams,
        delta: f64,
        meas_noise: Matrix3<f64>,
        initial: Pose,
        initial_cov: Matrix3<f64>,
        capacity: usize,
    ) -> Result<Self, EstimatorError> {
        kinematics::process_noise_cov(WheelSpeeds::ZERO, delta)?;
        let estimate = pose_estimate(initial, &initial_cov);
        let mut history = HistoryBuffer::new(capacity)?;
        history.push(HistoryRecord::new(
            0,
            estimate.clone(),
            DMatrix::identity(3, 3),
        ))?;
        Ok(Self {
            params,
            delta,
            meas_noise,
            estimate,
            history,
            step: 0,
            last_fused_origin: None,
            fused: 0,
            rejected: 0,
        })
    }

    pub fn estimate(&self) -> &GaussianEstimate {
        &self.estimate
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.estimate.mean[0],
            y: self.estimate.mean[1],
            theta: self.estimate.mean[2],
        }
    }

    pub fn step(&self) -> Step {
        self.step
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn fused_count(&self) -> usize {
        self.fused
    }

    pub fn rejected_count(&self) -> usize {
        self.rejected
    }

    pub fn time_update(&mut self, u_delayed: WheelSpeeds) -> Result<(), EstimatorError> {
        let (next, a) = transition(&self.estimate, u_delayed, &self.params, self.delta)?;
        self.history.set_state_jacobian(self.step, a)?;
        self.step += 1;
        self.history.push(HistoryRecord::new(
            self.step,
            next.clone(),
            DMatrix::identity(3, 3),
        ))?;
        self.estimate = next;
        Ok(())
    }

    pub fn fuse(&mut self, z: &Pose, origin: Step) -> Result<FuseOutcome, EstimatorError> {
        let z = DelayedMeasurement::new(pose_vector(z), origin, self.step)?;
        if let Some(last) = self.last_fused_origin {
            if origin < last {
                self.rejected += 1;
                return Ok(FuseOutcome::RejectedOutOfOrder {
                    origin,
                    last_fused: last,
                });
            }
        }
        let (next, gain) = poekf_data_update(&self.estimate, &self.history, &z, &self.meas_noise)?;
        self.history.record_gain(self.step, &gain)?;
        self.estimate = next;
        self.last_fused_origin = Some(origin);
        self.fused += 1;
        Ok(FuseOutcome::Fused { delay: z.delay() })
    }
}

/// Delay-unaware EKF: predicts with whatever input it is handed and treats
/// every measurement as a measurement of the current pose.
#[derive(Debug, Clone)]
pub struct ExtendedKalmanFilter {
    params: RobotParams,
    delta: f64,
    meas_noise: Matrix3<f64>,
    estimate: GaussianEstimate,
    fused: usize,
}

impl ExtendedKalmanFilter {
    pub fn new(
        params: RobotParams,
        delta: f64,
        meas_noise: Matrix3<f64>,
        initial: Pose,
        initial_cov: Matrix3<f64>,
    ) -> Result<Self, EstimatorError> {
        kinematics::process_noise_cov(WheelSpeeds::ZERO, delta)?;
        Ok(Self {
            params,
            delta,
            meas_noise,
            estimate: pose_estimate(initial, &initial_cov),
            fused: 0,
        })
    }

    pub fn estimate(&self) -> &GaussianEstimate {
        &self.estimate
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.estimate.mean[0],
            y: self.estimate.mean[1],
            theta: self.estimate.mean[2],
        }
    }

    pub fn fused_count(&self) -> usize {
        self.fused
    }

    pub fn time_update(&mut self, u: WheelSpeeds) -> Result<(), EstimatorError> {
        self.estimate = poekf_time_update(&self.estimate, u, &self.params, self.delta)?;
        Ok(())
    }

    pub fn update(&mut self, z: &Pose) -> Result<(), EstimatorError> {
        self.estimate = ekf_update(&self.estimate, z, &self.meas_noise)?;
        self.fused += 1;
        Ok(())
    }
}
