//! Kalman filters that fuse measurements arriving several steps late.
//!
//! A late measurement taken at step `i` and received at step `k` is fused
//! against the priori estimate stored for step `i`, with a gain scaled by the
//! error-propagation product `F` accumulated over steps `i..k`. With no delay
//! everything reduces to the ordinary Kalman filter.

mod extended;
mod history;
mod linear;
mod oracle;

pub use extended::{
    ekf_update, poekf_data_update, poekf_time_update, ExtendedKalmanFilter, PoExtendedKalmanFilter,
};
pub use history::{compute_f, HistoryBuffer, HistoryRecord};
pub use linear::{
    kf_predict, kf_update, kf_update_with_gain, pokf_data_update, pokf_time_update,
    posterior_cov_arbitrary_gain, DelayedKalmanFilter,
};
pub use oracle::{augmented_oracle, InterimPolicy, OracleStep};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::kinematics::KinematicsError;

/// Discrete filter tick.
pub type Step = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("measurement from step {origin} is older than the retained history (oldest step {oldest:?})")]
    DelayExceedsHistory { origin: Step, oldest: Option<Step> },
    #[error("measurement origin {origin} lies after the current step {current}")]
    FutureMeasurement { origin: Step, current: Step },
    #[error("history must be contiguous: expected step {expected}, got {found}")]
    HistoryGap { expected: Step, found: Step },
    #[error("no state transition recorded for step {step}")]
    MissingTransition { step: Step },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Mean and covariance of a Gaussian state estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEstimate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianEstimate {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, EstimatorError> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(EstimatorError::DimensionMismatch(format!(
                "mean has {d} entries but covariance is {:?}",
                covariance.shape()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn symmetrize(&mut self) {
        self.covariance = symmetrized(&self.covariance);
    }

    /// Largest absolute asymmetry `|P_ij - P_ji|`.
    pub fn asymmetry(&self) -> f64 {
        asymmetry(&self.covariance)
    }

    /// Smallest eigenvalue of the symmetric part of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.covariance)
    }
}

pub(crate) fn symmetrized(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

pub fn asymmetry(p: &DMatrix<f64>) -> f64 {
    (p - p.transpose()).amax()
}

pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrized(p)).eigenvalues.min()
}

/// `x_k = A x_{k-1} + B u + w`, `z = H x + v`, `w ~ N(0, Q)`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, EstimatorError> {
        let d = a.nrows();
        let q_dim = h.nrows();
        let ok = a.is_square()
            && b.nrows() == d
            && h.ncols() == d
            && q.shape() == (d, d)
            && r.shape() == (q_dim, q_dim);
        if !ok {
            return Err(EstimatorError::DimensionMismatch(format!(
                "A {:?}, B {:?}, H {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                h.shape(),
                q.shape(),
                r.shape()
            )));
        }
        Ok(Self { a, b, h, q, r })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// A measurement taken at `origin_step` and received at `arrival_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedMeasurement {
    pub value: DVector<f64>,
    pub origin_step: Step,
    pub arrival_step: Step,
}

impl DelayedMeasurement {
    pub fn new(
        value: DVector<f64>,
        origin_step: Step,
        arrival_step: Step,
    ) -> Result<Self, EstimatorError> {
        if arrival_step < origin_step {
            return Err(EstimatorError::FutureMeasurement {
                origin: origin_step,
                current: arrival_step,
            });
        }
        Ok(Self {
            value,
            origin_step,
            arrival_step,
        })
    }

    pub fn delay(&self) -> Step {
        self.arrival_step - self.origin_step
    }
}

/// What a stateful filter did with an incoming measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseOutcome {
    Fused {
        delay: Step,
    },
    /// Origin precedes the origin of the last fused measurement.
    RejectedOutOfOrder {
        origin: Step,
        last_fused: Step,
    },
}

impl FuseOutcome {
    pub fn is_fused(&self) -> bool {
        matches!(self, FuseOutcome::Fused { .. })
    }
}

pub(crate) fn invert_innovation(s: &DMatrix<f64>) -> Result<DMatrix<f64>, EstimatorError> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.inverse());
    }
    s.clone()
        .try_inverse()
        .ok_or(EstimatorError::SingularInnovation)
}

/// Shared correction used by every delayed update:
/// `K = F P_i H^T (H P_i H^T + R)^-1`, `x += K * innovation`,
/// `P = P - K H P_i F^T`.
pub(crate) fn delayed_correction(
    est: &GaussianEstimate,
    origin_cov: &DMatrix<f64>,
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    innovation: &DVector<f64>,
) -> Result<(GaussianEstimate, DMatrix<f64>), EstimatorError> {
    let d = est.dim();
    if origin_cov.shape() != (d, d)
        || f.shape() != (d, d)
        || h.ncols() != d
        || innovation.len() != h.nrows()
    {
        return Err(EstimatorError::DimensionMismatch(format!(
            "state {d}, P_i {:?}, F {:?}, H {:?}, innovation {}",
            origin_cov.shape(),
            f.shape(),
            h.shape(),
            innovation.len()
        )));
    }
    let s = h * origin_cov * h.transpose() + r;
    let s_inv = invert_innovation(&s)?;
    let gain = f * origin_cov * h.transpose() * s_inv;
    let mean = &est.mean + &gain * innovation;
    let covariance = &est.covariance - &gain * h * origin_cov * f.transpose();
    Ok((
        GaussianEstimate {
            mean,
            covariance: symmetrized(&covariance),
        },
        gain,
    ))
}
