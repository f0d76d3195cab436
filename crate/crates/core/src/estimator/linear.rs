//! Linear Kalman filter and its delayed-measurement counterpart.

use nalgebra::{DMatrix, DVector};

use super::history::{compute_f, HistoryBuffer, HistoryRecord};
use super::{
    delayed_correction, invert_innovation, symmetrized, DelayedMeasurement, EstimatorError,
    FuseOutcome, GaussianEstimate, LinearModel, Step,
};

fn check_estimate(est: &GaussianEstimate, model: &LinearModel) -> Result<(), EstimatorError> {
    if est.dim() != model.state_dim() || est.covariance.shape() != (est.dim(), est.dim()) {
        return Err(EstimatorError::DimensionMismatch(format!(
            "estimate of dimension {} against model of dimension {}",
            est.dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// Time update: `(A x + B u, A P A^T + Q)`.
pub fn kf_predict(
    est: &GaussianEstimate,
    model: &LinearModel,
    u: &DVector<f64>,
) -> Result<GaussianEstimate, EstimatorError> {
    check_estimate(est, model)?;
    if u.len() != model.input_dim() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "input has {} entries, B expects {}",
            u.len(),
            model.input_dim()
        )));
    }
    let mean = &model.a * &est.mean + &model.b * u;
    let covariance = &model.a * &est.covariance * model.a.transpose() + &model.q;
    Ok(GaussianEstimate {
        mean,
        covariance: symmetrized(&covariance),
    })
}

/// Measurement update returning the posterior and the gain used.
pub fn kf_update_with_gain(
    est: &GaussianEstimate,
    model: &LinearModel,
    z: &DVector<f64>,
) -> Result<(GaussianEstimate, DMatrix<f64>), EstimatorError> {
    check_estimate(est, model)?;
    if z.len() != model.meas_dim() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "measurement has {} entries, H expects {}",
            z.len(),
            model.meas_dim()
        )));
    }
    let h = &model.h;
    let p = &est.covariance;
    let s = h * p * h.transpose() + &model.r;
    let gain = p * h.transpose() * invert_innovation(&s)?;
    let mean = &est.mean + &gain * (z - h * &est.mean);
    let d = est.dim();
    let covariance = (DMatrix::identity(d, d) - &gain * h) * p;
    Ok((
        GaussianEstimate {
            mean,
            covariance: symmetrized(&covariance),
        },
        gain,
    ))
}

/// Standard measurement update.
pub fn kf_update(
    est: &GaussianEstimate,
    model: &LinearModel,
    z: &DVector<f64>,
) -> Result<GaussianEstimate, EstimatorError> {
    kf_update_with_gain(est, model, z).map(|(e, _)| e)
}

/// Time update driven by the input that reaches the plant this step.
///
/// The arithmetic is that of [`kf_predict`]; only the choice of input differs.
/// `model.b` should be the input matrix belonging to the input's origin step
/// when the model is time-varying.
pub fn pokf_time_update(
    est: &GaussianEstimate,
    model: &LinearModel,
    u_delayed: &DVector<f64>,
) -> Result<GaussianEstimate, EstimatorError> {
    kf_predict(est, model, u_delayed)
}

/// Fuses a measurement taken at `z.origin_step` into the estimate for
/// `z.arrival_step`.
///
/// `history` must hold records for every step from the origin up to the step
/// before arrival. `model.h` / `model.r` are those of the origin step.
pub fn pokf_data_update(
    est: &GaussianEstimate,
    history: &HistoryBuffer,
    z: &DelayedMeasurement,
    model: &LinearModel,
) -> Result<(GaussianEstimate, DMatrix<f64>), EstimatorError> {
    check_estimate(est, model)?;
    if z.value.len() != model.meas_dim() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "measurement has {} entries, H expects {}",
            z.value.len(),
            model.meas_dim()
        )));
    }
    let f = compute_f(history, z.origin_step, z.arrival_step)?;
    let origin = history
        .get(z.origin_step)
        .ok_or(EstimatorError::DelayExceedsHistory {
            origin: z.origin_step,
            oldest: history.oldest_step(),
        })?;
    let innovation = &z.value - &model.h * &origin.priori.mean;
    delayed_correction(
        est,
        &origin.priori.covariance,
        &f,
        &model.h,
        &model.r,
        &innovation,
    )
}

/// Posterior covariance of `x_k + K (z_i - H x_i)` for an arbitrary gain `K`:
/// `P_k - L^T H^T K^T - K H L + K H P_i H^T K^T + K R K^T`, with
/// `L = E[e_i e_k^T]`.
pub fn posterior_cov_arbitrary_gain(
    p_k_minus: &DMatrix<f64>,
    p_i_minus: &DMatrix<f64>,
    l: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EstimatorError> {
    let d = p_k_minus.nrows();
    let q = h.nrows();
    let ok = p_k_minus.shape() == (d, d)
        && p_i_minus.shape() == (d, d)
        && l.shape() == (d, d)
        && h.shape() == (q, d)
        && r.shape() == (q, q)
        && k.shape() == (d, q);
    if !ok {
        return Err(EstimatorError::DimensionMismatch(format!(
            "P_k {:?}, P_i {:?}, L {:?}, H {:?}, R {:?}, K {:?}",
            p_k_minus.shape(),
            p_i_minus.shape(),
            l.shape(),
            h.shape(),
            r.shape(),
            k.shape()
        )));
    }
    let kh = k * h;
    let khl = &kh * l;
    Ok(p_k_minus - khl.transpose() - &khl
        + &kh * p_i_minus * kh.transpose()
        + k * r * k.transpose())
}

/// Stateful linear filter that fuses delayed measurements.
///
/// Each step keeps its priori estimate, transition and fused gain so that a
/// measurement arriving up to `capacity - 1` steps late can be fused.
#[derive(Debug, Clone)]
pub struct DelayedKalmanFilter {
    model: LinearModel,
    estimate: GaussianEstimate,
    history: HistoryBuffer,
    step: Step,
    last_fused_origin: Option<Step>,
    fused: usize,
    rejected: usize,
}

impl DelayedKalmanFilter {
    /// Starts at step 0 with `initial` as the priori estimate.
    pub fn new(
        initial: GaussianEstimate,
        model: LinearModel,
        capacity: usize,
    ) -> Result<Self, EstimatorError> {
        check_estimate(&initial, &model)?;
        let mut history = HistoryBuffer::new(capacity)?;
        history.push(HistoryRecord::new(0, initial.clone(), model.h.clone()))?;
        Ok(Self {
            model,
            estimate: initial,
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

    pub fn step(&self) -> Step {
        self.step
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn fused_count(&self) -> usize {
        self.fused
    }

    pub fn rejected_count(&self) -> usize {
        self.rejected
    }

    /// Replaces the model used from the next operation on.
    pub fn set_model(&mut self, model: LinearModel) -> Result<(), EstimatorError> {
        if model.state_dim() != self.model.state_dim() || model.meas_dim() != self.model.meas_dim()
        {
            return Err(EstimatorError::DimensionMismatch(
                "model dimensions changed".into(),
            ));
        }
        self.model = model;
        Ok(())
    }

    /// Advances one step with the input that reached the plant.
    pub fn time_update(&mut self, u_delayed: &DVector<f64>) -> Result<(), EstimatorError> {
        let next = pokf_time_update(&self.estimate, &self.model, u_delayed)?;
        self.history
            .set_state_jacobian(self.step, self.model.a.clone())?;
        self.step += 1;
        self.history.push(HistoryRecord::new(
            self.step,
            next.clone(),
            self.model.h.clone(),
        ))?;
        self.estimate = next;
        Ok(())
    }

    /// Fuses a measurement taken at `origin` into the current step.
    pub fn fuse(
        &mut self,
        value: DVector<f64>,
        origin: Step,
    ) -> Result<FuseOutcome, EstimatorError> {
        let z = DelayedMeasurement::new(value, origin, self.step)?;
        if let Some(last) = self.last_fused_origin {
            if origin < last {
                self.rejected += 1;
                return Ok(FuseOutcome::RejectedOutOfOrder {
                    origin,
                    last_fused: last,
                });
            }
        }
        let (next, gain) = pokf_data_update(&self.estimate, &self.history, &z, &self.model)?;
        self.history.record_gain(self.step, &gain)?;
        self.estimate = next;
        self.last_fused_origin = Some(origin);
        self.fused += 1;
        Ok(FuseOutcome::Fused { delay: z.delay() })
    }
}
