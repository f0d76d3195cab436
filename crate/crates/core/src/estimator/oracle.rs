//! Stacked-state reference for delayed fusion.
//!
//! The state at the measurement's origin step is copied into a second block
//! that is carried forward unchanged (identity dynamics, no process noise)
//! while the first block evolves. The delayed measurement then observes the
//! carried block through an ordinary Kalman update, and the first block's
//! marginal is returned. Nothing here touches the history buffer or the
//! error-propagation product, so it checks those independently.

use nalgebra::{DMatrix, DVector};

use super::{invert_innovation, symmetrized, EstimatorError, GaussianEstimate, LinearModel};

/// One step between the origin and the arrival of the delayed measurement.
#[derive(Debug, Clone)]
pub struct OracleStep {
    /// `h` and `r` are used for `interim`; `a`, `b` and `q` propagate to the next step.
    pub model: LinearModel,
    pub input: DVector<f64>,
    /// A measurement of the current state fused at this step before propagating.
    pub interim: Option<DVector<f64>>,
}

/// How interim measurements act on the stacked state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterimPolicy {
    /// Interim measurements correct only the running block with the ordinary
    /// Kalman gain; the carried block stays at the origin prior. This is the
    /// estimator whose innovation is taken against the origin-step prior.
    OriginPrior,
    /// Interim measurements update the whole stacked state, giving the exact
    /// conditional posterior of the current state given every measurement.
    FullConditional,
}

fn block_diag(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, c1) = top.shape();
    let (r2, c2) = bottom.shape();
    let mut out = DMatrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(top);
    out.view_mut((r1, c1), (r2, c2)).copy_from(bottom);
    out
}

/// `[H 0]` when `current`, `[0 H]` otherwise.
fn stacked_observation(h: &DMatrix<f64>, current: bool) -> DMatrix<f64> {
    let (q, d) = h.shape();
    let mut out = DMatrix::zeros(q, 2 * d);
    let col = if current { 0 } else { d };
    out.view_mut((0, col), (q, d)).copy_from(h);
    out
}

struct Stacked {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    d: usize,
}

impl Stacked {
    fn optimal_update(
        &mut self,
        h_stacked: &DMatrix<f64>,
        r: &DMatrix<f64>,
        z: &DVector<f64>,
    ) -> Result<(), EstimatorError> {
        let s = h_stacked * &self.cov * h_stacked.transpose() + r;
        let gain = &self.cov * h_stacked.transpose() * invert_innovation(&s)?;
        self.mean += &gain * (z - h_stacked * &self.mean);
        let n = 2 * self.d;
        self.cov = symmetrized(&((DMatrix::identity(n, n) - &gain * h_stacked) * &self.cov));
        Ok(())
    }

    /// Kalman update of the running block only, covariance in Joseph form
    /// because the stacked gain is not the stacked optimum.
    fn running_block_update(
        &mut self,
        h: &DMatrix<f64>,
        r: &DMatrix<f64>,
        z: &DVector<f64>,
    ) -> Result<(), EstimatorError> {
        let d = self.d;
        let p_run = self.cov.view((0, 0), (d, d)).clone_owned();
        let s = h * &p_run * h.transpose() + r;
        let k_run = &p_run * h.transpose() * invert_innovation(&s)?;
        let mut gain = DMatrix::zeros(2 * d, h.nrows());
        gain.view_mut((0, 0), (d, h.nrows())).copy_from(&k_run);
        let h_stacked = stacked_observation(h, true);
        self.mean += &gain * (z - &h_stacked * &self.mean);
        let g = DMatrix::identity(2 * d, 2 * d) - &gain * &h_stacked;
        self.cov = symmetrized(&(&g * &self.cov * g.transpose() + &gain * r * gain.transpose()));
        Ok(())
    }

    fn propagate(&mut self, model: &LinearModel, u: &DVector<f64>) {
        let d = self.d;
        let a = block_diag(&model.a, &DMatrix::identity(d, d));
        let q = block_diag(&model.q, &DMatrix::zeros(d, d));
        let running = &model.a * self.mean.rows(0, d) + &model.b * u;
        self.mean.rows_mut(0, d).copy_from(&running);
        self.cov = symmetrized(&(&a * &self.cov * a.transpose() + q));
    }
}

/// Posterior of the current state after fusing `delayed`, a measurement of
/// the origin-step state through `(origin_h, origin_r)`.
///
/// `origin_prior` is the priori estimate at the origin step and `steps` holds
/// one entry per step from the origin up to, not including, the arrival step.
pub fn augmented_oracle(
    origin_prior: &GaussianEstimate,
    steps: &[OracleStep],
    delayed: &DVector<f64>,
    origin_h: &DMatrix<f64>,
    origin_r: &DMatrix<f64>,
    policy: InterimPolicy,
) -> Result<GaussianEstimate, EstimatorError> {
    let d = origin_prior.dim();
    let mismatch = |what: String| EstimatorError::DimensionMismatch(what);
    if origin_h.ncols() != d || delayed.len() != origin_h.nrows() {
        return Err(mismatch(format!(
            "state {d}, H {:?}, measurement {}",
            origin_h.shape(),
            delayed.len()
        )));
    }
    for s in steps {
        if s.model.state_dim() != d || s.input.len() != s.model.input_dim() {
            return Err(mismatch("oracle step dimensions".into()));
        }
        if let Some(z) = &s.interim {
            if z.len() != s.model.meas_dim() {
                return Err(mismatch("interim measurement dimension".into()));
            }
        }
    }

    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(&origin_prior.mean);
    mean.rows_mut(d, d).copy_from(&origin_prior.mean);
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    for (r, c) in [(0, 0), (0, d), (d, 0), (d, d)] {
        cov.view_mut((r, c), (d, d))
            .copy_from(&origin_prior.covariance);
    }
    let mut stacked = Stacked { mean, cov, d };

    for s in steps {
        if let Some(z) = &s.interim {
            match policy {
                InterimPolicy::OriginPrior => {
                    stacked.running_block_update(&s.model.h, &s.model.r, z)?
                }
                InterimPolicy::FullConditional => {
                    stacked.optimal_update(&stacked_observation(&s.model.h, true), &s.model.r, z)?
                }
            }
        }
        stacked.propagate(&s.model, &s.input);
    }
    stacked.optimal_update(&stacked_observation(origin_h, false), origin_r, delayed)?;

    GaussianEstimate::new(
        stacked.mean.rows(0, d).clone_owned(),
        symmetrized(&stacked.cov.view((0, 0), (d, d)).clone_owned()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::kf_update;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_conditional_variance() {
        // Var(x_k | z_i) with P_i = 2, A = 1, Q = 0.5, R = 1: 2.5 - 2^2 / 3.
        let model = LinearModel::new(s(1.0), s(0.0), s(1.0), s(0.5), s(1.0)).unwrap();
        let prior = GaussianEstimate::new(DVector::from_element(1, 0.0), s(2.0)).unwrap();
        let steps = [OracleStep {
            model: model.clone(),
            input: DVector::from_element(1, 0.0),
            interim: None,
        }];
        let post = augmented_oracle(
            &prior,
            &steps,
            &DVector::from_element(1, 3.0),
            &model.h,
            &model.r,
            InterimPolicy::OriginPrior,
        )
        .unwrap();
        assert!((post.covariance[(0, 0)] - 7.0 / 6.0).abs() < 1e-12);
        assert!((post.mean[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_delay_is_plain_update() {
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
            DMatrix::identity(2, 2),
            s(0.4),
        )
        .unwrap();
        let prior = GaussianEstimate::new(
            DVector::from_vec(vec![0.5, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
        )
        .unwrap();
        let z = DVector::from_element(1, 0.9);
        let oracle = augmented_oracle(
            &prior,
            &[],
            &z,
            &model.h,
            &model.r,
            InterimPolicy::FullConditional,
        )
        .unwrap();
        let direct = kf_update(&prior, &model, &z).unwrap();
        assert!((oracle.mean - direct.mean).amax() < 1e-12);
        assert!((oracle.covariance - direct.covariance).amax() < 1e-12);
    }

    #[test]
    fn interim_fusion_separates_the_policies() {
        // One current measurement at the origin step, then the delayed one.
        // Exact posterior variance is 1/3; the origin-prior estimator's is 3/8.
        let model = LinearModel::new(s(1.0), s(0.0), s(1.0), s(0.0), s(1.0)).unwrap();
        let prior = GaussianEstimate::new(DVector::from_element(1, 0.0), s(1.0)).unwrap();
        let steps = [OracleStep {
            model: model.clone(),
            input: DVector::from_element(1, 0.0),
            interim: Some(DVector::from_element(1, 1.0)),
        }];
        let z = DVector::from_element(1, 1.0);
        let frozen = augmented_oracle(
            &prior,
            &steps,
            &z,
            &model.h,
            &model.r,
            InterimPolicy::OriginPrior,
        )
        .unwrap();
        let exact = augmented_oracle(
            &prior,
            &steps,
            &z,
            &model.h,
            &model.r,
            InterimPolicy::FullConditional,
        )
        .unwrap();
        assert!((exact.covariance[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
        assert!((frozen.covariance[(0, 0)] - 3.0 / 8.0).abs() < 1e-12);
    }
}
