//! Bounded per-step history used to fuse measurements that arrive late.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use super::{EstimatorError, GaussianEstimate, Step};

/// Snapshot kept for every filter step.
///
/// `state_jacobian` is the transition matrix used when leaving this step, so it
/// is only known once the next time update has run.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: Step,
    pub priori: GaussianEstimate,
    pub state_jacobian: Option<DMatrix<f64>>,
    pub gain: DMatrix<f64>,
    pub meas_jacobian: DMatrix<f64>,
}

impl HistoryRecord {
    /// A record for a step where nothing has been fused yet.
    pub fn new(step: Step, priori: GaussianEstimate, meas_jacobian: DMatrix<f64>) -> Self {
        let gain = DMatrix::zeros(priori.dim(), meas_jacobian.nrows());
        Self {
            step,
            priori,
            state_jacobian: None,
            gain,
            meas_jacobian,
        }
    }

    /// `A (I - K H)` for this step, or `A` alone when nothing was fused.
    pub fn error_transition(&self) -> Result<DMatrix<f64>, EstimatorError> {
        let a = self
            .state_jacobian
            .as_ref()
            .ok_or(EstimatorError::MissingTransition { step: self.step })?;
        if self.gain.iter().all(|g| *g == 0.0) {
            return Ok(a.clone());
        }
        let d = a.nrows();
        Ok(a * (DMatrix::identity(d, d) - &self.gain * &self.meas_jacobian))
    }
}

#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    records: VecDeque<HistoryRecord>,
}

impl HistoryBuffer {
    pub const DEFAULT_CAPACITY: usize = 64;

    /// A buffer retaining at most `capacity` records, the current step
    /// included. The longest fusable delay is therefore `capacity - 1`.
    pub fn new(capacity: usize) -> Result<Self, EstimatorError> {
        if capacity == 0 {
            return Err(EstimatorError::InvalidConfig(
                "history capacity must be >= 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            records: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn oldest_step(&self) -> Option<Step> {
        self.records.front().map(|r| r.step)
    }

    pub fn latest_step(&self) -> Option<Step> {
        self.records.back().map(|r| r.step)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records.iter()
    }

    /// Appends a record for the step after the latest one, evicting the
    /// oldest record when full.
    pub fn push(&mut self, record: HistoryRecord) -> Result<(), EstimatorError> {
        if let Some(last) = self.latest_step() {
            if record.step != last + 1 {
                return Err(EstimatorError::HistoryGap {
                    expected: last + 1,
                    found: record.step,
                });
            }
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }

    fn index_of(&self, step: Step) -> Option<usize> {
        let oldest = self.oldest_step()?;
        let idx = usize::try_from(step.checked_sub(oldest)?).ok()?;
        (idx < self.records.len()).then_some(idx)
    }

    pub fn get(&self, step: Step) -> Option<&HistoryRecord> {
        self.index_of(step).map(|i| &self.records[i])
    }

    pub fn get_mut(&mut self, step: Step) -> Option<&mut HistoryRecord> {
        self.index_of(step).map(move |i| &mut self.records[i])
    }

    pub fn set_state_jacobian(
        &mut self,
        step: Step,
        a: DMatrix<f64>,
    ) -> Result<(), EstimatorError> {
        let oldest = self.oldest_step();
        let rec = self
            .get_mut(step)
            .ok_or(EstimatorError::DelayExceedsHistory {
                origin: step,
                oldest,
            })?;
        rec.state_jacobian = Some(a);
        Ok(())
    }

    /// Records a gain applied at `step`.
    ///
    /// A second fusion at the same step composes with the first so that
    /// `I - K H` equals `(I - K2 H)(I - K1 H)`, i.e. `K = K1 + K2 - K2 H K1`.
    pub fn record_gain(&mut self, step: Step, gain: &DMatrix<f64>) -> Result<(), EstimatorError> {
        let oldest = self.oldest_step();
        let rec = self
            .get_mut(step)
            .ok_or(EstimatorError::DelayExceedsHistory {
                origin: step,
                oldest,
            })?;
        if rec.gain.shape() != gain.shape() {
            return Err(EstimatorError::DimensionMismatch(format!(
                "gain {:?} vs recorded {:?}",
                gain.shape(),
                rec.gain.shape()
            )));
        }
        let combined = &rec.gain + gain - gain * &rec.meas_jacobian * &rec.gain;
        rec.gain = combined;
        Ok(())
    }
}

/// Error-propagation product from `origin` to `current`:
/// `[A_{k-1}(I - K_{k-1} H_{k-1})] ... [A_i (I - K_i H_i)]`, newest factor on
/// the left. Returns the identity when `origin == current`.
pub fn compute_f(
    history: &HistoryBuffer,
    origin: Step,
    current: Step,
) -> Result<DMatrix<f64>, EstimatorError> {
    if origin > current {
        return Err(EstimatorError::FutureMeasurement { origin, current });
    }
    let exceeds = || EstimatorError::DelayExceedsHistory {
        origin,
        oldest: history.oldest_step(),
    };
    let first = history.get(origin).ok_or_else(exceeds)?;
    let d = first.priori.dim();
    let mut f = DMatrix::identity(d, d);
    for step in origin..current {
        let rec = history.get(step).ok_or_else(exceeds)?;
        f = rec.error_transition()? * f;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn scalar_record(step: Step, a: f64, gain: f64) -> HistoryRecord {
        let mut rec = HistoryRecord::new(
            step,
            GaussianEstimate::new(
                DVector::from_element(1, 0.0),
                DMatrix::from_element(1, 1, 1.0),
            )
            .unwrap(),
            DMatrix::from_element(1, 1, 1.0),
        );
        rec.state_jacobian = Some(DMatrix::from_element(1, 1, a));
        rec.gain = DMatrix::from_element(1, 1, gain);
        rec
    }

    #[test]
    fn zero_delay_is_identity() {
        let mut h = HistoryBuffer::new(4).unwrap();
        h.push(scalar_record(7, 5.0, 0.3)).unwrap();
        assert_eq!(compute_f(&h, 7, 7).unwrap(), DMatrix::identity(1, 1));
    }

    #[test]
    fn single_bare_factor() {
        let mut h = HistoryBuffer::new(4).unwrap();
        h.push(scalar_record(0, 1.0, 0.0)).unwrap();
        h.push(scalar_record(1, 1.0, 0.0)).unwrap();
        assert_eq!(compute_f(&h, 0, 1).unwrap(), DMatrix::identity(1, 1));
    }

    #[test]
    fn two_factor_product() {
        let mut h = HistoryBuffer::new(4).unwrap();
        h.push(scalar_record(10, 2.0, 0.0)).unwrap();
        h.push(scalar_record(11, 3.0, 1.0 / 3.0)).unwrap();
        h.push(scalar_record(12, 1.0, 0.0)).unwrap();
        let f = compute_f(&h, 10, 12).unwrap();
        assert!((f[(0, 0)] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn order_is_newest_leftmost() {
        let mut h = HistoryBuffer::new(4).unwrap();
        let mut r0 = HistoryRecord::new(
            0,
            GaussianEstimate::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2),
        );
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 1.0]);
        r0.state_jacobian = Some(a0.clone());
        let mut r1 = r0.clone();
        r1.step = 1;
        r1.state_jacobian = Some(a1.clone());
        let mut r2 = r0.clone();
        r2.step = 2;
        r2.state_jacobian = None;
        h.push(r0).unwrap();
        h.push(r1).unwrap();
        h.push(r2).unwrap();
        assert_eq!(compute_f(&h, 0, 2).unwrap(), &a1 * &a0);
        assert_ne!(&a1 * &a0, &a0 * &a1);
    }

    #[test]
    fn eviction_and_gaps() {
        let mut h = HistoryBuffer::new(2).unwrap();
        h.push(scalar_record(0, 1.0, 0.0)).unwrap();
        h.push(scalar_record(1, 1.0, 0.0)).unwrap();
        h.push(scalar_record(2, 1.0, 0.0)).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h.oldest_step(), Some(1));
        assert!(matches!(
            compute_f(&h, 0, 2),
            Err(EstimatorError::DelayExceedsHistory { origin: 0, .. })
        ));
        assert!(matches!(
            h.push(scalar_record(5, 1.0, 0.0)),
            Err(EstimatorError::HistoryGap {
                expected: 3,
                found: 5
            })
        ));
        assert!(HistoryBuffer::new(0).is_err());
    }

    #[test]
    fn missing_transition_is_reported() {
        let mut h = HistoryBuffer::new(3).unwrap();
        let mut r = scalar_record(0, 1.0, 0.0);
        r.state_jacobian = None;
        h.push(r).unwrap();
        h.push(scalar_record(1, 1.0, 0.0)).unwrap();
        assert!(matches!(
            compute_f(&h, 0, 1),
            Err(EstimatorError::MissingTransition { step: 0 })
        ));
    }

    #[test]
    fn repeated_gain_composes() {
        let mut h = HistoryBuffer::new(2).unwrap();
        h.push(scalar_record(0, 1.0, 0.0)).unwrap();
        h.record_gain(0, &DMatrix::from_element(1, 1, 0.5)).unwrap();
        h.record_gain(0, &DMatrix::from_element(1, 1, 0.5)).unwrap();
        // (1 - 0.5)(1 - 0.5) = 1 - 0.75
        assert!((h.get(0).unwrap().gain[(0, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn f_is_deterministic() {
        let mut h = HistoryBuffer::new(8).unwrap();
        for s in 0..6 {
            h.push(scalar_record(s, 1.0 + s as f64 * 0.1, 0.2)).unwrap();
        }
        let a = compute_f(&h, 1, 5).unwrap();
        let b = compute_f(&h, 1, 5).unwrap();
        assert_eq!(a, b);
    }
}
