//! Randomized property suites for the linear delayed-fusion filter.
//!
//! Each suite draws its instances from a fixed seed and reports the largest
//! deviation it observed against its tolerance.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::estimator::{
    asymmetry, augmented_oracle, kf_predict, kf_update, min_eigenvalue, pokf_data_update,
    pokf_time_update, posterior_cov_arbitrary_gain, DelayedKalmanFilter, DelayedMeasurement,
    EstimatorError, GaussianEstimate, HistoryBuffer, HistoryRecord, InterimPolicy, LinearModel,
    OracleStep, PoExtendedKalmanFilter, Step,
};
use crate::kinematics::{
    noise_jacobian, state_jacobian, step, wrap_angle, KinematicsError, Pose, RobotParams,
    WheelSpeeds,
};

pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

pub const REDUCTION_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-9;
pub const COLLAPSE_TOL: f64 = 1e-12;
pub const SYMMETRY_TOL: f64 = 1e-9;
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// First failing instance, if any.
    pub failure: Option<String>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<20} instances={:<6} max_dev={:.3e} tol={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_deviation,
            self.tolerance
        )?;
        if let Some(msg) = &self.failure {
            write!(f, "  [{msg}]")?;
        }
        Ok(())
    }
}

pub fn rng_for(seed: u64, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance);
    rng
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, half_width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-half_width..half_width))
}

/// Random symmetric positive-definite matrix with eigenvalues at least `floor`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let m = uniform_matrix(rng, d, d, 1.0);
    let p = &m * m.transpose() * scale + DMatrix::identity(d, d) * floor;
    (&p + p.transpose()) * 0.5
}

/// Random transition matrix with spectral norm at most `max_norm`.
pub fn random_transition(rng: &mut ChaCha8Rng, d: usize, max_norm: f64) -> DMatrix<f64> {
    let a = uniform_matrix(rng, d, d, 1.0);
    let norm = a.clone().svd(false, false).singular_values.max();
    if norm > max_norm {
        a * (max_norm / norm)
    } else {
        a
    }
}

/// Random model with `d <= 3` states, one or two inputs and `q <= 3` outputs.
pub fn random_model(rng: &mut ChaCha8Rng) -> LinearModel {
    let d = rng.random_range(1..=3);
    let q = rng.random_range(1..=3);
    random_model_with(rng, d, q)
}

pub fn random_model_with(rng: &mut ChaCha8Rng, d: usize, q: usize) -> LinearModel {
    let p = rng.random_range(1..=2);
    LinearModel::new(
        random_transition(rng, d, 1.0),
        uniform_matrix(rng, d, p, 1.0),
        uniform_matrix(rng, q, d, 1.0),
        random_spd(rng, d, 0.2, 0.01),
        random_spd(rng, q, 0.5, 0.1),
    )
    .expect("dimensions are consistent by construction")
}

/// Same dimensions and observation as `base`, fresh dynamics.
fn redraw_dynamics(rng: &mut ChaCha8Rng, base: &LinearModel) -> LinearModel {
    let d = base.state_dim();
    LinearModel {
        a: random_transition(rng, d, 1.0),
        b: uniform_matrix(rng, d, base.input_dim(), 1.0),
        q: random_spd(rng, d, 0.2, 0.01),
        ..base.clone()
    }
}

pub fn random_estimate(rng: &mut ChaCha8Rng, d: usize) -> GaussianEstimate {
    GaussianEstimate::new(gaussian_vector(rng, d), random_spd(rng, d, 1.0, 0.05))
        .expect("square covariance")
}

fn max_abs_diff(a: &GaussianEstimate, b: &GaussianEstimate) -> f64 {
    (&a.mean - &b.mean)
        .amax()
        .max((&a.covariance - &b.covariance).amax())
}

/// Delayed filter with zero delays against the plain Kalman filter over
/// `steps` predict/update cycles on each of `systems` random systems.
pub fn check_reduction(systems: usize, steps: usize, seed: u64) -> PropertyReport {
    let mut max_dev: f64 = 0.0;
    let mut failure = None;
    for inst in 0..systems {
        let mut rng = rng_for(seed, inst as u64);
        let model = random_model(&mut rng);
        let initial = random_estimate(&mut rng, model.state_dim());
        let outcome = (|| -> Result<f64, EstimatorError> {
            let mut filter = DelayedKalmanFilter::new(initial.clone(), model.clone(), 8)?;
            let mut reference = initial.clone();
            let mut worst: f64 = 0.0;
            for _ in 0..steps {
                let z = gaussian_vector(&mut rng, model.meas_dim());
                filter.fuse(z.clone(), filter.step())?;
                reference = kf_update(&reference, &model, &z)?;
                worst = worst.max(max_abs_diff(filter.estimate(), &reference));

                let u = gaussian_vector(&mut rng, model.input_dim());
                filter.time_update(&u)?;
                reference = kf_predict(&reference, &model, &u)?;
                worst = worst.max(max_abs_diff(filter.estimate(), &reference));
            }
            Ok(worst)
        })();
        match outcome {
            Ok(dev) => {
                max_dev = max_dev.max(dev);
                if dev > REDUCTION_TOL && failure.is_none() {
                    failure = Some(format!("seed {seed} instance {inst}: deviation {dev:.3e}"));
                }
            }
            Err(e) if failure.is_none() => {
                failure = Some(format!("seed {seed} instance {inst}: {e}"))
            }
            Err(_) => {}
        }
    }
    PropertyReport {
        name: "reduction",
        instances: systems,
        max_deviation: max_dev,
        tolerance: REDUCTION_TOL,
        failure,
    }
}

/// Drives the free-function API directly: time updates, fusions with any
/// origin, and the per-step history they need.
#[derive(Debug, Clone)]
pub struct DelayHarness {
    pub estimate: GaussianEstimate,
    pub history: HistoryBuffer,
    pub step: Step,
}

impl DelayHarness {
    pub fn new(
        initial: GaussianEstimate,
        h: &DMatrix<f64>,
        capacity: usize,
    ) -> Result<Self, EstimatorError> {
        let mut history = HistoryBuffer::new(capacity)?;
        history.push(HistoryRecord::new(0, initial.clone(), h.clone()))?;
        Ok(Self {
            estimate: initial,
            history,
            step: 0,
        })
    }

    pub fn predict(&mut self, model: &LinearModel, u: &DVector<f64>) -> Result<(), EstimatorError> {
        let next = pokf_time_update(&self.estimate, model, u)?;
        self.history
            .set_state_jacobian(self.step, model.a.clone())?;
        self.step += 1;
        self.history
            .push(HistoryRecord::new(self.step, next.clone(), model.h.clone()))?;
        self.estimate = next;
        Ok(())
    }

    pub fn fuse(
        &mut self,
        model: &LinearModel,
        z: &DVector<f64>,
        origin: Step,
    ) -> Result<DMatrix<f64>, EstimatorError> {
        let meas = DelayedMeasurement::new(z.clone(), origin, self.step)?;
        let (next, gain) = pokf_data_update(&self.estimate, &self.history, &meas, model)?;
        self.history.record_gain(self.step, &gain)?;
        self.estimate = next;
        Ok(gain)
    }
}

/// One oracle-equivalence instance: the delayed update against the stacked
/// reference. Odd instances fuse current measurements at random steps
/// between origin and arrival. Returns the largest deviation.
pub fn oracle_instance(seed: u64, instance: u64) -> Result<f64, EstimatorError> {
    let mut rng = rng_for(seed, instance);
    let model = random_model(&mut rng);
    let d = model.state_dim();
    let mut harness = DelayHarness::new(random_estimate(&mut rng, d), &model.h, 16)?;

    // Warm-up so the origin prior is not the initial one.
    for _ in 0..rng.random_range(0..4) {
        let z = gaussian_vector(&mut rng, model.meas_dim());
        let origin = harness.step;
        harness.fuse(&model, &z, origin)?;
        let u = gaussian_vector(&mut rng, model.input_dim());
        harness.predict(&model, &u)?;
    }

    let delay = rng.random_range(1..=5u64);
    let with_interim = instance % 2 == 1;
    let origin = harness.step;
    let origin_prior = harness
        .history
        .get(origin)
        .expect("origin record was just pushed")
        .priori
        .clone();

    let mut steps = Vec::with_capacity(delay as usize);
    for _ in 0..delay {
        let step_model = if rng.random_bool(0.5) {
            redraw_dynamics(&mut rng, &model)
        } else {
            model.clone()
        };
        let interim = (with_interim && rng.random_bool(0.6))
            .then(|| gaussian_vector(&mut rng, model.meas_dim()));
        if let Some(z) = &interim {
            let now = harness.step;
            harness.fuse(&step_model, z, now)?;
        }
        let u = gaussian_vector(&mut rng, model.input_dim());
        harness.predict(&step_model, &u)?;
        steps.push(OracleStep {
            model: step_model,
            input: u,
            interim,
        });
    }

    let z = gaussian_vector(&mut rng, model.meas_dim());
    harness.fuse(&model, &z, origin)?;
    let reference = augmented_oracle(
        &origin_prior,
        &steps,
        &z,
        &model.h,
        &model.r,
        InterimPolicy::OriginPrior,
    )?;
    let mut dev = max_abs_diff(&harness.estimate, &reference);
    if !with_interim || steps.iter().all(|s| s.interim.is_none()) {
        let exact = augmented_oracle(
            &origin_prior,
            &steps,
            &z,
            &model.h,
            &model.r,
            InterimPolicy::FullConditional,
        )?;
        dev = dev.max(max_abs_diff(&harness.estimate, &exact));
    }
    Ok(dev)
}

pub fn check_oracle_equivalence(instances: usize, seed: u64) -> PropertyReport {
    let mut max_dev: f64 = 0.0;
    let mut failure = None;
    for inst in 0..instances {
        match oracle_instance(seed, inst as u64) {
            Ok(dev) => {
                max_dev = max_dev.max(dev);
                if dev > ORACLE_TOL && failure.is_none() {
                    failure = Some(format!("seed {seed} instance {inst}: deviation {dev:.3e}"));
                }
            }
            Err(e) if failure.is_none() => {
                failure = Some(format!("seed {seed} instance {inst}: {e}"))
            }
            Err(_) => {}
        }
    }
    PropertyReport {
        name: "oracle-equivalence",
        instances,
        max_deviation: max_dev,
        tolerance: ORACLE_TOL,
        failure,
    }
}

/// A random delayed-fusion problem with one step between origin and arrival
/// whose error transition is an arbitrary matrix `F`.
#[derive(Debug, Clone)]
pub struct GainInstance {
    pub p_k: DMatrix<f64>,
    pub p_i: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Gain and posterior covariance produced by the filter.
    pub gain: DMatrix<f64>,
    pub posterior: DMatrix<f64>,
}

impl GainInstance {
    pub fn cross_covariance(&self) -> DMatrix<f64> {
        &self.p_i * self.f.transpose()
    }

    pub fn trace_at(&self, k: &DMatrix<f64>) -> Result<f64, EstimatorError> {
        Ok(posterior_cov_arbitrary_gain(
            &self.p_k,
            &self.p_i,
            &self.cross_covariance(),
            &self.h,
            &self.r,
            k,
        )?
        .trace())
    }
}

pub fn gain_instance(rng: &mut ChaCha8Rng) -> Result<GainInstance, EstimatorError> {
    let d = rng.random_range(1..=3);
    let q = rng.random_range(1..=3);
    let p_i = random_spd(rng, d, 1.0, 0.05);
    let f = uniform_matrix(rng, d, d, 1.2);
    let p_k = &f * &p_i * f.transpose() + random_spd(rng, d, 0.3, 0.01);
    let p_k = (&p_k + p_k.transpose()) * 0.5;
    let h = uniform_matrix(rng, q, d, 1.0);
    let r = random_spd(rng, q, 0.5, 0.1);

    // History whose only factor is F: transition F and no fusion at the origin.
    let prior_i = GaussianEstimate::new(DVector::zeros(d), p_i.clone())?;
    let mut history = HistoryBuffer::new(4)?;
    let mut origin = HistoryRecord::new(0, prior_i, h.clone());
    origin.state_jacobian = Some(f.clone());
    history.push(origin)?;
    let current = GaussianEstimate::new(DVector::zeros(d), p_k.clone())?;
    history.push(HistoryRecord::new(1, current.clone(), h.clone()))?;
    let model = LinearModel::new(
        f.clone(),
        DMatrix::zeros(d, 1),
        h.clone(),
        DMatrix::zeros(d, d),
        r.clone(),
    )?;
    let z = DelayedMeasurement::new(gaussian_vector(rng, q), 0, 1)?;
    let (post, gain) = pokf_data_update(&current, &history, &z, &model)?;
    Ok(GainInstance {
        p_k,
        p_i,
        f,
        h,
        r,
        gain,
        posterior: post.covariance,
    })
}

/// Random perturbation with Frobenius norm log-uniform in `[1e-4, 1e-1]`.
pub fn random_perturbation(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let dir = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = 10f64.powf(rng.random_range(-4.0..-1.0));
    let len = dir.norm();
    if len == 0.0 {
        let mut e = DMatrix::zeros(rows, cols);
        e[(0, 0)] = norm;
        e
    } else {
        dir * (norm / len)
    }
}

/// Trace of the posterior at the filter's gain must be strictly below its
/// value at every perturbed gain.
pub fn check_gain_optimality(instances: usize, perturbations: usize, seed: u64) -> PropertyReport {
    let mut violations = 0usize;
    let mut smallest_margin = f64::INFINITY;
    let mut failure = None;
    for inst in 0..instances {
        let mut rng = rng_for(seed ^ 0x9a17, inst as u64);
        let res = (|| -> Result<(), EstimatorError> {
            let g = gain_instance(&mut rng)?;
            let best = g.trace_at(&g.gain)?;
            for _ in 0..perturbations {
                let e = random_perturbation(&mut rng, g.gain.nrows(), g.gain.ncols());
                let other = g.trace_at(&(&g.gain + e))?;
                smallest_margin = smallest_margin.min(other - best);
                if other <= best {
                    violations += 1;
                    if failure.is_none() {
                        failure = Some(format!(
                            "seed {seed} instance {inst}: perturbed trace {other} <= {best}"
                        ));
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            if failure.is_none() {
                failure = Some(format!("seed {seed} instance {inst}: {e}"));
            }
        }
    }
    PropertyReport {
        name: "gain-optimality",
        instances: instances * perturbations,
        // Reported as the number of violations; the tolerance is zero.
        max_deviation: violations as f64,
        tolerance: 0.0,
        failure: failure.map(|f| format!("{f} (smallest margin {smallest_margin:.3e})")),
    }
}

/// The short posterior form equals the arbitrary-gain form at the optimal gain.
pub fn check_identity_collapse(instances: usize, seed: u64) -> PropertyReport {
    let mut max_dev: f64 = 0.0;
    let mut failure = None;
    for inst in 0..instances {
        let mut rng = rng_for(seed ^ 0xc011, inst as u64);
        let res = gain_instance(&mut rng).and_then(|g| {
            let long = posterior_cov_arbitrary_gain(
                &g.p_k,
                &g.p_i,
                &g.cross_covariance(),
                &g.h,
                &g.r,
                &g.gain,
            )?;
            Ok((&long - &g.posterior).amax())
        });
        match res {
            Ok(dev) => {
                max_dev = max_dev.max(dev);
                if dev > COLLAPSE_TOL && failure.is_none() {
                    failure = Some(format!("seed {seed} instance {inst}: deviation {dev:.3e}"));
                }
            }
            Err(e) if failure.is_none() => {
                failure = Some(format!("seed {seed} instance {inst}: {e}"))
            }
            Err(_) => {}
        }
    }
    PropertyReport {
        name: "identity-collapse",
        instances,
        max_deviation: max_dev,
        tolerance: COLLAPSE_TOL,
        failure,
    }
}

/// Tracks the worst symmetry and eigenvalue seen over many covariances.
#[derive(Debug)]
struct HealthTally {
    seed: u64,
    worst_asym: f64,
    worst_eig: f64,
    checked: usize,
    failure: Option<String>,
}

impl HealthTally {
    fn inspect(&mut self, what: &str, step: Step, p: &DMatrix<f64>) {
        let asym = asymmetry(p);
        let eig = min_eigenvalue(p);
        self.worst_asym = self.worst_asym.max(asym);
        self.worst_eig = self.worst_eig.min(eig);
        self.checked += 1;
        if (asym > SYMMETRY_TOL || eig < -PSD_TOL) && self.failure.is_none() {
            self.failure = Some(format!(
                "seed {} {what} step {step}: asymmetry {asym:.3e}, min eigenvalue {eig:.3e}",
                self.seed
            ));
        }
    }
}

/// Linear workload: a delayed sensor with a random delay of 0..=6 steps
/// (next packet sent once the previous one lands) and a current-state sensor
/// firing on about half of the steps in between.
fn linear_health(steps: usize, seed: u64, tally: &mut HealthTally) -> Result<(), EstimatorError> {
    let mut rng = rng_for(seed ^ 0xbea1, 0);
    let q = rng.random_range(1..=3);
    let model = random_model_with(&mut rng, 3, q);
    let mut harness = DelayHarness::new(random_estimate(&mut rng, 3), &model.h, 16)?;
    let q_chol = model
        .q
        .clone()
        .cholesky()
        .expect("Q is positive definite")
        .l();
    let r_chol = model
        .r
        .clone()
        .cholesky()
        .expect("R is positive definite")
        .l();
    let mut x = gaussian_vector(&mut rng, 3);
    let mut in_flight: Option<(Step, Step, DVector<f64>)> = None;
    for _ in 0..steps {
        let now = harness.step;
        let measure =
            |rng: &mut ChaCha8Rng| &model.h * &x + &r_chol * gaussian_vector(rng, model.meas_dim());
        let (arrival, origin, z) = match in_flight.take() {
            Some(p) => p,
            None => (now + rng.random_range(0..=6u64), now, measure(&mut rng)),
        };
        if arrival > now {
            if rng.random_bool(0.5) {
                let current = measure(&mut rng);
                harness.fuse(&model, &current, now)?;
                tally.inspect("linear", now, &harness.estimate.covariance);
            }
            in_flight = Some((arrival, origin, z));
        } else {
            harness.fuse(&model, &z, origin)?;
            tally.inspect("linear", now, &harness.estimate.covariance);
        }
        let u = gaussian_vector(&mut rng, model.input_dim());
        x = &model.a * &x + &model.b * &u + &q_chol * gaussian_vector(&mut rng, 3);
        harness.predict(&model, &u)?;
        tally.inspect("linear", harness.step, &harness.estimate.covariance);
    }
    for rec in harness.history.iter() {
        tally.inspect("linear history", rec.step, &rec.priori.covariance);
    }
    Ok(())
}

/// Robot workload: a pose measurement every step, its delay redrawn from
/// 0..=6 steps every 250 steps; packets overtaken when the delay shrinks are
/// rejected by the filter.
fn robot_health(steps: usize, seed: u64, tally: &mut HealthTally) -> Result<(), EstimatorError> {
    let mut rng = rng_for(seed ^ 0x0b07, 0);
    let params = RobotParams::default();
    let meas_noise = Matrix3::from_diagonal(&Vector3::new(0.01, 0.01, 0.018));
    let mut filter = PoExtendedKalmanFilter::new(
        params,
        0.01,
        meas_noise,
        Pose::new(0.0, 0.0, 0.0),
        Matrix3::identity() * 1e-4,
        HistoryBuffer::DEFAULT_CAPACITY,
    )?;
    let mut truth = Pose::new(0.0, 0.0, 0.0);
    let mut pending: Vec<(Step, Step, Pose)> = Vec::new();
    let mut delay = 0;
    for _ in 0..steps {
        let now = filter.step();
        if now % 250 == 0 {
            delay = rng.random_range(0..=6u64);
        }
        let z = Pose::new(
            truth.x + 0.1 * rng.sample::<f64, _>(StandardNormal),
            truth.y + 0.1 * rng.sample::<f64, _>(StandardNormal),
            truth.theta + 0.134 * rng.sample::<f64, _>(StandardNormal),
        );
        pending.push((now + delay, now, z));
        pending.sort_by_key(|(arrival, origin, _)| (*arrival, *origin));
        let ready = pending.iter().take_while(|(a, _, _)| *a <= now).count();
        for (_, origin, z) in pending.drain(..ready) {
            filter.fuse(&z, origin)?;
            tally.inspect("robot", now, &filter.estimate().covariance);
        }
        let u = WheelSpeeds {
            omega_left: 2.0 + rng.random_range(-1.0..1.0),
            omega_right: 2.0 + rng.random_range(-1.0..1.0),
        };
        truth = step(truth, u, &params)?;
        filter.time_update(u)?;
        tally.inspect("robot", filter.step(), &filter.estimate().covariance);
    }
    for rec in filter.history().iter() {
        tally.inspect("robot history", rec.step, &rec.priori.covariance);
    }
    Ok(())
}

/// Runs the linear and the robot workload for `steps` steps each; every
/// covariance either filter holds must stay symmetric and positive
/// semi-definite.
pub fn check_covariance_health(steps: usize, seed: u64) -> PropertyReport {
    let mut tally = HealthTally {
        seed,
        worst_asym: 0.0,
        worst_eig: f64::INFINITY,
        checked: 0,
        failure: None,
    };
    for workload in [linear_health, robot_health] {
        if let Err(e) = workload(steps, seed, &mut tally) {
            tally
                .failure
                .get_or_insert_with(|| format!("seed {seed}: {e}"));
        }
    }
    PropertyReport {
        name: "covariance-health",
        instances: tally.checked,
        max_deviation: tally.worst_asym.max((-tally.worst_eig).max(0.0)),
        tolerance: SYMMETRY_TOL.min(PSD_TOL),
        failure: tally.failure,
    }
}

/// Average normalized estimation error squared of the delayed filter on one
/// random stable system with `d = 3`.
///
/// Each run draws its initial state from the initial estimate, sends a
/// measurement every `delay + 1` steps and fuses it `delay` steps later. NEES
/// is averaged over the `steps` posterior estimates of each run and then
/// over the runs.
pub fn average_nees(
    runs: usize,
    steps: usize,
    delay: Step,
    seed: u64,
) -> Result<f64, EstimatorError> {
    let mut sys_rng = rng_for(seed ^ 0x4ee5, u64::MAX);
    let q = sys_rng.random_range(1..=3);
    let model = random_model_with(&mut sys_rng, 3, q);
    let initial = random_estimate(&mut sys_rng, 3);
    let q_chol = model
        .q
        .clone()
        .cholesky()
        .expect("Q is positive definite")
        .l();
    let r_chol = model
        .r
        .clone()
        .cholesky()
        .expect("R is positive definite")
        .l();
    let p0_chol = initial
        .covariance
        .clone()
        .cholesky()
        .expect("P0 is positive definite")
        .l();

    let mut total = 0.0;
    for run in 0..runs {
        let mut rng = rng_for(seed ^ 0x4ee5, run as u64);
        let mut x = &initial.mean + &p0_chol * gaussian_vector(&mut rng, 3);
        let mut filter = DelayedKalmanFilter::new(initial.clone(), model.clone(), 16)?;
        let mut in_flight: Option<(Step, DVector<f64>)> = None;
        let mut run_sum = 0.0;
        for _ in 0..steps {
            let now = filter.step();
            if now % (delay + 1) == 0 {
                in_flight = Some((
                    now,
                    &model.h * &x + &r_chol * gaussian_vector(&mut rng, model.meas_dim()),
                ));
            }
            if let Some((origin, z)) = in_flight.take() {
                if origin + delay == now {
                    filter.fuse(z, origin)?;
                } else {
                    in_flight = Some((origin, z));
                }
            }
            let est = filter.estimate();
            let e = &x - &est.mean;
            let p_inv = est
                .covariance
                .clone()
                .try_inverse()
                .ok_or(EstimatorError::SingularInnovation)?;
            run_sum += (e.transpose() * p_inv * &e)[(0, 0)];

            let u = gaussian_vector(&mut rng, model.input_dim());
            x = &model.a * &x + &model.b * &u + &q_chol * gaussian_vector(&mut rng, 3);
            filter.time_update(&u)?;
        }
        total += run_sum / steps as f64;
    }
    Ok(total / runs as f64)
}

/// Absolute slack added to the relative Jacobian tolerance so that exact
/// zeros compare against finite-difference round-off.
pub const JACOBIAN_ABS_FLOOR: f64 = 1e-9;
pub const JACOBIAN_REL_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

fn random_robot(rng: &mut ChaCha8Rng) -> (RobotParams, Pose, WheelSpeeds) {
    let params = RobotParams::new(
        rng.random_range(0.02..0.2),
        rng.random_range(0.2..1.0),
        rng.random_range(0.01..0.5),
    )
    .expect("positive parameters");
    let pose = Pose::new(
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let u = WheelSpeeds::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    (params, pose, u)
}

/// Pose difference with the heading difference wrapped.
fn pose_delta(a: &Pose, b: &Pose) -> Vector3<f64> {
    Vector3::new(a.x - b.x, a.y - b.y, wrap_angle(a.theta - b.theta))
}

/// Motion model with additive translational and rotational speed noise.
fn noisy_step(pose: &Pose, u: WheelSpeeds, params: &RobotParams, w: [f64; 2]) -> Pose {
    let ts = params.sample_period();
    let v = params.wheel_radius() / 2.0 * (u.omega_left + u.omega_right) + w[0];
    let rate = params.wheel_radius() / params.wheel_base() * (u.omega_left - u.omega_right) + w[1];
    Pose::new(
        pose.x + ts * v * pose.theta.cos(),
        pose.y + ts * v * pose.theta.sin(),
        pose.theta + ts * rate,
    )
}

fn entry_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (JACOBIAN_REL_TOL * analytic.abs() + JACOBIAN_ABS_FLOOR)
}

/// State and noise Jacobians against central finite differences at
/// `points` random poses, inputs and robot geometries. The reported
/// deviation is the worst error as a fraction of its allowance.
pub fn check_jacobians(points: usize, seed: u64) -> PropertyReport {
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for inst in 0..points {
        let mut rng = rng_for(seed ^ 0x1acb, inst as u64);
        let (params, pose, u) = random_robot(&mut rng);
        let res = (|| -> Result<f64, KinematicsError> {
            let mut dev: f64 = 0.0;
            let a = state_jacobian(&pose, u, &params);
            for col in 0..3 {
                let mut plus = pose.to_vector();
                let mut minus = pose.to_vector();
                plus[col] += FD_STEP;
                minus[col] -= FD_STEP;
                let d = pose_delta(
                    &step(Pose::from_vector(&plus), u, &params)?,
                    &step(Pose::from_vector(&minus), u, &params)?,
                ) / (2.0 * FD_STEP);
                for row in 0..3 {
                    dev = dev.max(entry_error(a[(row, col)], d[row]));
                }
            }

            // The noise-free augmented model must be the motion model itself.
            let base = pose_delta(
                &noisy_step(&pose, u, &params, [0.0, 0.0]),
                &step(pose, u, &params)?,
            );
            dev = dev.max(base.amax() / JACOBIAN_ABS_FLOOR);

            let w = noise_jacobian(&pose, &params);
            for col in 0..2 {
                let mut wp = [0.0; 2];
                let mut wm = [0.0; 2];
                wp[col] = FD_STEP;
                wm[col] = -FD_STEP;
                let d = pose_delta(
                    &noisy_step(&pose, u, &params, wp),
                    &noisy_step(&pose, u, &params, wm),
                ) / (2.0 * FD_STEP);
                for row in 0..3 {
                    dev = dev.max(entry_error(w[(row, col)], d[row]));
                }
            }
            Ok(dev)
        })();
        match res {
            Ok(dev) => {
                worst = worst.max(dev);
                if dev > 1.0 && failure.is_none() {
                    failure = Some(format!(
                        "seed {seed} point {inst}: {dev:.3}x the allowed error"
                    ));
                }
            }
            Err(e) if failure.is_none() => failure = Some(format!("seed {seed} point {inst}: {e}")),
            Err(_) => {}
        }
    }
    PropertyReport {
        name: "jacobians",
        instances: points,
        max_deviation: worst,
        tolerance: 1.0,
        failure,
    }
}

/// Every suite at the sizes used by the command-line self-check.
pub fn run_all(seed: u64) -> Vec<PropertyReport> {
    vec![
        check_reduction(1000, 100, seed),
        check_oracle_equivalence(1000, seed),
        check_gain_optimality(200, 100, seed),
        check_identity_collapse(200, seed),
        check_covariance_health(10_000, seed),
        check_jacobians(1000, seed),
    ]
}

/// Largest asymmetry and smallest eigenvalue of `p`.
pub fn covariance_health(p: &DMatrix<f64>) -> (f64, f64) {
    (asymmetry(p), min_eigenvalue(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for report in [
            check_reduction(20, 30, 1),
            check_oracle_equivalence(40, 1),
            check_gain_optimality(10, 20, 1),
            check_identity_collapse(20, 1),
            check_covariance_health(500, 1),
            check_jacobians(200, 1),
        ] {
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn transposed_product_breaks_oracle_equivalence() {
        // Reversing the factor order must be caught by the oracle.
        let mut worst: f64 = 0.0;
        for inst in 0..40u64 {
            let mut rng = rng_for(3, inst);
            let model = random_model_with(&mut rng, 3, 2);
            let mut h = DelayHarness::new(random_estimate(&mut rng, 3), &model.h, 16).unwrap();
            let origin_prior = h.estimate.clone();
            let mut steps = Vec::new();
            for _ in 0..3 {
                let m = redraw_dynamics(&mut rng, &model);
                let z = gaussian_vector(&mut rng, 2);
                let now = h.step;
                h.fuse(&m, &z, now).unwrap();
                let u = gaussian_vector(&mut rng, m.input_dim());
                h.predict(&m, &u).unwrap();
                steps.push(OracleStep {
                    model: m,
                    input: u,
                    interim: Some(z),
                });
            }
            let wrong_f = h
                .history
                .iter()
                .take(3)
                .map(|r| r.error_transition().unwrap())
                .fold(DMatrix::identity(3, 3), |acc, f| acc * f);
            let p_i = &origin_prior.covariance;
            let s = &model.h * p_i * model.h.transpose() + &model.r;
            let k = &wrong_f * p_i * model.h.transpose() * s.try_inverse().unwrap();
            let wrong_cov = &h.estimate.covariance - &k * &model.h * p_i * wrong_f.transpose();
            let z = gaussian_vector(&mut rng, 2);
            let reference = augmented_oracle(
                &origin_prior,
                &steps,
                &z,
                &model.h,
                &model.r,
                InterimPolicy::OriginPrior,
            )
            .unwrap();
            worst = worst.max((wrong_cov - reference.covariance).amax());
        }
        assert!(worst > 1e-6, "transposed product went unnoticed: {worst:e}");
    }
}
