//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run alone with `cargo test --release --test acceptance`.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use delayed_fusion::channel::{sample_delay_ms, DelayModel, LoadDistribution};
use delayed_fusion::cli::{cmd_simulate, ScenarioArgs, SimulateArgs, EXIT_OK};
use delayed_fusion::estimator::{
    augmented_oracle, DelayedKalmanFilter, GaussianEstimate, InterimPolicy, LinearModel, OracleStep,
};
use delayed_fusion::scenario::{
    monte_carlo, FilterKind, MonteCarloReport, ScenarioConfig, Trajectory,
};
use delayed_fusion::selfcheck::{self, PropertyReport, DEFAULT_SEED};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within_budget(elapsed: Duration, budget_s: u64) -> (bool, String) {
    let ok = elapsed < Duration::from_secs(budget_s);
    (
        ok,
        format!("{:.2}s (budget {budget_s}s)", elapsed.as_secs_f64()),
    )
}

fn property(report: PropertyReport, elapsed: Duration, budget_s: u64) -> Outcome {
    let (fast, time) = within_budget(elapsed, budget_s);
    let passed = report.passed() && fast;
    outcome(passed, format!("{report}; {time}"))
}

fn reduction() -> Outcome {
    let t = Instant::now();
    let report = selfcheck::check_reduction(1000, 100, DEFAULT_SEED);
    property(report, t.elapsed(), 10)
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let report = selfcheck::check_oracle_equivalence(1000, DEFAULT_SEED);
    property(report, t.elapsed(), 30)
}

fn gain_optimality() -> Outcome {
    let t = Instant::now();
    let report = selfcheck::check_gain_optimality(200, 100, DEFAULT_SEED);
    property(report, t.elapsed(), 10)
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn scalar_fixture() -> Outcome {
    let run = || -> Result<(f64, f64, f64, f64), Box<dyn std::error::Error>> {
        let model = LinearModel::new(
            scalar(1.0),
            scalar(0.0),
            scalar(1.0),
            scalar(0.5),
            scalar(1.0),
        )?;
        let prior = GaussianEstimate::new(DVector::from_element(1, 0.0), scalar(2.0))?;
        let mut filter = DelayedKalmanFilter::new(prior.clone(), model.clone(), 4)?;
        filter.time_update(&DVector::from_element(1, 0.0))?;
        let z = DVector::from_element(1, 3.0);
        filter.fuse(z.clone(), 0)?;
        let gain = filter.history().get(1).ok_or("missing record")?.gain[(0, 0)];
        let oracle = augmented_oracle(
            &prior,
            &[OracleStep {
                model: model.clone(),
                input: DVector::from_element(1, 0.0),
                interim: None,
            }],
            &z,
            &model.h,
            &model.r,
            InterimPolicy::FullConditional,
        )?;
        Ok((
            gain,
            filter.estimate().covariance[(0, 0)],
            oracle.covariance[(0, 0)],
            filter.estimate().mean[0],
        ))
    };
    match run() {
        Ok((k, p, p_oracle, mean)) => {
            let passed = (k - 2.0 / 3.0).abs() <= 1e-12
                && (p - 7.0 / 6.0).abs() <= 1e-12
                && (p_oracle - 7.0 / 6.0).abs() <= 1e-12
                && (mean - 2.0).abs() <= 1e-12;
            outcome(
                passed,
                format!("K={k:.15} P+={p:.15} oracle P={p_oracle:.15} mean={mean:.15}"),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn compare(report: &MonteCarloReport, min_win: f64) -> (bool, String) {
    let ekf = report
        .distribution(FilterKind::Ekf)
        .map(|d| d.mean)
        .unwrap_or(f64::NAN);
    let po = report
        .distribution(FilterKind::PoEkf)
        .map(|d| d.mean)
        .unwrap_or(f64::NAN);
    let win = report.po_ekf_win_fraction.unwrap_or(0.0);
    let passed = win >= min_win && po < ekf;
    (
        passed,
        format!(
            "win fraction {win:.3} (need >= {min_win}), mean RMSE po_ekf {po:.5} vs ekf {ekf:.5}"
        ),
    )
}

fn scenario_claim(config: ScenarioConfig, min_win: f64, budget_s: u64) -> Outcome {
    let t = Instant::now();
    match monte_carlo(&config, 200) {
        Ok(report) => {
            let (ok, detail) = compare(&report, min_win);
            let (fast, time) = within_budget(t.elapsed(), budget_s);
            outcome(ok && fast, format!("{detail}; {time}"))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn straight_fixed_delays() -> Outcome {
    scenario_claim(ScenarioConfig::default().with_fixed_delays(3, 4), 0.9, 60)
}

fn sinusoid_fixed_delays() -> Outcome {
    let cfg = ScenarioConfig {
        trajectory: Trajectory::sinusoid(),
        ..ScenarioConfig::default()
    }
    .with_fixed_delays(2, 4);
    scenario_claim(cfg, 0.9, 60)
}

fn delay_calibration() -> Outcome {
    let mut lines = Vec::new();
    let mut passed = true;
    for (base, load) in [(400.0, 83.0), (600.0, 173.0)] {
        let model = match DelayModel::new(base, load, LoadDistribution::Exponential, 0) {
            Ok(m) => m,
            Err(e) => return outcome(false, e.to_string()),
        };
        let target = base + load;
        let mean = (0..100_000u64)
            .map(|t| sample_delay_ms(&model, t))
            .sum::<f64>()
            / 100_000.0;
        let rel = (mean - target).abs() / target;
        passed &= rel <= 0.02;

        let links = ScenarioConfig {
            control_delay: model.with_seed(0),
            meas_delay: model.with_seed(1),
            ..ScenarioConfig::default()
        };
        match monte_carlo(&links, 200) {
            Ok(report) => {
                let (ok, detail) = compare(&report, 0.85);
                passed &= ok;
                lines.push(format!(
                    "{target} ms: empirical {mean:.2} ({:.2}%), {detail}",
                    100.0 * rel
                ));
            }
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    outcome(passed, lines.join("; "))
}

fn nees_consistency() -> Outcome {
    let runs = 500usize;
    let d = 3.0;
    match selfcheck::average_nees(runs, 200, 3, DEFAULT_SEED) {
        Ok(nees) => {
            let dof = d * runs as f64;
            let Ok(chi) = ChiSquared::new(dof) else {
                return outcome(false, "chi-square construction failed");
            };
            let lo = chi.inverse_cdf(0.005) / runs as f64;
            let hi = chi.inverse_cdf(0.995) / runs as f64;
            outcome(
                (lo..=hi).contains(&nees),
                format!(
                    "average NEES {nees:.4}, 99% band [{lo:.4}, {hi:.4}] for d=3 over {runs} runs"
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn numerical_health() -> Outcome {
    let health = selfcheck::check_covariance_health(10_000, DEFAULT_SEED);
    let jac = selfcheck::check_jacobians(1000, DEFAULT_SEED);
    outcome(health.passed() && jac.passed(), format!("{health}; {jac}"))
}

fn determinism() -> Outcome {
    let run = || -> Result<Outcome, Box<dyn std::error::Error>> {
        let a = tempfile::tempdir()?;
        let b = tempfile::tempdir()?;
        let args = |dir: &std::path::Path| SimulateArgs {
            scenario: ScenarioArgs {
                seed: Some(42),
                ..ScenarioArgs::default()
            },
            out: Some(dir.to_path_buf()),
        };
        if cmd_simulate(&args(a.path())) != EXIT_OK || cmd_simulate(&args(b.path())) != EXIT_OK {
            return Ok(outcome(false, "simulate exited with an error"));
        }
        let mut same = true;
        let mut bytes = 0;
        for name in ["run.csv", "summary.csv", "summary.txt"] {
            let x = fs::read(a.path().join(name))?;
            let y = fs::read(b.path().join(name))?;
            bytes += x.len();
            same &= x == y;
        }
        Ok(outcome(
            same,
            format!("run.csv, summary.csv, summary.txt compared ({bytes} bytes)"),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e.to_string()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("reduction", reduction),
        ("oracle equivalence", oracle_equivalence),
        ("gain optimality", gain_optimality),
        ("scalar fixture", scalar_fixture),
        ("straight path, n=3 m=4", straight_fixed_delays),
        ("sinusoid path, n=2 m=4", sinusoid_fixed_delays),
        ("delay calibration", delay_calibration),
        ("NEES consistency", nees_consistency),
        ("numerical health", numerical_health),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<24} {}  {}",
            i + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
