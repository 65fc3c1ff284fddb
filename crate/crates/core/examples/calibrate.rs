//! Measures the constants frozen in `theory::calibration`.
//!
//! ```text
//! cargo run --release -p reslab-core --example calibrate
//! ```

use std::time::Instant;

use reslab::model::forward;
use reslab::tensor::random_unit_vector;
use reslab::theory::calibration::*;
use reslab::theory::{
    gradient_bound_ratios, gradient_lower_ratio, perturbation_report, run_trials, semismooth_residual,
    separateness_check, PerturbationConstants, PerturbationSpec,
};
use reslab::trainer::{drift_check, train, DriftConstants, TrainConfig};
use reslab::{Network, Result, SeedSpec};

const TRIALS: usize = 40;

fn unit() -> PerturbationConstants {
    PerturbationConstants {
        hidden: 1.0,
        flips: 1.0,
        top: 1.0,
        top_flips: 1.0,
    }
}

fn max(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::INFINITY, f64::min)
}

fn main() -> Result<()> {
    let root = SeedSpec::new(CALIBRATION_SEED);

    let clock = Instant::now();
    let upper = run_trials(TRIALS, &root.child(1), |s| {
        let (p, d) = trial_setup(32, 256, 1.0 / 32f64.sqrt(), SAMPLES, s)?;
        gradient_bound_ratios(&p, &d, f64::INFINITY)
    })?;
    let alt = run_trials(TRIALS, &root.child(1), |s| {
        let (p, d) = trial_setup(32, 256, 1.0 / 32.0, SAMPLES, s)?;
        gradient_bound_ratios(&p, &d, f64::INFINITY)
    })?;
    println!(
        "gradient upper: {} (tau = 1/L gives {}, top ratios up to {}) [{:.1}s]",
        max(upper.iter().map(|r| r.measured)),
        max(alt.iter().map(|r| r.measured)),
        max(upper.iter().chain(&alt).filter_map(|r| r.extra("top_ratio"))),
        clock.elapsed().as_secs_f64()
    );

    let clock = Instant::now();
    let lower = run_trials(TRIALS, &root.child(2), |s| {
        let (p, d) = trial_setup(16, 512, 1.0 / 16.0, SAMPLES, s)?;
        gradient_lower_ratio(&p, &d, 0.0)
    })?;
    println!(
        "gradient lower: {} [{:.1}s]",
        min(lower.iter().map(|r| r.measured)),
        clock.elapsed().as_secs_f64()
    );

    let clock = Instant::now();
    let pert = run_trials(TRIALS, &root.child(3), |s| {
        let (p, _) = trial_setup(32, 512, 1.0 / 32f64.sqrt(), 1, s)?;
        let x: Vec<f64> = random_unit_vector(INPUT_DIM, &s.child(3));
        let w = PerturbationSpec::seeded(0.01, &s.child(2)).build(&p)?;
        perturbation_report(&p, &w, &x, &unit())
    })?;
    let pick = |k: &str| max(pert.iter().filter_map(|r| r.extra(k)));
    println!(
        "perturbation: hidden {} flips {} top {} top_flips {} [{:.1}s]",
        pick("hidden_ratio"),
        pick("flips_ratio"),
        pick("top_ratio"),
        pick("top_flips_ratio"),
        clock.elapsed().as_secs_f64()
    );

    let clock = Instant::now();
    let tau_sep = 1.0 / (32f64.sqrt() * 512f64.ln());
    let sep = run_trials(TRIALS, &root.child(4), |s| {
        let (p, _): (Network, _) = trial_setup(32, 512, tau_sep, 1, s)?;
        let mut e1 = vec![0.0; INPUT_DIM];
        let mut e2 = vec![0.0; INPUT_DIM];
        e1[0] = 1.0;
        e2[1] = 1.0;
        let ts = vec![forward(&p, &e1)?, forward(&p, &e2)?];
        separateness_check(&ts, 2f64.sqrt(), 0.0)
    })?;
    println!(
        "separateness: {} [{:.1}s]",
        min(sep.iter().map(|r| r.measured)),
        clock.elapsed().as_secs_f64()
    );

    let clock = Instant::now();
    let semi = run_trials(TRIALS, &root.child(5), |s| {
        let (p, d) = trial_setup(16, 512, 1.0 / 16.0, 4, s)?;
        let w = PerturbationSpec::seeded(0.01, &s.child(2)).build(&p)?;
        semismooth_residual(&p, &w, &d, 1.0, 1.0)
    })?;
    let worst = max(semi.iter().map(|r| r.measured / r.bound));
    let share = max(semi.iter().filter_map(|r| r.extra("first_share")));
    println!(
        "semismooth: R/(first+second) up to {worst}, first-order share up to {share} [{:.1}s]",
        clock.elapsed().as_secs_f64()
    );

    let clock = Instant::now();
    let unit_drift = DriftConstants {
        top: 1.0,
        residual: 1.0,
    };
    let mut drift_top = Vec::new();
    let mut drift_res = Vec::new();
    for (i, tau) in [1.0 / 64.0, 1.0 / 8.0].into_iter().enumerate() {
        for t in 0..3u64 {
            let s = root.child(6).child(i as u64).child(t);
            let (p, d) = trial_setup(64, 256, tau, SAMPLES, &s)?;
            let f0 = reslab::grad::loss(&p, &d)?.total;
            let out = train(&p, &d, &TrainConfig::full_batch(LEARNING_RATE, 5000, 1e-3 * f0))?;
            let r = drift_check(&out.log, &p.config, SAMPLES, OUTPUT_DIM, DELTA, &unit_drift)?;
            println!(
                "  tau {tau}: steps {:?} top {} residual {} residual/top/tau {}",
                out.log.reached_target_at,
                r.extra("top_ratio").unwrap(),
                r.extra("residual_ratio").unwrap(),
                r.extra("relative_to_tau").unwrap()
            );
            drift_top.push(r.extra("top_ratio").unwrap());
            drift_res.push(r.extra("residual_ratio").unwrap());
        }
    }
    println!(
        "drift: top {} residual {} [{:.1}s]",
        max(drift_top),
        max(drift_res),
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}
