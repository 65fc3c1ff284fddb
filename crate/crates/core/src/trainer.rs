//! Full-batch gradient descent and minibatch SGD on the trainable weights,
//! with loss and drift telemetry.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{loss, loss_and_grad, Gradients};
use crate::model::NetworkParams;
use crate::rng::SeedSpec;
use crate::scalar::Real;
use crate::tensor::Mat;
use crate::theory::{BoundReport, CheckConfig, Direction};
use crate::NetworkConfig;

/// A run is declared diverged once `F` exceeds this multiple of `F(W⁽⁰⁾)`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    /// Minibatches of this size, reshuffled every epoch.
    Mini(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: BatchMode,
    pub target_eps: f64,
    pub drift_tracking: bool,
    pub seed: SeedSpec,
}

impl TrainConfig {
    pub fn full_batch(learning_rate: f64, steps: usize, target_eps: f64) -> Self {
        Self {
            learning_rate,
            steps,
            batch: BatchMode::Full,
            target_eps,
            drift_tracking: true,
            seed: SeedSpec::new(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.target_eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target eps must be positive, got {}",
                self.target_eps
            )));
        }
        if self.batch == BatchMode::Mini(0) {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Telemetry for one step, taken before that step's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Full-set `F` under full-batch GD; minibatch loss under SGD.
    pub loss: f64,
    /// Full-set `F` at epoch boundaries under SGD, `None` elsewhere.
    pub full_loss: Option<f64>,
    /// `‖W_L⁽ᵗ⁾ − W_L⁽⁰⁾‖_F`
    pub drift_top: Option<f64>,
    /// `max_{l<L} ‖W_l⁽ᵗ⁾ − W_l⁽⁰⁾‖_F`
    pub drift_residual_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub batch: BatchMode,
    pub records: Vec<StepRecord>,
    pub initial_loss: f64,
    /// Step at which divergence was detected.
    pub diverged_at: Option<usize>,
    /// Step at which `F <= ε` was first observed.
    pub reached_target_at: Option<usize>,
    /// Wall-clock seconds per record; excluded from [`TrainingLog::same_run`].
    pub step_seconds: Vec<f64>,
}

impl TrainingLog {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("a log always has the step-0 record")
    }

    /// Last full-set loss observed.
    pub fn final_loss(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .find_map(|r| match self.batch {
                BatchMode::Full => Some(r.loss),
                BatchMode::Mini(_) => r.full_loss,
            })
            .unwrap_or(self.initial_loss)
    }

    /// First step whose full-set loss is at most `fraction · F(W⁽⁰⁾)`.
    pub fn steps_to_fraction(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.initial_loss;
        self.records
            .iter()
            .find(|r| {
                let f = match self.batch {
                    BatchMode::Full => Some(r.loss),
                    BatchMode::Mini(_) => r.full_loss,
                };
                f.is_some_and(|f| f <= target)
            })
            .map(|r| r.step)
    }

    /// Equality ignoring wall-clock timings.
    pub fn same_run(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.records == other.records
            && self.initial_loss.to_bits() == other.initial_loss.to_bits()
            && self.diverged_at == other.diverged_at
            && self.reached_target_at == other.reached_target_at
    }

    /// Columns `step, loss, drift_top, drift_residual_max, diverged`, plus
    /// `full_loss` for minibatch runs. Missing values are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mini = matches!(self.batch, BatchMode::Mini(_));
        let mut header = vec!["step", "loss", "drift_top", "drift_residual_max", "diverged"];
        if mini {
            header.push("full_loss");
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let diverged = self.diverged_at.is_some_and(|s| s == r.step);
            let mut row = vec![
                r.step.to_string(),
                r.loss.to_string(),
                opt(r.drift_top),
                opt(r.drift_residual_max),
                u8::from(diverged).to_string(),
            ];
            if mini {
                row.push(opt(r.full_loss));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trained parameters and the run's telemetry.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: NetworkParams<T>,
    pub log: TrainingLog,
}

/// `W_l ← W_l − η dW_l` for every `l`; `A` and `B` are untouched.
pub fn gd_step<T: Real>(params: &NetworkParams<T>, grads: &Gradients<T>, eta: f64) -> Result<NetworkParams<T>> {
    let mut out = params.clone();
    gd_step_in_place(&mut out, grads, eta)?;
    Ok(out)
}

fn gd_step_in_place<T: Real>(params: &mut NetworkParams<T>, grads: &Gradients<T>, eta: f64) -> Result<()> {
    if grads.dw.len() != params.w.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient layer count",
            expected: params.w.len(),
            got: grads.dw.len(),
        });
    }
    for (w, g) in params.w.iter().zip(&grads.dw) {
        if w.shape() != g.shape() {
            return Err(Error::DimensionMismatch {
                context: "gradient shape",
                expected: w.rows() * w.cols(),
                got: g.rows() * g.cols(),
            });
        }
    }
    if eta == 0.0 {
        return Ok(());
    }
    let step = -T::of(eta);
    for (w, g) in params.w.iter_mut().zip(&grads.dw) {
        w.add_scaled(step, g);
    }
    Ok(())
}

fn drift<T: Real>(now: &[Mat<T>], init: &[Mat<T>]) -> (f64, f64) {
    let d: Vec<f64> = now
        .iter()
        .zip(init)
        .map(|(a, b)| a.sub(b).frobenius_norm().as_f64())
        .collect();
    let top = *d.last().expect("depth >= 2");
    let residual = d[..d.len() - 1].iter().copied().fold(0.0, f64::max);
    (top, residual)
}

fn check_dims<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>) -> Result<()> {
    params.validate()?;
    let c = &params.config;
    for (context, expected, got) in [
        ("training input dim", c.input_dim, data.input_dim()),
        ("training output dim", c.output_dim, data.output_dim()),
    ] {
        if expected != got {
            return Err(Error::DimensionMismatch { context, expected, got });
        }
    }
    Ok(())
}

fn blown_up(f: f64, f0: f64) -> bool {
    !f.is_finite() || f > DIVERGENCE_FACTOR * f0
}

/// Run `tc.steps` updates, stopping early once `F <= ε` or on divergence.
///
/// Under full-batch GD record `t` holds `F(W⁽ᵗ⁾)` before update `t`, so a
/// run that is already fit stops at step 0. Under SGD the data is reshuffled
/// at the start of every epoch from `tc.seed.child(epoch)`; the target and
/// divergence tests use the full-set loss taken at epoch boundaries, and the
/// per-step loss is the minibatch loss (also checked for blow-up).
pub fn train<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>, tc: &TrainConfig) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    check_dims(params, data)?;
    match tc.batch {
        BatchMode::Full => train_full(params, data, tc),
        BatchMode::Mini(b) => train_sgd(params, data, tc, b),
    }
}

fn train_full<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>, tc: &TrainConfig) -> Result<TrainOutcome<T>> {
    let init = params.w.clone();
    let mut cur = params.clone();
    let mut records = Vec::new();
    let mut step_seconds = Vec::new();
    let mut initial_loss = 0.0;
    let mut diverged_at = None;
    let mut reached_target_at = None;
    for t in 0..=tc.steps {
        let clock = Instant::now();
        let (rep, grads) = loss_and_grad(&cur, data)?;
        let f = rep.total.as_f64();
        if t == 0 {
            initial_loss = f;
        }
        let (drift_top, drift_residual_max) = if tc.drift_tracking {
            let (a, b) = drift(&cur.w, &init);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        records.push(StepRecord {
            step: t,
            loss: f,
            full_loss: None,
            drift_top,
            drift_residual_max,
        });
        if blown_up(f, initial_loss) || !grads.is_finite() {
            diverged_at = Some(t);
        } else if f <= tc.target_eps {
            reached_target_at = Some(t);
        } else if t < tc.steps {
            gd_step_in_place(&mut cur, &grads, tc.learning_rate)?;
        }
        step_seconds.push(clock.elapsed().as_secs_f64());
        if diverged_at.is_some() || reached_target_at.is_some() {
            break;
        }
    }
    Ok(TrainOutcome {
        params: cur,
        log: TrainingLog {
            batch: BatchMode::Full,
            records,
            initial_loss,
            diverged_at,
            reached_target_at,
            step_seconds,
        },
    })
}

fn train_sgd<T: Real>(
    params: &NetworkParams<T>,
    data: &Dataset<T>,
    tc: &TrainConfig,
    batch: usize,
) -> Result<TrainOutcome<T>> {
    let n = data.len();
    let init = params.w.clone();
    let mut cur = params.clone();
    let mut records = Vec::new();
    let mut step_seconds = Vec::new();
    let initial_loss = loss(&cur, data)?.total.as_f64();
    let mut diverged_at = None;
    let mut reached_target_at = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    for t in 0..=tc.steps {
        let clock = Instant::now();
        let mut full_loss = None;
        if cursor >= n {
            order = (0..n).collect();
            order.shuffle(&mut tc.seed.child(epoch).rng());
            epoch += 1;
            cursor = 0;
            full_loss = Some(if t == 0 { initial_loss } else { loss(&cur, data)?.total.as_f64() });
        }
        let idx = &order[cursor..(cursor + batch).min(n)];
        cursor += idx.len();
        let sub = data.select(idx)?;
        let (rep, grads) = loss_and_grad(&cur, &sub)?;
        let f = rep.total.as_f64();
        let (drift_top, drift_residual_max) = if tc.drift_tracking {
            let (a, b) = drift(&cur.w, &init);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        records.push(StepRecord {
            step: t,
            loss: f,
            full_loss,
            drift_top,
            drift_residual_max,
        });
        let full_blown = full_loss.is_some_and(|fl| blown_up(fl, initial_loss));
        if full_blown || !f.is_finite() || !grads.is_finite() {
            diverged_at = Some(t);
        } else if full_loss.is_some_and(|fl| fl <= tc.target_eps) {
            reached_target_at = Some(t);
        } else if t < tc.steps {
            gd_step_in_place(&mut cur, &grads, tc.learning_rate)?;
        }
        step_seconds.push(clock.elapsed().as_secs_f64());
        if diverged_at.is_some() || reached_target_at.is_some() {
            break;
        }
    }
    Ok(TrainOutcome {
        params: cur,
        log: TrainingLog {
            batch: BatchMode::Mini(batch),
            records,
            initial_loss,
            diverged_at,
            reached_target_at,
            step_seconds,
        },
    })
}

/// Frozen constants for [`drift_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    /// on `‖W_L − W_L⁽⁰⁾‖_F · δ√m / (n³√d)`
    pub top: f64,
    /// on `max_{l<L} ‖W_l − W_l⁽⁰⁾‖_F · δ√m / (τ n³√d)`
    pub residual: f64,
}

/// Final drift normalized by `n³√d/(δ√m)` (residual layers also by `τ`).
///
/// `measured` is the larger of the two normalized drifts over its constant,
/// against 1. Extras: `drift_top`, `drift_residual`, `top_ratio`,
/// `residual_ratio`, and `relative_to_tau = (residual / top) / τ`.
pub fn drift_check(
    log: &TrainingLog,
    network: &NetworkConfig,
    n: usize,
    d: usize,
    delta: f64,
    consts: &DriftConstants,
) -> Result<BoundReport> {
    let last = log.final_record();
    let (top, residual) = match (last.drift_top, last.drift_residual_max) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::MissingDrift),
    };
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("drift check needs a finite delta > 0, got {delta}")));
    }
    let tau = network.tau;
    let scale = (n as f64).powi(3) * (d as f64).sqrt() / (delta * (network.width as f64).sqrt());
    let top_ratio = top / scale;
    let residual_ratio = if residual == 0.0 { 0.0 } else { residual / (tau * scale) };
    let measured = (top_ratio / consts.top).max(if residual_ratio == 0.0 {
        0.0
    } else {
        residual_ratio / consts.residual
    });
    let relative = if top > 0.0 && tau > 0.0 { residual / top / tau } else { 0.0 };
    let cfg = CheckConfig::network(network.depth, network.width, tau)
        .with_data(n, d)
        .with_delta(delta);
    Ok(BoundReport::new("drift", cfg, measured, 1.0, Direction::AtMost, 1)
        .with_extra("drift_top", top)
        .with_extra("drift_residual", residual)
        .with_extra("top_ratio", top_ratio)
        .with_extra("residual_ratio", residual_ratio)
        .with_extra("relative_to_tau", relative))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_separated_dataset;
    use crate::model::{forward, init_network};

    fn setup(tau: f64) -> (NetworkParams<f64>, Dataset<f64>) {
        let p = init_network(&NetworkConfig::resnet(4, 24, 5, 2, tau), &SeedSpec::new(1)).unwrap();
        let d = gen_separated_dataset(4, 5, 2, 0.5, 1.0, &SeedSpec::new(2)).unwrap();
        (p, d)
    }

    #[test]
    fn zero_gradient_or_rate_leaves_params_unchanged() {
        let (p, _) = setup(0.25);
        let zero = Gradients::zeros_like(&p);
        assert_eq!(gd_step(&p, &zero, 0.1).unwrap(), p);
        let mut g = Gradients::zeros_like(&p);
        g.dw[0][(0, 0)] = 1.0;
        assert_eq!(gd_step(&p, &g, 0.0).unwrap(), p);
        let moved = gd_step(&p, &g, 0.5).unwrap();
        assert_eq!(moved.w[0][(0, 0)], p.w[0][(0, 0)] - 0.5);
        assert_eq!(moved.a, p.a);
        assert_eq!(moved.b, p.b);
    }

    #[test]
    fn gd_step_rejects_shape_mismatch() {
        let (p, _) = setup(0.25);
        let g = Gradients {
            dw: vec![Mat::zeros(24, 24)],
        };
        assert!(gd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn one_step_matches_hand_least_squares() {
        // m = p = d = 1 with every unit active: y = B w2 (1 + τ w1) a x
        let cfg = NetworkConfig::resnet(2, 1, 1, 1, 0.5);
        let p = NetworkParams::<f64> {
            config: cfg,
            a: Mat::from_rows(&[&[1.0]]),
            w: vec![Mat::from_rows(&[&[2.0]]), Mat::from_rows(&[&[1.5]])],
            b: Mat::from_rows(&[&[1.0]]),
        };
        let data = Dataset::new(vec![vec![1.0]], vec![vec![1.0]], None).unwrap();
        // h1 = 2, y = 3, residual 2; dF/dw2 = 2·2 = 4, dF/dw1 = 2·1.5·0.5·1 = 1.5
        let tc = TrainConfig::full_batch(0.1, 1, 1e-12);
        let out = train(&p, &data, &tc).unwrap();
        assert_eq!(out.params.w[1][(0, 0)], 1.5 - 0.1 * 4.0);
        assert_eq!(out.params.w[0][(0, 0)], 2.0 - 0.1 * 1.5);
        assert_eq!(out.log.records[0].loss, 2.0);
        // after: w1 = 1.85, w2 = 1.1 → y = 1.1·1.925 = 2.1175
        assert!((out.log.records[1].loss - 0.5 * 1.1175f64.powi(2)).abs() < 1e-14);
    }

    #[test]
    fn already_fit_stops_at_step_zero() {
        let (p, d) = setup(0.25);
        let preds: Vec<Vec<f64>> = d.features().iter().map(|x| forward(&p, x).unwrap().y).collect();
        let fit = d.with_targets(preds).unwrap();
        let out = train(&p, &fit, &TrainConfig::full_batch(0.01, 100, 1e-9)).unwrap();
        assert_eq!(out.log.records.len(), 1);
        assert_eq!(out.log.reached_target_at, Some(0));
        assert_eq!(out.params, p);
    }

    #[test]
    fn converges_and_is_deterministic() {
        let (p, d) = setup(0.25);
        let tc = TrainConfig::full_batch(0.02, 3000, 1e-6);
        let a = train(&p, &d, &tc).unwrap();
        let b = train(&p, &d, &tc).unwrap();
        assert!(a.log.same_run(&b.log));
        assert!(a.log.reached_target_at.is_some(), "final {}", a.log.final_loss());
        assert!(!a.log.diverged());
        assert!(a.log.records.iter().all(|r| r.loss >= 0.0 && r.drift_top.unwrap() >= 0.0));
    }

    #[test]
    fn huge_rate_diverges() {
        let (p, d) = setup(0.25);
        let out = train(&p, &d, &TrainConfig::full_batch(50.0, 200, 1e-9)).unwrap();
        assert!(out.log.diverged());
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,drift_top,drift_residual_max,diverged\n"));
        assert!(text.trim_end().ends_with(",1"));
    }

    #[test]
    fn sgd_is_seeded_and_logs_epoch_losses() {
        let (p, d) = setup(0.25);
        let mut tc = TrainConfig::full_batch(0.02, 25, 1e-12);
        tc.batch = BatchMode::Mini(3);
        tc.seed = SeedSpec::new(5);
        let a = train(&p, &d, &tc).unwrap();
        let b = train(&p, &d, &tc).unwrap();
        assert!(a.log.same_run(&b.log));
        // n = 4, batch 3: epochs start at steps 0, 2, 4, ...
        let epochs: Vec<usize> = a.log.records.iter().filter(|r| r.full_loss.is_some()).map(|r| r.step).collect();
        assert_eq!(&epochs[..3], &[0, 2, 4]);
        tc.seed = SeedSpec::new(6);
        let c = train(&p, &d, &tc).unwrap();
        assert!(!a.log.same_run(&c.log));
        let mut buf = Vec::new();
        a.log.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("step,loss,drift_top,drift_residual_max,diverged,full_loss\n"));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::full_batch(0.1, 1, 1e-3);
        assert!(ok.validate().is_ok());
        assert!(TrainConfig::full_batch(0.0, 1, 1e-3).validate().is_err());
        assert!(TrainConfig::full_batch(0.1, 0, 1e-3).validate().is_err());
        let mut bad = ok;
        bad.batch = BatchMode::Mini(0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn drift_check_zero_steps_and_missing_data() {
        let (p, d) = setup(0.25);
        let preds: Vec<Vec<f64>> = d.features().iter().map(|x| forward(&p, x).unwrap().y).collect();
        let fit = d.with_targets(preds).unwrap();
        let out = train(&p, &fit, &TrainConfig::full_batch(0.01, 10, 1e-9)).unwrap();
        let consts = DriftConstants { top: 1.0, residual: 1.0 };
        let r = drift_check(&out.log, &p.config, 4, 2, 0.5, &consts).unwrap();
        assert_eq!(r.measured, 0.0);
        let mut tc = TrainConfig::full_batch(0.01, 10, 1e-9);
        tc.drift_tracking = false;
        let out = train(&p, &d, &tc).unwrap();
        assert!(matches!(
            drift_check(&out.log, &p.config, 4, 2, 0.5, &consts),
            Err(Error::MissingDrift)
        ));
    }

    #[test]
    fn trains_in_single_precision() {
        let p = init_network::<f32>(&NetworkConfig::resnet(3, 16, 4, 2, 0.3), &SeedSpec::new(1)).unwrap();
        let d = gen_separated_dataset::<f32>(3, 4, 2, 0.5, 1.0, &SeedSpec::new(2)).unwrap();
        let out = train(&p, &d, &TrainConfig::full_batch(0.02, 500, 1e-3)).unwrap();
        assert!(out.log.final_loss() < out.log.initial_loss);
    }
}
