use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::perturb::Perturbation;
use super::report::{BoundReport, CheckConfig, Direction};
use crate::error::{Error, Result};
use crate::grad::{loss, loss_and_grad};
use crate::model::{forward, init_network, SignMask};
use crate::rng::SeedSpec;
use crate::spectral::{power_iteration, LinearOperator, PowerIterOptions};
use crate::tensor::{self, random_unit_vector};
use crate::{Data, Network, NetworkConfig, Trace};

/// Run `f` once per trial on `seed.child(t)`, in parallel, returning results
/// in trial order.
pub fn run_trials<R, F>(trials: usize, seed: &SeedSpec, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&SeedSpec) -> Result<R> + Sync,
{
    (0..trials as u64).into_par_iter().map(|t| f(&seed.child(t))).collect()
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err, samples: n }
    }
}

/// `D_b (I + τW_b) ⋯ D_a (I + τW_a)` applied without forming the product.
pub struct ChainOperator<'a> {
    params: &'a Network,
    masks: &'a [SignMask],
    a: usize,
    b: usize,
}

impl<'a> ChainOperator<'a> {
    /// `masks[l]` is `D_l`; the slice must cover at least `0..=b`.
    pub fn new(params: &'a Network, masks: &'a [SignMask], a: usize, b: usize) -> Result<Self> {
        let depth = params.depth();
        if a < 1 || a > b || b > depth - 1 {
            return Err(Error::LayerOutOfRange {
                start: a,
                end: b,
                depth,
            });
        }
        if masks.len() <= b {
            return Err(Error::DimensionMismatch {
                context: "chain masks",
                expected: b + 1,
                got: masks.len(),
            });
        }
        let m = params.config.width;
        if let Some(bad) = masks[a..=b].iter().find(|d| d.len() != m) {
            return Err(Error::DimensionMismatch {
                context: "chain mask width",
                expected: m,
                got: bad.len(),
            });
        }
        Ok(Self { params, masks, a, b })
    }
}

impl LinearOperator<f64> for ChainOperator<'_> {
    fn nrows(&self) -> usize {
        self.params.config.width
    }

    fn ncols(&self) -> usize {
        self.params.config.width
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let tau = self.params.config.tau;
        let mut tmp = vec![0.0; x.len()];
        out.copy_from_slice(x);
        for l in self.a..=self.b {
            self.params.weight(l).matvec_into(out, &mut tmp);
            tensor::axpy(tau, &tmp, out);
            self.masks[l].apply(out);
        }
    }

    fn apply_transpose(&self, x: &[f64], out: &mut [f64]) {
        let tau = self.params.config.tau;
        let mut tmp = vec![0.0; x.len()];
        out.copy_from_slice(x);
        for l in (self.a..=self.b).rev() {
            self.masks[l].apply(out);
            self.params.weight(l).matvec_t_into(out, &mut tmp);
            tensor::axpy(tau, &tmp, out);
        }
    }
}

/// Spectral norm of the masked residual chain over layers `a..=b` against
/// `1 + c`. Extras: `naive_bound = (1+τ)^(b−a+1)`, `iterations`,
/// `converged`.
///
/// With `τ = 0` the chain is a product of 0/1 diagonals, so its norm is
/// exactly 1 (or 0 if no coordinate survives every mask).
pub fn check_spectral_product(
    params: &Network,
    masks: &[SignMask],
    a: usize,
    b: usize,
    c: f64,
    opts: &PowerIterOptions,
) -> Result<BoundReport> {
    let op = ChainOperator::new(params, masks, a, b)?;
    let tau = params.config.tau;
    let (measured, iterations, converged) = if tau == 0.0 {
        let alive = (0..params.config.width).any(|k| masks[a..=b].iter().all(|d| d.get(k)));
        (if alive { 1.0 } else { 0.0 }, 0, true)
    } else {
        let est = power_iteration(&op, opts);
        (est.value, est.iterations, est.converged)
    };
    let config = CheckConfig::network(params.depth(), params.config.width, tau);
    Ok(
        BoundReport::new("spectral_product", config, measured, 1.0 + c, Direction::AtMost, 1)
            .with_seed(&opts.seed)
            .with_extra("naive_bound", (1.0 + tau).powi((b - a + 1) as i32))
            .with_extra("a", a as f64)
            .with_extra("b", b as f64)
            .with_extra("iterations", iterations as f64)
            .with_extra("converged", if converged { 1.0 } else { 0.0 }),
    )
}

/// All of `‖h_0‖ .. ‖h_L‖` inside `[1 − c, 1 + c]`.
///
/// `measured = max_l |‖h_l‖ − 1|` with bound `c`; the norms themselves go
/// in `per_layer` and their extremes in `min_norm`/`max_norm`.
pub fn check_layer_norms(trace: &Trace, c: f64) -> BoundReport {
    let norms = trace.layer_norms();
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dev = norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
    let config = CheckConfig {
        depth: Some(trace.depth()),
        width: trace.h.first().map(Vec::len),
        ..CheckConfig::default()
    };
    BoundReport::new("layer_norms", config, dev, c, Direction::AtMost, 1)
        .with_per_layer(norms)
        .with_extra("min_norm", lo)
        .with_extra("max_norm", hi)
}

/// Monte Carlo estimate of `E‖h_{L−1}‖²` over fresh initializations, each
/// probed with its own random unit input. Passes when the mean exceeds
/// `L^{2c} = τ² L` where `τ = L^{−1/2+c}`.
///
/// `measured` is the `h_{L−1}` mean; extras carry both standard errors and
/// the `h_L` mean. Trial `t` uses `seed.child(t)`.
pub fn estimate_explosion(config: &NetworkConfig, trials: usize, seed: &SeedSpec) -> Result<BoundReport> {
    config.validate()?;
    if trials < 30 {
        return Err(Error::InvalidArgument(format!("need at least 30 trials, got {trials}")));
    }
    let depth = config.depth;
    let samples = run_trials(trials, seed, |s| {
        let params: Network = init_network(config, &s.child(0))?;
        let x: Vec<f64> = random_unit_vector(config.input_dim, &s.child(1));
        let t = forward(&params, &x)?;
        Ok((tensor::norm_sq(&t.h[depth - 1]), tensor::norm_sq(&t.h[depth])))
    })?;
    let prev: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let top: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let prev = MeanEstimate::from_samples(&prev);
    let top = MeanEstimate::from_samples(&top);
    let tau = config.tau;
    let cfg = CheckConfig::network(depth, config.width, tau);
    let report = if tau == 0.0 {
        BoundReport::not_applicable("explosion", cfg, prev.mean, trials)
    } else {
        let l = depth as f64;
        BoundReport::new("explosion", cfg, prev.mean, tau * tau * l, Direction::Exceeds, trials)
            .with_extra("c", tau.ln() / l.ln() + 0.5)
    };
    Ok(report
        .with_seed(seed)
        .with_extra("std_err", prev.std_err)
        .with_extra("mean_top", top.mean)
        .with_extra("std_err_top", top.std_err))
}

fn data_config(params: &Network, data: &Data) -> CheckConfig {
    CheckConfig::network(params.depth(), params.config.width, params.config.tau)
        .with_data(data.len(), data.output_dim())
}

/// `‖∇_{W_l}F‖²_F · d / (F τ² m n)` per residual layer and the same without
/// `τ²` for the top layer.
///
/// `measured` is the largest residual ratio; `per_layer` holds all `L`
/// ratios (top last) and `top_ratio` repeats the top one. Not applicable
/// when `F = 0` or `τ = 0`.
pub fn gradient_bound_ratios(params: &Network, data: &Data, constant: f64) -> Result<BoundReport> {
    let (rep, grads) = loss_and_grad(params, data)?;
    let cfg = data_config(params, data);
    let f = rep.total;
    let tau = params.config.tau;
    if f == 0.0 || tau == 0.0 {
        return Ok(BoundReport::not_applicable("gradient_upper", cfg, 0.0, 1));
    }
    let scale = data.output_dim() as f64 / (f * params.config.width as f64 * data.len() as f64);
    let depth = params.depth();
    let ratios: Vec<f64> = grads
        .frobenius_norms()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let r = n * n * scale;
            if i + 1 < depth {
                r / (tau * tau)
            } else {
                r
            }
        })
        .collect();
    let worst = ratios[..depth - 1].iter().copied().fold(0.0, f64::max);
    let top = ratios[depth - 1];
    Ok(
        BoundReport::new("gradient_upper", cfg, worst, constant, Direction::AtMost, 1)
            .with_per_layer(ratios)
            .with_extra("top_ratio", top)
            .with_extra("loss", f),
    )
}

/// `‖∇_{W_L}F‖²_F · (dn/δ) / (m · maxᵢ Fᵢ)` against a lower constant.
pub fn gradient_lower_ratio(params: &Network, data: &Data, constant: f64) -> Result<BoundReport> {
    if data.delta_is_vacuous() || !(data.delta() > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gradient lower bound needs a finite positive delta, got {}",
            data.delta()
        )));
    }
    let (rep, grads) = loss_and_grad(params, data)?;
    let cfg = data_config(params, data).with_delta(data.delta());
    let fmax = rep.max_sample();
    if fmax == 0.0 {
        return Ok(BoundReport::not_applicable("gradient_lower", cfg, 0.0, 1));
    }
    let top = grads.layer(params.depth()).frobenius_norm();
    let (n, d, m) = (data.len() as f64, data.output_dim() as f64, params.config.width as f64);
    let measured = top * top * (d * n / data.delta()) / (m * fmax);
    Ok(
        BoundReport::new("gradient_lower", cfg, measured, constant, Direction::AtLeast, 1)
            .with_extra("loss", rep.total)
            .with_extra("max_sample_loss", fmax),
    )
}

/// Constants multiplying the four perturbation scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConstants {
    /// on `max_{l<L} ‖h′_l‖ / (τ² L ω)`
    pub hidden: f64,
    /// on `max_{l<L} ‖D′_l‖₀ / (m (ωτL)^{2/3})`
    pub flips: f64,
    /// on `‖h′_L‖ / ω`
    pub top: f64,
    /// on `‖D′_L‖₀ / (m ω^{2/3})`
    pub top_flips: f64,
}

fn normalized(q: f64, scale: f64) -> f64 {
    if q == 0.0 {
        0.0
    } else {
        q / scale
    }
}

/// Change of one forward pass under `W → W + W′`.
///
/// Extras: the raw quantities `hidden`, `flips`, `top`, `top_flips` and their
/// scale-normalized versions `*_ratio`. `measured` is the largest
/// `ratio / constant`, checked against 1.
pub fn perturbation_report(
    params0: &Network,
    pert: &Perturbation,
    x: &[f64],
    consts: &PerturbationConstants,
) -> Result<BoundReport> {
    let moved = pert.apply_to(params0)?;
    let t0 = forward(params0, x)?;
    let t1 = forward(&moved, x)?;
    let depth = params0.depth();
    let mut hidden = 0.0f64;
    let mut flips = 0usize;
    for l in 1..depth {
        hidden = hidden.max(tensor::distance(&t0.h[l], &t1.h[l]));
        flips = flips.max(t0.masks[l].hamming(&t1.masks[l]));
    }
    let top = tensor::distance(&t0.h[depth], &t1.h[depth]);
    let top_flips = t0.masks[depth].hamming(&t1.masks[depth]);

    let (tau, omega) = (params0.config.tau, pert.omega);
    let (l, m) = (depth as f64, params0.config.width as f64);
    let ratios = [
        normalized(hidden, tau * tau * l * omega),
        normalized(flips as f64, m * (omega * tau * l).powf(2.0 / 3.0)),
        normalized(top, omega),
        normalized(top_flips as f64, m * omega.powf(2.0 / 3.0)),
    ];
    let cs = [consts.hidden, consts.flips, consts.top, consts.top_flips];
    let measured = ratios.iter().zip(cs).map(|(r, c)| normalized(*r, c)).fold(0.0, f64::max);
    let cfg = CheckConfig::network(depth, params0.config.width, tau).with_omega(omega);
    Ok(BoundReport::new("perturbation", cfg, measured, 1.0, Direction::AtMost, 1)
        .with_extra("hidden", hidden)
        .with_extra("flips", flips as f64)
        .with_extra("top", top)
        .with_extra("top_flips", top_flips as f64)
        .with_extra("hidden_ratio", ratios[0])
        .with_extra("flips_ratio", ratios[1])
        .with_extra("top_ratio", ratios[2])
        .with_extra("top_flips_ratio", ratios[3]))
}

/// `min_{i<j, l} ‖h_{i,l} − h_{j,l}‖ / δ` against a lower constant;
/// `per_layer` holds the per-layer minima.
pub fn separateness_check(traces: &[Trace], delta: f64, constant: f64) -> Result<BoundReport> {
    if traces.len() < 2 {
        return Err(Error::InvalidArgument("separateness needs at least two traces".into()));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::AssumptionViolated(format!(
            "separation needs a positive finite delta, got {delta}"
        )));
    }
    let depth = traces[0].depth();
    if let Some(t) = traces.iter().find(|t| t.depth() != depth) {
        return Err(Error::DimensionMismatch {
            context: "separateness trace depth",
            expected: depth,
            got: t.depth(),
        });
    }
    let per_layer: Vec<f64> = (0..=depth)
        .map(|l| {
            let mut best = f64::INFINITY;
            for i in 0..traces.len() {
                for j in i + 1..traces.len() {
                    best = best.min(tensor::distance(&traces[i].h[l], &traces[j].h[l]));
                }
            }
            best / delta
        })
        .collect();
    let measured = per_layer.iter().copied().fold(f64::INFINITY, f64::min);
    let cfg = CheckConfig {
        depth: Some(depth),
        width: Some(traces[0].h[0].len()),
        n: Some(traces.len()),
        delta: Some(delta),
        ..CheckConfig::default()
    };
    Ok(BoundReport::new("separateness", cfg, measured, constant, Direction::AtLeast, 1).with_per_layer(per_layer))
}

/// Inputs to the two closed-form semi-smoothness terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemismoothInputs {
    pub depth: usize,
    pub width: usize,
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub omega: f64,
    /// `‖W′_L‖₂`
    pub top_norm: f64,
    /// `Σ_{l<L} ‖W′_l‖₂`
    pub residual_norm_sum: f64,
    /// `F` at the base point.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemismoothTerms {
    pub first_order: f64,
    pub second_order: f64,
}

impl SemismoothTerms {
    /// First-order term over second-order term.
    pub fn ratio(&self) -> f64 {
        self.first_order / self.second_order
    }
}

/// ```text
/// second = (nm/d) (‖W′_L‖ + τ Σ‖W′_l‖)²
/// first  = √(mnω^{2/3}/d) (‖W′_L‖ + max{(τL)^{4/3}, 1} Σ‖W′_l‖) √F
/// ```
pub fn semismooth_terms(s: &SemismoothInputs) -> SemismoothTerms {
    let (m, n, d) = (s.width as f64, s.n as f64, s.d as f64);
    let l = s.depth as f64;
    let second = n * m / d * (s.top_norm + s.tau * s.residual_norm_sum).powi(2);
    let lift = (s.tau * l).powf(4.0 / 3.0).max(1.0);
    let first = (m * n * s.omega.powf(2.0 / 3.0) / d).sqrt()
        * (s.top_norm + lift * s.residual_norm_sum)
        * s.loss.sqrt();
    SemismoothTerms {
        first_order: first,
        second_order: second,
    }
}

/// `R = F(W + W′) − F(W) − ⟨∇F(W), W′⟩` against `C₁·first + C₂·second`.
///
/// Extras: `residual`, both raw terms and `first_share`, the fraction of
/// the bound contributed by the first-order term.
pub fn semismooth_residual(params: &Network, pert: &Perturbation, data: &Data, c1: f64, c2: f64) -> Result<BoundReport> {
    let tau = params.config.tau;
    let depth = params.depth();
    if tau * tau * depth as f64 > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "semi-smoothness needs tau² L <= 1, got {}",
            tau * tau * depth as f64
        )));
    }
    let moved = pert.apply_to(params)?;
    let (rep, grads) = loss_and_grad(params, data)?;
    let f1 = loss(&moved, data)?.total;
    let residual = f1 - rep.total - grads.inner(&pert.weights);
    let terms = semismooth_terms(&SemismoothInputs {
        depth,
        width: params.config.width,
        n: data.len(),
        d: data.output_dim(),
        tau,
        omega: pert.omega,
        top_norm: pert.top_norm(),
        residual_norm_sum: pert.residual_norm_sum(),
        loss: rep.total,
    });
    let bound = c1 * terms.first_order + c2 * terms.second_order;
    let share = if bound > 0.0 { c1 * terms.first_order / bound } else { 0.0 };
    let cfg = data_config(params, data).with_omega(pert.omega);
    Ok(BoundReport::new("semismooth", cfg, residual, bound, Direction::AtMost, 1)
        .with_extra("residual", residual)
        .with_extra("first_order", terms.first_order)
        .with_extra("second_order", terms.second_order)
        .with_extra("first_share", share)
        .with_extra("loss", rep.total))
}

/// Per-layer growth statistics of one forward pass, for `l = 1..L−1`:
/// with `h̃ = h_{l−1}/‖h_{l−1}‖`,
///
/// ```text
/// ξ_l = 2τ ⟨h̃, W_l h̃⟩     ζ_l = τ² ‖W_l h̃‖²     Δ_l = ‖g_l‖² / ‖h_{l−1}‖²
/// ```
///
/// so that `Δ_l = 1 + ξ_l + ζ_l`. Diagnostic only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStatistics {
    pub layer: usize,
    pub xi: f64,
    pub zeta: f64,
    pub delta: f64,
}

pub fn layer_statistics(params: &Network, trace: &Trace) -> Vec<LayerStatistics> {
    let tau = params.config.tau;
    (1..params.depth())
        .map(|l| {
            let h = &trace.h[l - 1];
            let nh = tensor::norm(h);
            if nh == 0.0 {
                return LayerStatistics {
                    layer: l,
                    xi: 0.0,
                    zeta: 0.0,
                    delta: 0.0,
                };
            }
            let ht: Vec<f64> = h.iter().map(|v| v / nh).collect();
            let wh = params.weight(l).matvec(&ht);
            LayerStatistics {
                layer: l,
                xi: 2.0 * tau * tensor::dot(&ht, &wh),
                zeta: tau * tau * tensor::norm_sq(&wh),
                delta: tensor::norm_sq(&trace.g[l]) / (nh * nh),
            }
        })
        .collect()
}
