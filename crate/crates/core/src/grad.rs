//! The ℓ₂ objective `F = Σᵢ ½‖B h_{i,L} − yᵢ*‖²` and its gradient with
//! respect to `W_1..W_L`.
//!
//! Two routes compute the same thing:
//! - [`bp_vector`] evaluates the explicit back-propagation product for one
//!   sample and one target,
//! - [`backprop`] runs a reverse sweep over all samples at `O(L m²)` per sample.
//!
//! [`finite_diff_gradient`] is the independent oracle for both.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Arch, ForwardTrace, NetworkParams, SignMask};
use crate::scalar::Real;
use crate::tensor::{self, Mat};

/// Largest network the finite-difference oracle will touch.
pub const FINITE_DIFF_MAX_PARAMS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub total: T,
    pub per_sample: Vec<T>,
    /// `B h_{i,L} − yᵢ*`
    pub loss_vectors: Vec<Vec<T>>,
}

impl<T: Real> LossReport<T> {
    pub fn max_sample(&self) -> T {
        self.per_sample.iter().copied().fold(T::zero(), T::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients<T> {
    /// `∂F/∂W_l` at index `l − 1`.
    pub dw: Vec<Mat<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        let m = params.config.width;
        Self {
            dw: vec![Mat::zeros(m, m); params.depth()],
        }
    }

    /// `∂F/∂W_l` for `1 <= l <= L`.
    pub fn layer(&self, l: usize) -> &Mat<T> {
        &self.dw[l - 1]
    }

    pub fn frobenius_norms(&self) -> Vec<T> {
        self.dw.iter().map(Mat::frobenius_norm).collect()
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            dw: self.dw.iter().map(|m| m.scaled(alpha)).collect(),
        }
    }

    /// `Σ_l ⟨dW_l, other_l⟩`
    pub fn inner(&self, other: &[Mat<T>]) -> T {
        self.dw.iter().zip(other).map(|(a, b)| a.inner(b)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().all(Mat::is_finite)
    }
}

fn check_dataset<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>) -> Result<()> {
    let c = &params.config;
    if data.input_dim() != c.input_dim {
        return Err(Error::DimensionMismatch {
            context: "dataset input dim",
            expected: c.input_dim,
            got: data.input_dim(),
        });
    }
    if data.output_dim() != c.output_dim {
        return Err(Error::DimensionMismatch {
            context: "dataset output dim",
            expected: c.output_dim,
            got: data.output_dim(),
        });
    }
    Ok(())
}

/// Loss from already computed traces (one per sample, in dataset order).
pub fn loss_from_traces<T: Real>(traces: &[ForwardTrace<T>], data: &Dataset<T>) -> LossReport<T> {
    let half = T::of(0.5);
    let loss_vectors: Vec<Vec<T>> = traces
        .iter()
        .zip(data.targets())
        .map(|(t, y)| tensor::sub(&t.y, y))
        .collect();
    let per_sample: Vec<T> = loss_vectors.iter().map(|v| half * tensor::norm_sq(v)).collect();
    LossReport {
        total: per_sample.iter().copied().sum(),
        per_sample,
        loss_vectors,
    }
}

/// Forward every sample and evaluate the objective.
pub fn evaluate<T: Real>(
    params: &NetworkParams<T>,
    data: &Dataset<T>,
) -> Result<(Vec<ForwardTrace<T>>, LossReport<T>)> {
    check_dataset(params, data)?;
    let traces = data
        .features()
        .par_iter()
        .map(|x| params.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let report = loss_from_traces(&traces, data);
    Ok((traces, report))
}

pub fn loss<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>) -> Result<LossReport<T>> {
    evaluate(params, data).map(|(_, r)| r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BpTarget {
    /// `∂/∂h_l`, `0 <= l <= L`.
    Hidden(usize),
    /// `∂/∂W_l`, `1 <= l <= L`.
    Weight(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BpOutput<T> {
    Vector(Vec<T>),
    Matrix(Mat<T>),
}

impl<T> BpOutput<T> {
    pub fn into_vector(self) -> Option<Vec<T>> {
        match self {
            Self::Vector(v) => Some(v),
            Self::Matrix(_) => None,
        }
    }

    pub fn into_matrix(self) -> Option<Mat<T>> {
        match self {
            Self::Matrix(m) => Some(m),
            Self::Vector(_) => None,
        }
    }
}

fn check_trace<T: Real>(params: &NetworkParams<T>, trace: &ForwardTrace<T>) -> Result<()> {
    let l = params.depth();
    let m = params.config.width;
    if trace.h.len() != l + 1 || trace.masks.len() != l + 1 || trace.g.len() != l + 1 {
        return Err(Error::DimensionMismatch {
            context: "trace depth",
            expected: l + 1,
            got: trace.h.len(),
        });
    }
    if trace.h.iter().any(|h| h.len() != m) || trace.masks.iter().any(|d| d.len() != m) {
        return Err(Error::DimensionMismatch {
            context: "trace width",
            expected: m,
            got: trace.h[0].len(),
        });
    }
    if trace.y.len() != params.config.output_dim {
        return Err(Error::DimensionMismatch {
            context: "trace output",
            expected: params.config.output_dim,
            got: trace.y.len(),
        });
    }
    Ok(())
}

/// Whether `W_l` sits on a scaled residual branch.
fn is_residual<T: Real>(params: &NetworkParams<T>, l: usize) -> bool {
    params.config.arch == Arch::ResNet && l < params.depth()
}

/// `out = J_lᵀ s` where `J_l = ∂g_l/∂h_{l−1}`: `I + τW_l` on residual layers,
/// `W_l` otherwise.
fn layer_jacobian_t<T: Real>(params: &NetworkParams<T>, l: usize, s: &[T], out: &mut [T]) {
    params.weight(l).matvec_t_into(s, out);
    if is_residual(params, l) {
        let tau = params.tau();
        for (o, &si) in out.iter_mut().zip(s) {
            *o = si + tau * *o;
        }
    }
}

/// Back-propagate an output-space vector `v` through one sample's trace.
///
/// For a residual weight this is
/// `τ (D_l (I+τW_{l+1})ᵀ D_{l+1} ⋯ (I+τW_{L−1})ᵀ D_{L−1} W_Lᵀ D_L Bᵀ v) h_{l−1}ᵀ`,
/// for the top weight `(D_L Bᵀ v) h_{L−1}ᵀ`, and for a hidden state the bracketed
/// vector without the leading `D_l`.
pub fn bp_vector<T: Real>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    v: &[T],
    target: BpTarget,
) -> Result<BpOutput<T>> {
    check_trace(params, trace)?;
    let depth = params.depth();
    if v.len() != params.config.output_dim {
        return Err(Error::DimensionMismatch {
            context: "bp vector",
            expected: params.config.output_dim,
            got: v.len(),
        });
    }
    let stop = match target {
        BpTarget::Hidden(l) if l <= depth => l,
        BpTarget::Weight(l) if (1..=depth).contains(&l) => l,
        other => return Err(Error::InvalidTarget(format!("{other:?} for depth {depth}"))),
    };
    // u = ∂/∂h_L, then walk down to ∂/∂h_stop
    let mut u = params.b.matvec_t(v);
    let mut next = vec![T::zero(); u.len()];
    for k in (stop + 1..=depth).rev() {
        trace.masks[k].apply(&mut u);
        layer_jacobian_t(params, k, &u, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    match target {
        BpTarget::Hidden(_) => Ok(BpOutput::Vector(u)),
        BpTarget::Weight(l) => {
            trace.masks[l].apply(&mut u);
            let coef = if is_residual(params, l) { params.tau() } else { T::one() };
            let mut out = Mat::zeros(u.len(), u.len());
            out.add_outer(coef, &u, &trace.h[l - 1]);
            Ok(BpOutput::Matrix(out))
        }
    }
}

/// Reverse sweep for one sample: `coef_l · D_l ∂h_l` for `l = 1..=L`
/// (index `l − 1`), so that `∂F/∂W_l = Σᵢ out_l h_{l−1}ᵀ`.
fn sweep_sample<T: Real>(params: &NetworkParams<T>, trace: &ForwardTrace<T>, v: &[T]) -> Vec<Vec<T>> {
    let depth = params.depth();
    let tau = params.tau();
    let mut out = vec![Vec::new(); depth];
    let mut dh = params.b.matvec_t(v);
    let mut next = vec![T::zero(); dh.len()];
    for l in (1..=depth).rev() {
        trace.masks[l].apply(&mut dh);
        layer_jacobian_t(params, l, &dh, &mut next);
        let mut s = dh.clone();
        if is_residual(params, l) {
            tensor::scale_in_place(tau, &mut s);
        }
        out[l - 1] = s;
        std::mem::swap(&mut dh, &mut next);
    }
    out
}

/// Gradient of the sum objective given per-sample error vectors.
///
/// Per-sample sweeps and per-layer sums run in parallel; each layer's sum
/// runs over samples in index order, so the result does not depend on the
/// thread count.
pub fn backprop_vectors<T: Real>(
    params: &NetworkParams<T>,
    traces: &[ForwardTrace<T>],
    vectors: &[Vec<T>],
) -> Result<Gradients<T>> {
    if traces.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            context: "backprop sample count",
            expected: traces.len(),
            got: vectors.len(),
        });
    }
    for (t, v) in traces.iter().zip(vectors) {
        check_trace(params, t)?;
        if v.len() != params.config.output_dim {
            return Err(Error::DimensionMismatch {
                context: "loss vector",
                expected: params.config.output_dim,
                got: v.len(),
            });
        }
    }
    let sweeps: Vec<Vec<Vec<T>>> = traces
        .par_iter()
        .zip(vectors.par_iter())
        .map(|(t, v)| sweep_sample(params, t, v))
        .collect();
    let m = params.config.width;
    let dw = (1..=params.depth())
        .into_par_iter()
        .map(|l| {
            let mut g = Mat::zeros(m, m);
            for (sweep, t) in sweeps.iter().zip(traces) {
                g.add_outer(T::one(), &sweep[l - 1], &t.h[l - 1]);
            }
            g
        })
        .collect();
    Ok(Gradients { dw })
}

/// `∂F/∂W_l = Σᵢ BP_i(B h_{i,L} − yᵢ*, W_l)`.
pub fn backprop<T: Real>(
    params: &NetworkParams<T>,
    traces: &[ForwardTrace<T>],
    report: &LossReport<T>,
) -> Result<Gradients<T>> {
    backprop_vectors(params, traces, &report.loss_vectors)
}

/// Loss and gradient in one pass.
pub fn loss_and_grad<T: Real>(
    params: &NetworkParams<T>,
    data: &Dataset<T>,
) -> Result<(LossReport<T>, Gradients<T>)> {
    let (traces, report) = evaluate(params, data)?;
    let grads = backprop(params, &traces, &report)?;
    Ok((report, grads))
}

/// Central differences plus a per-entry flag for entries too close to a
/// ReLU kink to compare against an analytic subgradient.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport<T> {
    pub grads: Gradients<T>,
    /// `near_kink[l − 1][j·m + k]` for entry `(j, k)` of `W_l`.
    pub near_kink: Vec<Vec<bool>>,
}

fn all_masks<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>) -> Result<(T, Vec<Vec<SignMask>>)> {
    let (traces, report) = evaluate(params, data)?;
    Ok((report.total, traces.into_iter().map(|t| t.masks).collect()))
}

/// `(F(W + εE_jk) − F(W − εE_jk)) / 2ε` for every trainable entry.
///
/// Entry `(j, k)` of `W_l` is flagged near a kink when any sign mask differs
/// between the two evaluations, or when some sample has `|(g_l)_j| < 10ε` at
/// the base point. Returns `None` above [`FINITE_DIFF_MAX_PARAMS`].
pub fn finite_diff_report<T: Real>(
    params: &NetworkParams<T>,
    data: &Dataset<T>,
    step: f64,
) -> Result<Option<FiniteDiffReport<T>>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if params.config.trainable_params() > FINITE_DIFF_MAX_PARAMS {
        return Ok(None);
    }
    let (base_traces, _) = evaluate(params, data)?;
    let eps = T::of(step);
    let kink_radius = T::of(10.0 * step);
    let m = params.config.width;
    let mut grads = Gradients::zeros_like(params);
    let mut near_kink = vec![vec![false; m * m]; params.depth()];
    let mut work = params.clone();
    for l in 1..=params.depth() {
        let row_near: Vec<bool> = (0..m)
            .map(|j| base_traces.iter().any(|t| t.g[l][j].abs() < kink_radius))
            .collect();
        for j in 0..m {
            for k in 0..m {
                let orig = work.weight(l)[(j, k)];
                work.weight_mut(l)[(j, k)] = orig + eps;
                let (fp, mp) = all_masks(&work, data)?;
                work.weight_mut(l)[(j, k)] = orig - eps;
                let (fm, mm) = all_masks(&work, data)?;
                work.weight_mut(l)[(j, k)] = orig;
                grads.dw[l - 1][(j, k)] = (fp - fm) / (eps + eps);
                near_kink[l - 1][j * m + k] = row_near[j] || mp != mm;
            }
        }
    }
    Ok(Some(FiniteDiffReport { grads, near_kink }))
}

pub fn finite_diff_gradient<T: Real>(
    params: &NetworkParams<T>,
    data: &Dataset<T>,
    step: f64,
) -> Result<Option<Gradients<T>>> {
    Ok(finite_diff_report(params, data, step)?.map(|r| r.grads))
}

/// Per-layer `‖analytic − fd‖_F / max(‖analytic‖_F, ‖fd‖_F)` over entries not
/// flagged near a kink (0 when both sides vanish).
pub fn relative_layer_errors<T: Real>(analytic: &Gradients<T>, fd: &FiniteDiffReport<T>) -> Vec<f64> {
    analytic
        .dw
        .iter()
        .zip(&fd.grads.dw)
        .zip(&fd.near_kink)
        .map(|((a, f), skip)| {
            let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
            for ((&x, &y), &s) in a.as_slice().iter().zip(f.as_slice()).zip(skip) {
                if s {
                    continue;
                }
                let (x, y) = (x.as_f64(), y.as_f64());
                diff += (x - y) * (x - y);
                na += x * x;
                nf += y * y;
            }
            let denom = f64::max(na, nf).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                diff.sqrt() / denom
            }
        })
        .collect()
}
