//! The scaled residual network and its feedforward baseline.
//!
//! ```text
//! h_0 = φ(A x)
//! h_l = φ(h_{l-1} + τ W_l h_{l-1})     l = 1..L-1
//! h_L = φ(W_L h_{L-1})
//! y   = B h_L
//! ```
//!
//! The feedforward baseline replaces every hidden layer by `h_l = φ(W_l h_{l-1})`.
//! Only `W_1..W_L` are trainable; `A` and `B` stay at their initial values.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSpec;
use crate::scalar::Real;
use crate::tensor::{self, gaussian_matrix, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ResNet,
    FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `L`: number of trainable weight matrices.
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub tau: f64,
    pub arch: Arch,
}

impl NetworkConfig {
    pub fn resnet(depth: usize, width: usize, input_dim: usize, output_dim: usize, tau: f64) -> Self {
        Self {
            depth,
            width,
            input_dim,
            output_dim,
            tau,
            arch: Arch::ResNet,
        }
    }

    pub fn feedforward(depth: usize, width: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            depth,
            width,
            input_dim,
            output_dim,
            tau: 0.0,
            arch: Arch::FeedForward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("depth must be >= 2, got {}", self.depth)));
        }
        for (name, v) in [
            ("width", self.width),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau must be finite and non-negative, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars, `L m²`.
    pub fn trainable_params(&self) -> usize {
        self.depth * self.width * self.width
    }
}

/// Diagonal 0/1 sign matrix `D_l`, stored as its diagonal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignMask(Vec<bool>);

impl SignMask {
    /// `[D]_kk = 1{g_k >= 0}`
    pub fn of_preactivation<T: Real>(g: &[T]) -> Self {
        Self(g.iter().map(|&x| x >= T::zero()).collect())
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn all_ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `‖D ⊕ D'‖₀`
    pub fn hamming(&self, other: &Self) -> usize {
        assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Zero the coordinates where the mask is off.
    pub fn apply<T: Real>(&self, v: &mut [T]) {
        assert_eq!(v.len(), self.len());
        for (x, &on) in v.iter_mut().zip(&self.0) {
            if !on {
                *x = T::zero();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams<T> {
    pub config: NetworkConfig,
    /// `m × p` input map.
    pub a: Mat<T>,
    /// `W_1..W_L`, stored at indices `0..L`.
    pub w: Vec<Mat<T>>,
    /// `d × m` output map.
    pub b: Mat<T>,
}

impl<T: Real> NetworkParams<T> {
    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn tau(&self) -> T {
        T::of(self.config.tau)
    }

    /// `W_l` for `1 <= l <= L`.
    pub fn weight(&self, l: usize) -> &Mat<T> {
        &self.w[l - 1]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut Mat<T> {
        &mut self.w[l - 1]
    }

    /// Same weights, different residual scaling.
    pub fn with_tau(&self, tau: f64) -> Self {
        let mut p = self.clone();
        p.config.tau = tau;
        p
    }

    pub fn with_arch(&self, arch: Arch) -> Self {
        let mut p = self.clone();
        p.config.arch = arch;
        p
    }

    /// Checks that every matrix matches the config and is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let check = |ctx: &'static str, m: &Mat<T>, r: usize, k: usize| -> Result<()> {
            if m.shape() != (r, k) {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: r * k,
                    got: m.rows() * m.cols(),
                });
            }
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!("{ctx} has non-finite entries")));
            }
            Ok(())
        };
        check("A", &self.a, c.width, c.input_dim)?;
        check("B", &self.b, c.output_dim, c.width)?;
        if self.w.len() != c.depth {
            return Err(Error::DimensionMismatch {
                context: "W count",
                expected: c.depth,
                got: self.w.len(),
            });
        }
        for w in &self.w {
            check("W_l", w, c.width, c.width)?;
        }
        Ok(())
    }

    /// Forward pass for whichever architecture the config names.
    pub fn trace(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        match self.config.arch {
            Arch::ResNet => forward(self, x),
            Arch::FeedForward => forward_feedforward(self, x),
        }
    }
}

/// Stream labels: `A` → 0, `W_l` → `l`, `B` → `L + 1`.
pub fn init_network<T: Real>(config: &NetworkConfig, seed: &SeedSpec) -> Result<NetworkParams<T>> {
    config.validate()?;
    let (l, m, p, d) = (config.depth, config.width, config.input_dim, config.output_dim);
    let var_m = 2.0 / m as f64;
    let a = gaussian_matrix(m, p, var_m, &seed.child(0))?;
    let w = (1..=l)
        .map(|k| gaussian_matrix(m, m, var_m, &seed.child(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let b = gaussian_matrix(d, m, 2.0 / d as f64, &seed.child(l as u64 + 1))?;
    Ok(NetworkParams {
        config: config.clone(),
        a,
        w,
        b,
    })
}

/// Per-layer state of one forward pass; index `l` runs over `0..=L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace<T> {
    pub h: Vec<Vec<T>>,
    pub g: Vec<Vec<T>>,
    pub masks: Vec<SignMask>,
    pub y: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn depth(&self) -> usize {
        self.h.len() - 1
    }

    pub fn layer_norms(&self) -> Vec<T> {
        self.h.iter().map(|h| tensor::norm(h)).collect()
    }

    /// `D_l ∘ g_l`, which must equal the stored `h_l` bit for bit.
    pub fn reconstruct(&self, l: usize) -> Vec<T> {
        let mut h = self.g[l].clone();
        self.masks[l].apply(&mut h);
        h
    }
}

fn push_layer<T: Real>(trace: &mut ForwardTrace<T>, g: Vec<T>) {
    let mask = SignMask::of_preactivation(&g);
    let mut h = g.clone();
    mask.apply(&mut h);
    trace.g.push(g);
    trace.h.push(h);
    trace.masks.push(mask);
}

fn begin_trace<T: Real>(params: &NetworkParams<T>, x: &[T]) -> Result<ForwardTrace<T>> {
    if x.len() != params.config.input_dim {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: params.config.input_dim,
            got: x.len(),
        });
    }
    let l = params.depth();
    let mut trace = ForwardTrace {
        h: Vec::with_capacity(l + 1),
        g: Vec::with_capacity(l + 1),
        masks: Vec::with_capacity(l + 1),
        y: Vec::new(),
    };
    push_layer(&mut trace, params.a.matvec(x));
    Ok(trace)
}

/// Residual forward pass. Uses the ResNet recursion regardless of
/// `config.arch`; see [`NetworkParams::trace`] for dispatch.
pub fn forward<T: Real>(params: &NetworkParams<T>, x: &[T]) -> Result<ForwardTrace<T>> {
    let mut trace = begin_trace(params, x)?;
    let l = params.depth();
    let tau = params.tau();
    let m = params.config.width;
    let mut wh = vec![T::zero(); m];
    for k in 1..l {
        let prev = &trace.h[k - 1];
        params.weight(k).matvec_into(prev, &mut wh);
        let g: Vec<T> = prev.iter().zip(&wh).map(|(&h, &t)| h + tau * t).collect();
        push_layer(&mut trace, g);
    }
    let g = params.weight(l).matvec(&trace.h[l - 1]);
    push_layer(&mut trace, g);
    trace.y = params.b.matvec(&trace.h[l]);
    Ok(trace)
}

/// Feedforward baseline: `g_l = W_l h_{l-1}` for every `l >= 1`.
pub fn forward_feedforward<T: Real>(params: &NetworkParams<T>, x: &[T]) -> Result<ForwardTrace<T>> {
    let mut trace = begin_trace(params, x)?;
    let l = params.depth();
    for k in 1..=l {
        let g = params.weight(k).matvec(&trace.h[k - 1]);
        push_layer(&mut trace, g);
    }
    trace.y = params.b.matvec(&trace.h[l]);
    Ok(trace)
}

/// Copies of `D_l` for `l` in `layers` (a sub-range of `0..L+1`).
pub fn extract_masks<T: Real>(trace: &ForwardTrace<T>, layers: Range<usize>) -> Result<Vec<SignMask>> {
    let depth = trace.depth();
    if layers.start > layers.end || layers.end > depth + 1 {
        return Err(Error::LayerOutOfRange {
            start: layers.start,
            end: layers.end,
            depth,
        });
    }
    Ok(trace.masks[layers].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tau: f64) -> NetworkParams<f64> {
        init_network(&NetworkConfig::resnet(4, 8, 4, 3, tau), &SeedSpec::new(3)).unwrap()
    }

    fn unit_input(p: usize) -> Vec<f64> {
        tensor::random_unit_vector(p, &SeedSpec::new(99))
    }

    #[test]
    fn init_shapes() {
        let p = small(0.25);
        assert_eq!(p.a.shape(), (8, 4));
        assert_eq!(p.w.len(), 4);
        assert!(p.w.iter().all(|w| w.shape() == (8, 8)));
        assert_eq!(p.b.shape(), (3, 8));
        p.validate().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(0.25), small(0.25));
    }

    #[test]
    fn init_rejects_bad_configs() {
        let s = SeedSpec::new(0);
        assert!(init_network::<f64>(&NetworkConfig::resnet(1, 4, 2, 1, 0.1), &s).is_err());
        assert!(init_network::<f64>(&NetworkConfig::resnet(3, 0, 2, 1, 0.1), &s).is_err());
        assert!(init_network::<f64>(&NetworkConfig::resnet(3, 4, 2, 1, -0.1), &s).is_err());
    }

    #[test]
    fn b_entries_have_variance_two_over_d() {
        let cfg = NetworkConfig::resnet(2, 512, 3, 10, 0.1);
        let p: NetworkParams<f64> = init_network(&cfg, &SeedSpec::new(17)).unwrap();
        let n = p.b.as_slice().len() as f64;
        let var = p.b.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var / 0.2 - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn tau_zero_collapses_residual_layers() {
        let p = small(0.0);
        let t = forward(&p, &unit_input(4)).unwrap();
        for l in 1..p.depth() {
            assert_eq!(t.h[l], t.h[0]);
        }
    }

    #[test]
    fn zero_input_gives_zero_trace() {
        let p = small(0.3);
        for t in [forward(&p, &[0.0; 4]).unwrap(), forward_feedforward(&p, &[0.0; 4]).unwrap()] {
            assert!(t.h.iter().flatten().all(|&x| x == 0.0));
            assert!(t.y.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn trace_invariants() {
        let p = small(0.5);
        let t = forward(&p, &unit_input(4)).unwrap();
        assert_eq!(t.h.len(), 5);
        for l in 0..=4 {
            assert_eq!(t.reconstruct(l), t.h[l]);
            assert!(t.h[l].iter().all(|&x| x >= 0.0));
            assert!(tensor::norm(&t.h[l]) <= tensor::norm(&t.g[l]));
            for k in 0..8 {
                assert_eq!(t.masks[l].get(k), t.g[l][k] >= 0.0);
            }
        }
        assert_eq!(t.y, p.b.matvec(&t.h[4]));
    }

    #[test]
    fn mask_at_exact_zero_is_on() {
        let m = SignMask::of_preactivation(&[0.0f64, -0.0, -1e-300, 2.0]);
        assert_eq!(m.bits(), &[true, true, false, true]);
    }

    #[test]
    fn hand_evaluated_three_layer_net() {
        // p = m = 2, L = 3, τ = 1/2, integer weights, evaluated by hand:
        // g0 = A x = (1, -2)                 h0 = (1, 0)
        // W1 h0 = (2, -4)  g1 = (1,0)+(1,-2) = (2, -2)  h1 = (2, 0)
        // W2 h1 = (-2, 6)  g2 = (2,0)+(-1,3) = (1, 3)   h2 = (1, 3)
        // W3 h2 = (1-6, 1+3) = (-5, 4)                  h3 = (0, 4)
        // y = B h3 = 2*0 + (-1)*4 = -4
        let cfg = NetworkConfig::resnet(3, 2, 2, 1, 0.5);
        let params = NetworkParams {
            config: cfg,
            a: Mat::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]),
            w: vec![
                Mat::from_rows(&[&[2.0, 1.0], &[-4.0, 0.0]]),
                Mat::from_rows(&[&[-1.0, 5.0], &[3.0, 2.0]]),
                Mat::from_rows(&[&[1.0, -2.0], &[1.0, 1.0]]),
            ],
            b: Mat::from_rows(&[&[2.0, -1.0]]),
        };
        let t = forward(&params, &[1.0, 2.0]).unwrap();
        assert_eq!(t.g[0], vec![1.0, -2.0]);
        assert_eq!(t.h[0], vec![1.0, 0.0]);
        assert_eq!(t.g[1], vec![2.0, -2.0]);
        assert_eq!(t.h[1], vec![2.0, 0.0]);
        assert_eq!(t.g[2], vec![1.0, 3.0]);
        assert_eq!(t.h[2], vec![1.0, 3.0]);
        assert_eq!(t.g[3], vec![-5.0, 4.0]);
        assert_eq!(t.h[3], vec![0.0, 4.0]);
        assert_eq!(t.y, vec![-4.0]);
    }

    #[test]
    fn hand_evaluated_feedforward() {
        // L = 2; W2 is the identity so the second layer only re-applies φ.
        // g0 = (3, -1) h0 = (3, 0); g1 = W1 h0 = (3, -6) h1 = (3, 0); h2 = (3, 0); y = 3
        let params = NetworkParams {
            config: NetworkConfig::feedforward(2, 2, 2, 1),
            a: Mat::from_rows(&[&[1.0, 1.0], &[1.0, -1.0]]),
            w: vec![
                Mat::from_rows(&[&[1.0, 7.0], &[-2.0, 5.0]]),
                Mat::identity(2),
            ],
            b: Mat::from_rows(&[&[1.0, 1.0]]),
        };
        let t = forward_feedforward(&params, &[1.0, 2.0]).unwrap();
        assert_eq!(t.h[0], vec![3.0, 0.0]);
        assert_eq!(t.h[1], vec![3.0, 0.0]);
        assert_eq!(t.h[2], vec![3.0, 0.0]);
        assert_eq!(t.y, vec![3.0]);
        assert_eq!(params.trace(&[1.0, 2.0]).unwrap(), t);
    }

    #[test]
    fn resnet_and_feedforward_differ_on_same_params() {
        let p = small(0.0);
        let x = unit_input(4);
        let res = forward(&p, &x).unwrap();
        let ff = forward_feedforward(&p, &x).unwrap();
        let w1h0 = p.weight(1).matvec(&res.h[0]);
        assert_ne!(w1h0, res.h[0]);
        assert_eq!(res.h[1], res.h[0]);
        assert_ne!(ff.h[1], res.h[1]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = small(0.1);
        assert!(matches!(
            forward(&p, &[1.0; 3]),
            Err(Error::DimensionMismatch { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn extract_masks_ranges() {
        let p = small(0.0);
        let t = forward(&p, &unit_input(4)).unwrap();
        assert_eq!(extract_masks(&t, 0..5).unwrap().len(), 5);
        assert!(extract_masks(&t, 2..2).unwrap().is_empty());
        assert!(extract_masks(&t, 0..6).is_err());
        // τ = 0: D_1 = 1{h0 >= 0} which is all ones since h0 >= 0
        let d1 = &extract_masks(&t, 1..2).unwrap()[0];
        let recomputed: Vec<bool> = t.h[0].iter().map(|&x| x >= 0.0).collect();
        assert_eq!(d1.bits(), recomputed.as_slice());
        assert_eq!(d1.count_ones(), 8);
    }
}
