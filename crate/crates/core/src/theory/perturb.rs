use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSpec;
use crate::spectral::spectral_norm_seeded;
use crate::tensor::{gaussian_matrix, Mat};
use crate::Network;

/// Relative slack allowed when comparing an estimated spectral norm with its
/// target radius. Power iteration converges from below, so a saturated
/// direction can sit a hair above the radius.
pub const NORM_SLACK: f64 = 1e-6;

const PERT_TOL: f64 = 1e-9;
const PERT_MAX_ITER: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Directions {
    /// Gaussian directions drawn per layer from `seed.child(l)`.
    Seeded(SeedSpec),
    /// `W′_1..W′_L`, used as given.
    Explicit(Vec<Mat<f64>>),
}

/// Weight perturbation `W′` of radius `ω`: the top layer is bounded by `ω`
/// in spectral norm, residual layers by `τω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub omega: f64,
    pub directions: Directions,
}

/// A materialized perturbation together with the spectral norms it was
/// built or verified at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub omega: f64,
    pub tau: f64,
    /// `W′_l` at index `l − 1`.
    pub weights: Vec<Mat<f64>>,
    /// Estimated `‖W′_l‖₂`, same indexing.
    pub norms: Vec<f64>,
}

fn radius(omega: f64, tau: f64, l: usize, depth: usize) -> f64 {
    if l == depth {
        omega
    } else {
        tau * omega
    }
}

impl PerturbationSpec {
    pub fn seeded(omega: f64, seed: &SeedSpec) -> Self {
        Self {
            omega,
            directions: Directions::Seeded(seed.clone()),
        }
    }

    pub fn explicit(omega: f64, weights: Vec<Mat<f64>>) -> Self {
        Self {
            omega,
            directions: Directions::Explicit(weights),
        }
    }

    /// Same directions, radius multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let directions = match &self.directions {
            Directions::Seeded(s) => Directions::Seeded(s.clone()),
            Directions::Explicit(ws) => Directions::Explicit(ws.iter().map(|w| w.scaled(factor)).collect()),
        };
        Self {
            omega: self.omega * factor,
            directions,
        }
    }

    /// Draw or check the per-layer matrices for `params`.
    ///
    /// Seeded directions are rescaled so their estimated spectral norm is
    /// exactly the layer radius. Explicit matrices are only checked.
    pub fn build(&self, params: &Network) -> Result<Perturbation> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Perturbation(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        let depth = params.depth();
        let m = params.config.width;
        let tau = params.config.tau;
        match &self.directions {
            Directions::Seeded(seed) => {
                let mut weights = Vec::with_capacity(depth);
                let mut norms = Vec::with_capacity(depth);
                for l in 1..=depth {
                    let r = radius(self.omega, tau, l, depth);
                    if r == 0.0 {
                        weights.push(Mat::zeros(m, m));
                        norms.push(0.0);
                        continue;
                    }
                    let g: Mat<f64> = gaussian_matrix(m, m, 1.0 / m as f64, &seed.child(l as u64))?;
                    let est = spectral_norm_seeded(&g, PERT_TOL, PERT_MAX_ITER, &seed.child(l as u64));
                    weights.push(g.scaled(r / est.value));
                    norms.push(r);
                }
                Ok(Perturbation {
                    omega: self.omega,
                    tau,
                    weights,
                    norms,
                })
            }
            Directions::Explicit(ws) => {
                if ws.len() != depth {
                    return Err(Error::Perturbation(format!("{} matrices for depth {depth}", ws.len())));
                }
                let p = Perturbation {
                    omega: self.omega,
                    tau,
                    weights: ws.clone(),
                    norms: vec![0.0; depth],
                };
                let norms = p.measured_norms(&SeedSpec::new(0))?;
                Ok(Perturbation { norms, ..p })
            }
        }
    }
}

impl Perturbation {
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// `‖W′_L‖₂`
    pub fn top_norm(&self) -> f64 {
        self.norms[self.depth() - 1]
    }

    /// `Σ_{l<L} ‖W′_l‖₂`
    pub fn residual_norm_sum(&self) -> f64 {
        self.norms[..self.depth() - 1].iter().sum()
    }

    /// Every matrix multiplied by `factor`; radius and norms follow.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            omega: self.omega * factor,
            tau: self.tau,
            weights: self.weights.iter().map(|w| w.scaled(factor)).collect(),
            norms: self.norms.iter().map(|n| n * factor.abs()).collect(),
        }
    }

    /// Re-estimate every spectral norm and check it against its radius.
    pub fn measured_norms(&self, seed: &SeedSpec) -> Result<Vec<f64>> {
        let depth = self.depth();
        let mut out = Vec::with_capacity(depth);
        for (i, w) in self.weights.iter().enumerate() {
            let l = i + 1;
            if w.rows() != w.cols() {
                return Err(Error::Perturbation(format!("W′_{l} is not square")));
            }
            let est = spectral_norm_seeded(w, PERT_TOL, PERT_MAX_ITER, &seed.child(l as u64));
            let r = radius(self.omega, self.tau, l, depth);
            if est.value > r * (1.0 + NORM_SLACK) {
                return Err(Error::Perturbation(format!(
                    "‖W′_{l}‖₂ = {} exceeds radius {r}",
                    est.value
                )));
            }
            out.push(est.value);
        }
        Ok(out)
    }

    /// Checks shapes against `params` and the cached norms against the radii.
    pub fn check_against(&self, params: &Network) -> Result<()> {
        let depth = params.depth();
        let m = params.config.width;
        if self.depth() != depth || self.norms.len() != depth {
            return Err(Error::Perturbation(format!("{} layers for depth {depth}", self.depth())));
        }
        if (self.tau - params.config.tau).abs() > 0.0 {
            return Err(Error::Perturbation(format!(
                "built for tau {} but network has {}",
                self.tau, params.config.tau
            )));
        }
        for (i, (w, &n)) in self.weights.iter().zip(&self.norms).enumerate() {
            let l = i + 1;
            if w.shape() != (m, m) {
                return Err(Error::Perturbation(format!("W′_{l} has shape {:?}", w.shape())));
            }
            let r = radius(self.omega, self.tau, l, depth);
            if n > r * (1.0 + NORM_SLACK) {
                return Err(Error::Perturbation(format!("‖W′_{l}‖₂ = {n} exceeds radius {r}")));
            }
        }
        Ok(())
    }

    /// `W + W′`
    pub fn apply_to(&self, params: &Network) -> Result<Network> {
        self.check_against(params)?;
        let mut out = params.clone();
        for (w, d) in out.w.iter_mut().zip(&self.weights) {
            w.add_scaled(1.0, d);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_network;
    use crate::NetworkConfig;

    fn net(tau: f64) -> Network {
        init_network(&NetworkConfig::resnet(4, 16, 3, 2, tau), &SeedSpec::new(3)).unwrap()
    }

    #[test]
    fn seeded_directions_saturate_radii() {
        let p = net(0.5);
        let pert = PerturbationSpec::seeded(0.1, &SeedSpec::new(9)).build(&p).unwrap();
        let norms = pert.measured_norms(&SeedSpec::new(77)).unwrap();
        for (l, n) in norms.iter().enumerate() {
            let r = if l == 3 { 0.1 } else { 0.05 };
            assert!((n - r).abs() <= r * 1e-6, "layer {} norm {n}", l + 1);
        }
        assert_eq!(pert.top_norm(), 0.1);
        assert!((pert.residual_norm_sum() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn zero_radius_gives_zero_matrices() {
        let p = net(0.5);
        let pert = PerturbationSpec::seeded(0.0, &SeedSpec::new(9)).build(&p).unwrap();
        assert!(pert.weights.iter().all(|w| w.as_slice().iter().all(|&x| x == 0.0)));
        assert_eq!(pert.apply_to(&p).unwrap(), p);
    }

    #[test]
    fn explicit_directions_are_checked() {
        let p = net(0.5);
        let mut ws = vec![Mat::zeros(16, 16); 4];
        ws[3] = Mat::identity(16).scaled(0.2);
        assert!(PerturbationSpec::explicit(0.1, ws.clone()).build(&p).is_err());
        ws[3] = Mat::identity(16).scaled(0.1);
        ws[0] = Mat::identity(16).scaled(0.05);
        let pert = PerturbationSpec::explicit(0.1, ws).build(&p).unwrap();
        assert!((pert.norms[0] - 0.05).abs() < 1e-12);
        assert!(PerturbationSpec::explicit(0.1, vec![Mat::zeros(16, 16)]).build(&p).is_err());
    }

    #[test]
    fn rejects_mismatched_network() {
        let pert = PerturbationSpec::seeded(0.1, &SeedSpec::new(1)).build(&net(0.5)).unwrap();
        assert!(pert.apply_to(&net(0.25)).is_err());
        assert!(PerturbationSpec::seeded(-1.0, &SeedSpec::new(1)).build(&net(0.5)).is_err());
    }

    #[test]
    fn scaling_keeps_directions() {
        let p = net(0.5);
        let spec = PerturbationSpec::seeded(0.1, &SeedSpec::new(2));
        let full = spec.build(&p).unwrap();
        let half = spec.scaled(0.5).build(&p).unwrap();
        for (a, b) in full.weights.iter().zip(&half.weights) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((0.5 * x - y).abs() <= 1e-15 * x.abs().max(1e-300) + 1e-18);
            }
        }
        assert_eq!(full.scaled(0.5).omega, 0.05);
    }
}
