//! Closed-form linear-Gaussian posterior quantities and the brute-force
//! posterior mean of a finite dataset.
//!
//! For `x_1 ~ N(0, tau^2 I)` and `x_0 ~ N(0, I)` the rescaled observation
//! `y = x_t / t = x_1 + ((1 - t) / t) x_0` has a Gaussian posterior whose mean
//! is a scalar multiple of `y`. All formulas below are written in forms that
//! stay finite at `t = 0` and `t = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Denoiser, VelocityField};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDataSpec {
    pub tau: f64,
    pub dim: usize,
}

impl GaussianDataSpec {
    pub fn new(tau: f64, dim: usize) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("Gaussian data std must be positive, got {tau}")));
        }
        if dim == 0 {
            return Err(Error::Config("Gaussian data dimension must be >= 1".into()));
        }
        Ok(Self { tau, dim })
    }
}

/// `y = x_t / t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RescaledObservation {
    pub y: Tensor,
    pub t: f64,
}

impl RescaledObservation {
    pub fn from_interpolant(xt: &Tensor, t: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Usage(format!("rescaling needs t in (0, 1], got {t}")));
        }
        Ok(Self {
            y: xt.scale(1.0 / t),
            t,
        })
    }
}

/// Posterior mean of `x_1` is `coeff * y`: `tau^2 / (tau^2 + ((1-t)/t)^2)`.
pub fn posterior_mean_coeff(t: f64, tau: f64) -> f64 {
    let a = tau * tau * t * t;
    a / (a + (1.0 - t) * (1.0 - t))
}

/// Per-coordinate posterior variance `(1/tau^2 + t^2/(1-t)^2)^-1`.
pub fn posterior_variance(t: f64, tau: f64) -> f64 {
    let s = (1.0 - t) * (1.0 - t);
    tau * tau * s / (s + tau * tau * t * t)
}

/// Inverse posterior variance `1/tau^2 + t^2/(1-t)^2`.
pub fn optimal_weight(t: f64, tau: f64) -> f64 {
    let snr = t / (1.0 - t);
    1.0 / (tau * tau) + snr * snr
}

/// `D*(x, t) = tau^2 t x / (tau^2 t^2 + (1-t)^2)`.
pub fn ideal_denoiser_gaussian(x: &Tensor, t: f64, tau: f64) -> Tensor {
    let c = tau * tau * t / (tau * tau * t * t + (1.0 - t) * (1.0 - t));
    x.scale(c)
}

/// `v*(x, t) = (tau^2 t - (1-t)) x / (tau^2 t^2 + (1-t)^2)`, i.e.
/// `(D* - x) / (1 - t)` with the `(1 - t)` factor cancelled.
pub fn ideal_velocity_gaussian(x: &Tensor, t: f64, tau: f64) -> Tensor {
    let c = (tau * tau * t - (1.0 - t)) / (tau * tau * t * t + (1.0 - t) * (1.0 - t));
    x.scale(c)
}

/// Exact probability-flow map from noise `x0` at time 0 to time `t` for
/// `N(0, tau^2 I)` data: `x0 sqrt((1-t)^2 + t^2 tau^2)`.
pub fn gaussian_flow_map(x0: &Tensor, t: f64, tau: f64) -> Tensor {
    x0.scale(((1.0 - t) * (1.0 - t) + t * t * tau * tau).sqrt())
}

/// Posterior mean of a uniform distribution over `dataset` rows, given
/// `x = (1 - t) x_0 + t x_1`: a softmax over `-|x - t x_1^i|^2 / (2 (1-t)^2)`.
pub fn empirical_posterior_denoiser(x: &Tensor, t: f64, dataset: &Tensor) -> Result<Tensor> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Usage(format!("empirical posterior needs t in [0, 1), got {t}")));
    }
    let d = dataset.row_len();
    if x.numel() % d != 0 {
        return Err(Error::shape(
            "empirical_posterior_denoiser",
            format!("input {:?} vs data rows of {d}", x.shape()),
        ));
    }
    let n = dataset.rows();
    let inv = 1.0 / (2.0 * (1.0 - t) * (1.0 - t));
    let mut out = vec![0.0; x.numel()];
    let mut logits = vec![0.0; n];
    for (xr, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        for (i, l) in logits.iter_mut().enumerate() {
            let dist: f64 = xr
                .iter()
                .zip(dataset.row(i))
                .map(|(a, b)| {
                    let r = a - t * b;
                    r * r
                })
                .sum();
            *l = -dist * inv;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for (i, &w) in logits.iter().enumerate() {
            let w = w / z;
            if w == 0.0 {
                continue;
            }
            for (oj, bj) in o.iter_mut().zip(dataset.row(i)) {
                *oj += w * bj;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Exact denoiser and velocity for `N(0, tau^2 I)` data.
#[derive(Clone, Copy, Debug)]
pub struct GaussianOracle {
    pub tau: f64,
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(ideal_denoiser_gaussian(x, t, self.tau))
    }
}

impl VelocityField for GaussianOracle {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(ideal_velocity_gaussian(x, t, self.tau))
    }
}

/// Posterior-mean denoiser of a finite training set.
pub struct EmpiricalPosterior<'a> {
    pub data: &'a Tensor,
}

impl Denoiser for EmpiricalPosterior<'_> {
    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        empirical_posterior_denoiser(x, t, self.data)
    }
}
