use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::oracle::GaussianDataSpec;

/// `n` draws from `N(0, tau^2 I_d)` as `[n, d]`.
pub fn sample_gaussian_data<R: Rng + ?Sized>(spec: &GaussianDataSpec, n: usize, rng: &mut R) -> Result<Tensor> {
    let spec = GaussianDataSpec::new(spec.tau, spec.dim)?;
    if n == 0 {
        return Err(Error::Usage("requested zero samples".into()));
    }
    Ok(Tensor::randn(&[n, spec.dim], rng).scale(spec.tau))
}

/// Isotropic Gaussian mixture in the plane, `[n, 2]`.
pub fn sample_mixture2d<R: Rng + ?Sized>(
    centers: &[[f64; 2]],
    weights: &[f64],
    std: f64,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if centers.is_empty() || centers.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} centers with {} weights",
            centers.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("mixture weights must be >= 0 and sum to 1, got {weights:?}")));
    }
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::Config(format!("mixture std must be >= 0, got {std}")));
    }
    if n == 0 {
        return Err(Error::Usage("requested zero samples".into()));
    }
    let pick = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[pick.sample(rng)];
        for &ci in &c {
            let z: f64 = rng.sample(StandardNormal);
            data.push(ci + std * z);
        }
    }
    Tensor::new(vec![n, 2], data)
}
