//! Synthetic images on a Fourier manifold of controlled dimension.
//!
//! An image is built from a sparse spectrum with `m` active representative
//! frequencies. Each representative is paired with its conjugate partner
//! `((N-k) mod N, (N-l) mod N)` so the inverse transform is real. Only the
//! coefficients vary between samples, so before the final `tanh(alpha x)`
//! the samples span a real linear subspace whose dimension is the number of
//! real degrees of freedom of the selected modes.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::fft::{fft2_real, ifft2};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeSelection {
    Lowfreq,
    SeededRandom { seed: u64 },
}

/// Law of each real degree of freedom of a coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoeffLaw {
    /// `N(0, scale^2)`
    Gaussian { scale: f64 },
    /// `U[-scale, scale]`
    Uniform { scale: f64 },
}

impl CoeffLaw {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CoeffLaw::Gaussian { scale } => scale * rng.sample::<f64, _>(StandardNormal),
            CoeffLaw::Uniform { scale } => scale * rng.gen_range(-1.0..=1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierManifoldSpec {
    /// Image side; images are `n x n`.
    pub n: usize,
    /// Number of active representative modes.
    pub m: usize,
    pub selection: ModeSelection,
    pub exclude_dc: bool,
    pub coeff_law: CoeffLaw,
    /// Sharpness of the final `tanh(alpha x)`.
    pub alpha: f64,
    pub dataset_seed: u64,
}

impl FourierManifoldSpec {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            selection: ModeSelection::Lowfreq,
            exclude_dc: true,
            coeff_law: CoeffLaw::Gaussian { scale: 1.0 },
            alpha: 2.0,
            dataset_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("grid size {} too small", self.n)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("tanh sharpness must be positive, got {}", self.alpha)));
        }
        let scale = match self.coeff_law {
            CoeffLaw::Gaussian { scale } | CoeffLaw::Uniform { scale } => scale,
        };
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Config(format!("coefficient scale must be >= 0, got {scale}")));
        }
        let avail = admissible_representatives(self.n, self.exclude_dc).len();
        if self.m == 0 || self.m > avail {
            return Err(Error::Config(format!(
                "m = {} outside 1..={avail} for a {}x{} grid",
                self.m, self.n, self.n
            )));
        }
        Ok(())
    }
}

pub fn conjugate(n: usize, k: usize, l: usize) -> (usize, usize) {
    ((n - k) % n, (n - l) % n)
}

/// `min(k, N-k)^2 + min(l, N-l)^2`.
pub fn periodic_radius(n: usize, k: usize, l: usize) -> usize {
    let a = k.min(n - k);
    let b = l.min(n - l);
    a * a + b * b
}

/// One index per conjugate pair (the lexicographically smaller one), sorted
/// by periodic radius then lexicographically.
pub fn admissible_representatives(n: usize, exclude_dc: bool) -> Vec<(usize, usize)> {
    let mut reps: Vec<(usize, usize)> = (0..n)
        .flat_map(|k| (0..n).map(move |l| (k, l)))
        .filter(|&(k, l)| (k, l) <= conjugate(n, k, l))
        .filter(|&(k, l)| !(exclude_dc && k == 0 && l == 0))
        .collect();
    reps.sort_by_key(|&(k, l)| (periodic_radius(n, k, l), k, l));
    reps
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSet {
    pub n: usize,
    pub representatives: Vec<(usize, usize)>,
    /// Representatives plus conjugate partners, sorted and deduplicated.
    pub support: Vec<(usize, usize)>,
}

impl ModeSet {
    pub fn from_representatives(n: usize, representatives: Vec<(usize, usize)>) -> Result<Self> {
        let mut support = Vec::with_capacity(2 * representatives.len());
        for &(k, l) in &representatives {
            if k >= n || l >= n {
                return Err(Error::Config(format!("mode ({k}, {l}) outside {n}x{n} grid")));
            }
            support.push((k, l));
            support.push(conjugate(n, k, l));
        }
        support.sort_unstable();
        support.dedup();
        Ok(Self {
            n,
            representatives,
            support,
        })
    }

    pub fn contains(&self, k: usize, l: usize) -> bool {
        self.support.binary_search(&(k, l)).is_ok()
    }

    pub fn is_self_conjugate(&self, k: usize, l: usize) -> bool {
        conjugate(self.n, k, l) == (k, l)
    }

    /// Real dimension of the pre-tanh sample span: 1 per self-conjugate
    /// representative, 2 otherwise.
    pub fn real_dof(&self) -> usize {
        self.representatives
            .iter()
            .map(|&(k, l)| if self.is_self_conjugate(k, l) { 1 } else { 2 })
            .sum()
    }

    fn support_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n * self.n];
        for &(k, l) in &self.support {
            mask[k * self.n + l] = true;
        }
        mask
    }
}

pub fn select_modes(spec: &FourierManifoldSpec) -> Result<ModeSet> {
    spec.validate()?;
    let mut reps = admissible_representatives(spec.n, spec.exclude_dc);
    let chosen = match spec.selection {
        ModeSelection::Lowfreq => reps[..spec.m].to_vec(),
        ModeSelection::SeededRandom { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            reps.shuffle(&mut rng);
            let mut c = reps[..spec.m].to_vec();
            c.sort_by_key(|&(k, l)| (periodic_radius(spec.n, k, l), k, l));
            c
        }
    };
    ModeSet::from_representatives(spec.n, chosen)
}

/// Complex image `ifft2(x_hat)` for one coefficient draw (before taking the
/// real part and before the nonlinearity).
pub fn synthesize_complex<R: Rng + ?Sized>(
    spec: &FourierManifoldSpec,
    modes: &ModeSet,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let n = spec.n;
    if modes.n != n {
        return Err(Error::Config(format!("mode set for N = {} used with N = {n}", modes.n)));
    }
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n * n];
    for &(k, l) in &modes.representatives {
        let a = if modes.is_self_conjugate(k, l) {
            Complex64::new(spec.coeff_law.draw(rng), 0.0)
        } else {
            Complex64::new(spec.coeff_law.draw(rng), spec.coeff_law.draw(rng))
        };
        let (ck, cl) = conjugate(n, k, l);
        spectrum[k * n + l] = a;
        spectrum[ck * n + cl] = a.conj();
    }
    ifft2(&spectrum)
}

/// Real part of the synthesized image, before `tanh`.
pub fn sample_pre_tanh<R: Rng + ?Sized>(
    spec: &FourierManifoldSpec,
    modes: &ModeSet,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(synthesize_complex(spec, modes, rng)?
        .into_iter()
        .map(|z| z.re)
        .collect())
}

/// One `n x n` image with values in `(-1, 1)`.
pub fn sample_fourier_image<R: Rng + ?Sized>(
    spec: &FourierManifoldSpec,
    modes: &ModeSet,
    rng: &mut R,
) -> Result<Tensor> {
    let pre = sample_pre_tanh(spec, modes, rng)?;
    let img = pre.into_iter().map(|v| (spec.alpha * v).tanh()).collect();
    Tensor::new(vec![spec.n, spec.n], img)
}

/// `count` flattened images as a `[count, n*n]` tensor.
pub fn generate_fourier_images<R: Rng + ?Sized>(
    spec: &FourierManifoldSpec,
    modes: &ModeSet,
    count: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let d = spec.n * spec.n;
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        data.extend(sample_fourier_image(spec, modes, rng)?.into_data());
    }
    Tensor::new(vec![count, d], data)
}

/// Energy of the orthonormal spectrum outside the mode support.
pub fn spectral_residual(image: &[f64], modes: &ModeSet) -> Result<f64> {
    if image.len() != modes.n * modes.n {
        return Err(Error::shape(
            "spectral_residual",
            format!("{} pixels for a {}x{} grid", image.len(), modes.n, modes.n),
        ));
    }
    let spec = fft2_real(image)?;
    let mask = modes.support_mask();
    Ok(spec
        .iter()
        .zip(&mask)
        .filter(|(_, &on)| !on)
        .map(|(z, _)| z.norm_sqr())
        .sum())
}
