//! Denoising and sample-quality measures: PSNR curves, paired PSNR
//! differences, off-support spectral energy and moment distances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{spectral_residual, ModeSet, ResidualFloor};
use crate::error::{Error, Result};
use crate::fields::Denoiser;
use crate::nn::Tensor;

/// Peak-to-peak range of `[-1, 1]` data.
pub const PSNR_PEAK: f64 = 2.0;
/// Reported when the error is exactly zero.
pub const PSNR_CAP: f64 = 99.0;
/// Default evaluation times.
pub const DEFAULT_PSNR_TIMES: [f64; 5] = [0.1, 0.3, 0.6, 0.9, 0.95];

/// Rows denoised per call during evaluation.
const EVAL_CHUNK: usize = 200;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    }
}

/// PSNR of `D(x_t, t)` against `x_1` over the first `n` rows of `eval_set`,
/// with fresh noise `x_0 ~ N(0, I)` from `rng`.
pub fn psnr_at_t<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    eval_set: &Tensor,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 || eval_set.numel() == 0 {
        return Err(Error::Usage("PSNR needs at least one evaluation image".into()));
    }
    if eval_set.rows() < n {
        return Err(Error::Usage(format!(
            "evaluation set has {} images, {n} requested",
            eval_set.rows()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("PSNR time {t} outside [0, 1]")));
    }
    let d = eval_set.row_len();
    let x1 = eval_set.gather_rows(&(0..n).collect::<Vec<_>>());
    let x0 = Tensor::randn(&[n, d], rng);
    let xt = x0.zip_map(&x1, |a, b| (1.0 - t) * a + t * b)?;
    let mut sq = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let den = denoiser.denoise(&xt.gather_rows(&idx), t)?;
        sq += den.sub(&x1.gather_rows(&idx))?.sum_sq();
    }
    let mse = sq / (n * d) as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite { op: "psnr_at_t" });
    }
    Ok(psnr_from_mse(mse))
}

/// Noise stream for grid point `index`; shared by every model evaluated
/// with the same seed.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrCurve {
    pub times: Vec<f64>,
    pub psnr: Vec<f64>,
    pub n_eval: usize,
    pub seed: u64,
}

impl PsnrCurve {
    /// Pointwise `self - other`; both must share grid, size and seed.
    pub fn difference(&self, other: &PsnrCurve) -> Result<PsnrCurve> {
        if self.times != other.times || self.n_eval != other.n_eval || self.seed != other.seed {
            return Err(Error::Usage(
                "PSNR curves differ in time grid, evaluation size or seed".into(),
            ));
        }
        Ok(PsnrCurve {
            times: self.times.clone(),
            psnr: self.psnr.iter().zip(&other.psnr).map(|(a, b)| a - b).collect(),
            n_eval: self.n_eval,
            seed: self.seed,
        })
    }

    pub fn mean(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        self.times.iter().position(|&s| s == t).map(|i| self.psnr[i])
    }
}

pub fn psnr_curve<D: Denoiser + ?Sized>(
    denoiser: &D,
    eval_set: &Tensor,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Result<PsnrCurve> {
    if times.is_empty() {
        return Err(Error::Usage("empty PSNR time grid".into()));
    }
    let psnr = times
        .par_iter()
        .enumerate()
        .map(|(i, &t)| psnr_at_t(denoiser, eval_set, t, n, &mut eval_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PsnrCurve {
        times: times.to_vec(),
        psnr,
        n_eval: n,
        seed,
    })
}

/// `PSNR(den) - PSNR(vel)` on common noise; positive favours `den`.
pub fn delta_psnr_curve<A: Denoiser + ?Sized, B: Denoiser + ?Sized>(
    model_den: &A,
    model_vel: &B,
    eval_set: &Tensor,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Result<PsnrCurve> {
    let a = psnr_curve(model_den, eval_set, times, n, seed)?;
    let b = psnr_curve(model_vel, eval_set, times, n, seed)?;
    a.difference(&b)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn residuals(batch: &Tensor, modes: &ModeSet) -> Result<Vec<f64>> {
    if batch.numel() == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    (0..batch.rows())
        .into_par_iter()
        .map(|i| spectral_residual(batch.row(i), modes))
        .collect()
}

/// Off-support energy of clean training images.
pub fn residual_floor(train: &Tensor, modes: &ModeSet) -> Result<ResidualFloor> {
    let mut r = residuals(train, modes)?;
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    Ok(ResidualFloor {
        mean,
        median: median(&mut r),
        samples: r.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub median: f64,
    /// `mean / floor.mean`
    pub baseline_ratio: f64,
}

pub fn residual_energy_stats(batch: &Tensor, modes: &ModeSet, floor: &ResidualFloor) -> Result<ResidualStats> {
    let mut r = residuals(batch, modes)?;
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    Ok(ResidualStats {
        mean,
        median: median(&mut r),
        baseline_ratio: mean / floor.mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentDistance {
    pub mean_err: f64,
    /// `|S_g - S_r|_F / |S_r|_F`
    pub cov_err: f64,
    pub energy_distance: f64,
}

/// `a^T b` for row-major `a: [n, p]`, `b: [n, q]`.
fn gemm_tn(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * q];
    // SAFETY: the slices hold n*p, n*q and p*q values with the strides given.
    unsafe {
        matrixmultiply::dgemm(
            p, n, q, 1.0,
            a.as_ptr(), 1, p as isize,
            b.as_ptr(), q as isize, 1,
            0.0,
            c.as_mut_ptr(), q as isize, 1,
        );
    }
    c
}

fn mean_and_cov(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.row_len());
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = x
        .data()
        .chunks(d)
        .flat_map(|r| r.iter().zip(&mu).map(|(v, m)| v - m))
        .collect();
    let mut cov = gemm_tn(&centred, &centred, n, d, d);
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (mu, cov)
}

/// Mean of `|a_i - b_j|` over all pairs, via the Gram matrix.
fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (n, m, d) = (a.rows(), b.rows(), a.row_len());
    let at: Vec<f64> = transpose(a.data(), n, d);
    let g = gemm_tn(&at, &transpose(b.data(), m, d), d, n, m);
    let na: Vec<f64> = (0..n).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = (0..m).map(|j| b.row(j).iter().map(|v| v * v).sum()).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += (na[i] + nb[j] - 2.0 * g[i * m + j]).max(0.0).sqrt();
        }
    }
    total / (n * m) as f64
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Mean error, relative covariance error and the (V-statistic) energy
/// distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between two `[n, d]` batches.
pub fn moment_distance(generated: &Tensor, reference: &Tensor) -> Result<MomentDistance> {
    if generated.shape().len() != 2 || reference.shape().len() != 2 {
        return Err(Error::shape("moment_distance", "batches must be [n, d]"));
    }
    if generated.row_len() != reference.row_len() {
        return Err(Error::shape(
            "moment_distance",
            format!("dimension {} vs {}", generated.row_len(), reference.row_len()),
        ));
    }
    if generated.rows() < 2 || reference.rows() < 2 {
        return Err(Error::Usage("moment distance needs at least 2 samples per batch".into()));
    }
    let (mg, cg) = mean_and_cov(generated);
    let (mr, cr) = mean_and_cov(reference);
    let mean_err = mg.iter().zip(&mr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let diff = cg.iter().zip(&cr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm = cr.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cov_err = if norm > 0.0 { diff / norm } else { diff };
    let e = 2.0 * mean_pair_distance(generated, reference)
        - mean_pair_distance(generated, generated)
        - mean_pair_distance(reference, reference);
    Ok(MomentDistance {
        mean_err,
        cov_err,
        energy_distance: e.max(0.0),
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage("spearman needs two equal series of length >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va * vb).sqrt()))
}
