use fmweights::datasets::{generate_fourier_images, select_modes, FourierManifoldSpec};
use fmweights::fields::{Denoiser, ZeroDenoiser};
use fmweights::metrics::{
    delta_psnr_curve, eval_rng, moment_distance, psnr_at_t, psnr_curve, residual_energy_stats, residual_floor,
    spearman, DEFAULT_PSNR_TIMES,
};
use fmweights::nn::Tensor;
use fmweights::oracle::GaussianOracle;
use fmweights::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gaussian(n: usize, d: usize, scale: f64, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], &mut ChaCha8Rng::seed_from_u64(seed)).scale(scale)
}

struct Scaled(f64, GaussianOracle);

impl Denoiser for Scaled {
    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.1.denoise(x, t)?.scale(self.0))
    }
}

#[test]
fn zero_denoiser_psnr_is_the_signal_power() {
    let data = gaussian(300, 4, 0.7, 1);
    let mean_sq = data.sum_sq() / data.numel() as f64;
    let want = 10.0 * (4.0 / mean_sq).log10();
    for t in [0.1, 0.5, 0.95] {
        let got = psnr_at_t(&ZeroDenoiser, &data, t, 300, &mut eval_rng(3, 0)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn oracle_beats_perturbed_denoisers_on_common_noise() {
    let tau = 1.5;
    let data = gaussian(2000, 3, tau, 2);
    let oracle = GaussianOracle { tau };
    let best = psnr_curve(&oracle, &data, &DEFAULT_PSNR_TIMES, 2000, 7).unwrap();
    for other in [Scaled(0.9, oracle), Scaled(1.1, oracle)] {
        let c = psnr_curve(&other, &data, &DEFAULT_PSNR_TIMES, 2000, 7).unwrap();
        for (a, b) in best.psnr.iter().zip(&c.psnr) {
            assert!(a > b);
        }
    }
}

#[test]
fn covariance_error_of_doubled_scale() {
    // covariance 4I against I: |4I - I|_F / |I|_F = 3
    let m = moment_distance(&gaussian(20_000, 2, 2.0, 3), &gaussian(20_000, 2, 1.0, 4)).unwrap();
    assert!((m.cov_err - 3.0).abs() < 0.15, "{}", m.cov_err);
    assert!(m.mean_err < 0.1);
    assert!(m.energy_distance > 0.1);
    let same = moment_distance(&gaussian(2000, 2, 1.0, 5), &gaussian(2000, 2, 1.0, 6)).unwrap();
    assert!(same.cov_err < 0.1 && same.energy_distance < 0.01);
}

#[test]
fn energy_distance_matches_pairwise_definition() {
    let a = gaussian(40, 3, 1.0, 8);
    let b = gaussian(30, 3, 1.5, 9);
    let mean_dist = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += x.row(i).iter().zip(y.row(j)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    let want = 2.0 * mean_dist(&a, &b) - mean_dist(&a, &a) - mean_dist(&b, &b);
    let got = moment_distance(&a, &b).unwrap().energy_distance;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn residual_ratio_separates_noise_from_manifold_samples() {
    let spec = FourierManifoldSpec::new(32, 4);
    let modes = select_modes(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = generate_fourier_images(&spec, &modes, 200, &mut rng).unwrap();
    let held_out = generate_fourier_images(&spec, &modes, 200, &mut rng).unwrap();
    let floor = residual_floor(&train, &modes).unwrap();
    let clean = residual_energy_stats(&held_out, &modes, &floor).unwrap();
    assert!((0.7..1.4).contains(&clean.baseline_ratio), "{}", clean.baseline_ratio);
    let noise = gaussian(50, 1024, 1.0, 1);
    let noisy = residual_energy_stats(&noise, &modes, &floor).unwrap();
    assert!(noisy.baseline_ratio > 100.0, "{}", noisy.baseline_ratio);
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (k, &i) in idx.iter().enumerate() {
        r[i] = k as f64;
    }
    r
}

/// Closed form for series without ties.
fn spearman_no_ties(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

proptest! {
    #[test]
    fn oracle_psnr_decreases_with_noise(tau in 0.5f64..3.0, seed in 0u64..100) {
        let data = gaussian(1000, 2, tau, seed);
        let oracle = GaussianOracle { tau };
        let p: Vec<f64> = [0.9, 0.7, 0.5, 0.3, 0.1]
            .iter()
            .map(|&t| psnr_at_t(&oracle, &data, t, 1000, &mut eval_rng(seed, 0)).unwrap())
            .collect();
        for w in p.windows(2) {
            prop_assert!(w[0] >= w[1], "{:?}", p);
        }
    }

    #[test]
    fn identical_models_have_zero_delta_for_any_seed(seed in 0u64..10_000) {
        let data = gaussian(50, 3, 1.0, 1);
        let o = GaussianOracle { tau: 1.0 };
        let d = delta_psnr_curve(&o, &o, &data, &DEFAULT_PSNR_TIMES, 50, seed).unwrap();
        prop_assert!(d.psnr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spearman_matches_closed_form(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..30)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let distinct = |x: &[f64]| {
            let mut s = x.to_vec();
            s.sort_by(f64::total_cmp);
            s.windows(2).all(|w| w[0] != w[1])
        };
        prop_assume!(distinct(&a) && distinct(&b));
        let got = spearman(&a, &b).unwrap().unwrap();
        prop_assert!((got - spearman_no_ties(&a, &b)).abs() < 1e-12);
    }
}
