use fmweights::nn::Tensor;
use fmweights::objectives::WeightingScheme;
use fmweights::oracle::{
    empirical_posterior_denoiser, gaussian_flow_map, ideal_denoiser_gaussian, ideal_velocity_gaussian,
    optimal_weight, posterior_mean_coeff, posterior_variance,
};
use proptest::prelude::*;

#[test]
fn empirical_posterior_is_the_brute_force_minimizer() {
    let data = Tensor::new(vec![3, 1], vec![-0.8, 0.1, 0.9]).unwrap();
    let t = 0.45;
    for k in 0..20 {
        let x = -1.5 + 3.0 * k as f64 / 19.0;
        // E|D - x1|^2 under the exact posterior weights, minimized over D
        let w: Vec<f64> = data
            .data()
            .iter()
            .map(|&x1| (-(x - t * x1).powi(2) / (2.0 * (1.0 - t).powi(2))).exp())
            .collect();
        let loss = |d: f64| data.data().iter().zip(&w).map(|(x1, w)| w * (d - x1).powi(2)).sum::<f64>();
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..200 {
            let (a, b) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if loss(a) < loss(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let got = empirical_posterior_denoiser(&Tensor::new(vec![1, 1], vec![x]).unwrap(), t, &data).unwrap();
        assert!((got.data()[0] - 0.5 * (lo + hi)).abs() < 1e-8, "x = {x}");
    }
}

#[test]
fn empirical_posterior_survives_times_near_one() {
    let data = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.5]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.99, 0.01]).unwrap();
    let d = empirical_posterior_denoiser(&x, 1.0 - 1e-6, &data).unwrap();
    assert!(d.is_finite());
    assert_eq!(d.data(), &[1.0, 0.0]);
}

#[test]
fn gaussian_posterior_matches_monte_carlo_regression() {
    // least-squares slope of x1 on x_t estimates the posterior mean coefficient
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (tau, t, n) = (1.5, 0.3, 200_000);
    let x0 = Tensor::randn(&[n, 1], &mut rng);
    let x1 = Tensor::randn(&[n, 1], &mut rng).scale(tau);
    let xt = x0.zip_map(&x1, |a, b| (1.0 - t) * a + t * b).unwrap();
    let sxy: f64 = xt.data().iter().zip(x1.data()).map(|(a, b)| a * b).sum();
    let sxx: f64 = xt.data().iter().map(|a| a * a).sum();
    let slope = sxy / sxx;
    let c = ideal_denoiser_gaussian(&Tensor::from_vec(vec![1.0]), t, tau).data()[0];
    assert!((slope - c).abs() < 0.01, "{slope} vs {c}");
}

#[test]
fn flow_map_solves_the_ideal_velocity_ode() {
    let x0 = Tensor::from_vec(vec![0.7, -1.3]);
    let tau = 2.0;
    for t in [0.1, 0.5, 0.9] {
        let h = 1e-6;
        let deriv = gaussian_flow_map(&x0, t + h, tau)
            .sub(&gaussian_flow_map(&x0, t - h, tau))
            .unwrap()
            .scale(0.5 / h);
        let v = ideal_velocity_gaussian(&gaussian_flow_map(&x0, t, tau), t, tau);
        assert!(deriv.max_abs_diff(&v) < 1e-8);
    }
}

proptest! {
    #[test]
    fn optimal_weight_inverts_posterior_variance(t in 1e-3f64..0.999, tau in 0.05f64..20.0) {
        prop_assert!((optimal_weight(t, tau) * posterior_variance(t, tau) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn stable_and_textbook_denoisers_agree(t in 1e-3f64..0.999, tau in 0.1f64..10.0, x in -5.0f64..5.0) {
        let stable = ideal_denoiser_gaussian(&Tensor::from_vec(vec![x]), t, tau).data()[0];
        let textbook = posterior_mean_coeff(t, tau) * x / t;
        prop_assert!((stable - textbook).abs() <= 1e-10 * (1.0 + stable.abs()));
    }

    #[test]
    fn large_tau_approaches_snr_weighting(t in 0.01f64..0.99) {
        let snr = WeightingScheme::Noise.value(t).unwrap();
        let gap = |tau: f64| (optimal_weight(t, tau) - snr).abs();
        prop_assert!(gap(1e3) < gap(10.0));
        // the gap is exactly 1/tau^2, up to rounding at the scale of w_noise
        prop_assert!((gap(1e4) - 1e-8).abs() <= 1e-12 * snr.max(1.0));
    }
}
