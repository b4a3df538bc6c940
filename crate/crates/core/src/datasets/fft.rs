//! Orthonormal 2-D discrete Fourier transform on square grids.
//!
//! Rows and columns are transformed with an iterative radix-2 FFT when the
//! side is a power of two and with a direct O(n^2) DFT otherwise. Each
//! direction is scaled by `1/sqrt(n)`, so the transform is unitary.

use num_complex::Complex64;

use crate::error::{Error, Result};

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if !n.is_power_of_two() {
        let out = dft(buf, inverse);
        buf.copy_from_slice(&out);
        return;
    }
    // bit reversal
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let w_len = Complex64::from_polar(1.0, ang);
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w *= w_len;
            }
        }
        len <<= 1;
    }
}

fn dft(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            input
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let ang = sign * 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                    x * Complex64::from_polar(1.0, ang)
                })
                .sum()
        })
        .collect()
}

fn side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n == 0 || n * n != len {
        return Err(Error::shape("fft2", format!("{len} values is not a square grid")));
    }
    Ok(n)
}

fn transform2(data: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    let n = side(data.len())?;
    let mut out = data.to_vec();
    for row in out.chunks_mut(n) {
        fft_in_place(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = out[r * n + c];
        }
        fft_in_place(&mut col, inverse);
        for r in 0..n {
            out[r * n + c] = col[r];
        }
    }
    let norm = 1.0 / n as f64;
    for v in out.iter_mut() {
        *v *= norm;
    }
    Ok(out)
}

/// Orthonormal forward transform of a row-major `n x n` grid.
pub fn fft2(data: &[Complex64]) -> Result<Vec<Complex64>> {
    transform2(data, false)
}

/// Orthonormal inverse transform of a row-major `n x n` grid.
pub fn ifft2(data: &[Complex64]) -> Result<Vec<Complex64>> {
    transform2(data, true)
}

/// Forward transform of a real image.
pub fn fft2_real(image: &[f64]) -> Result<Vec<Complex64>> {
    let c: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_image_has_only_dc() {
        for n in [4usize, 6, 8] {
            let c = 0.75;
            let spec = fft2_real(&vec![c; n * n]).unwrap();
            assert!((spec[0].re - c * n as f64).abs() < 1e-12);
            assert!(spec[1..].iter().all(|z| z.norm() < 1e-12));
        }
    }

    #[test]
    fn inverse_and_parseval() {
        for (n, seed) in [(8usize, 1u64), (32, 2), (12, 3)] {
            let img = random_image(n, seed);
            let spec = fft2_real(&img).unwrap();
            let back = ifft2(&spec).unwrap();
            let err = img
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b.re).abs().max(b.im.abs()))
                .fold(0.0, f64::max);
            assert!(err <= 1e-10, "round trip error {err}");
            let e_img: f64 = img.iter().map(|v| v * v).sum();
            let e_spec: f64 = spec.iter().map(|z| z.norm_sqr()).sum();
            assert!((e_img - e_spec).abs() <= 1e-10 * e_img.max(1.0));
        }
    }

    #[test]
    fn radix2_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Complex64> = (0..16)
            .map(|_| Complex64::new(rng.gen(), rng.gen()))
            .collect();
        let mut fast = x.clone();
        fft_in_place(&mut fast, false);
        let slow = dft(&x, false);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(fft2_real(&[0.0; 12]).is_err());
    }
}
