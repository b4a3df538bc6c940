//! Synthetic data: the Fourier manifold images, Gaussian and mixture toys,
//! FFT helpers and the on-disk dataset format.

pub mod fft;
pub mod file;
pub mod fourier;
pub mod toy;

pub use file::{DatasetFile, DatasetHeader, DatasetSource, ResidualFloor};
pub use fourier::{
    generate_fourier_images, sample_fourier_image, select_modes, spectral_residual, CoeffLaw,
    FourierManifoldSpec, ModeSelection, ModeSet,
};
pub use toy::{sample_gaussian_data, sample_mixture2d};
