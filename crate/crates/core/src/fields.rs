//! Callable views shared by the sampler, the metrics and the oracles.

use crate::error::Result;
use crate::nn::Tensor;
use crate::objectives::{denoiser_from_output_rows, ParamClass, TimeClamp};

/// Raw network output `N(x, t)`; `t` holds one time or one per row.
pub trait Network: Sync {
    fn output(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// Estimator of `E[x_1 | x_t = x]` for a batch sharing one time.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Velocity `v(x, t)` of the probability-flow ODE, batched.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> Network for F
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor> + Sync,
{
    fn output(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self(x, t)
    }
}

/// Denoiser built from a network through a parametrization class.
pub struct ClassDenoiser<'a, N: ?Sized> {
    pub net: &'a N,
    pub class: ParamClass,
    pub clamp: TimeClamp,
}

impl<'a, N: Network + ?Sized> ClassDenoiser<'a, N> {
    pub fn new(net: &'a N, class: ParamClass, clamp: TimeClamp) -> Self {
        Self { net, class, clamp }
    }
}

impl<N: Network + ?Sized> Denoiser for ClassDenoiser<'_, N> {
    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let n = self.net.output(x, &[t])?;
        denoiser_from_output_rows(self.class, &n, x, &[t], &self.clamp)
    }
}

/// The constant-zero denoiser.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn denoise(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}
