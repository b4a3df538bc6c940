//! Probability-flow ODE integration from noise at `t_start` to data at
//! `t_end`, on a uniform grid with left-endpoint velocity evaluation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Network, VelocityField};
use crate::nn::Tensor;
use crate::objectives::{ParamClass, TimeClamp};

/// Rows integrated together; independent chunks run in parallel.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            other => Err(Error::Config(format!("unknown integrator {other:?} (euler|heun)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::euler(200)
    }
}

impl IntegratorConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            method: Method::Euler,
            steps,
            t_start: 0.0,
            t_end: 1.0,
        }
    }

    pub fn heun(steps: usize) -> Self {
        Self {
            method: Method::Heun,
            ..Self::euler(steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("integrator needs at least one step".into()));
        }
        if !(0.0 <= self.t_start && self.t_start < self.t_end && self.t_end <= 1.0) {
            return Err(Error::Config(format!(
                "integration interval [{}, {}] must satisfy 0 <= start < end <= 1",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt()
    }
}

/// Velocity of a network under a parametrization class, in the form that
/// avoids dividing twice: `N` for velocity, `(N - x)/(1 - t)` for clean
/// prediction, `(x - N)/t` for noise prediction.
pub struct ClassVelocity<'a, N: ?Sized> {
    pub net: &'a N,
    pub class: ParamClass,
    pub clamp: TimeClamp,
}

impl<'a, N: Network + ?Sized> ClassVelocity<'a, N> {
    pub fn new(net: &'a N, class: ParamClass, clamp: TimeClamp) -> Self {
        Self { net, class, clamp }
    }
}

impl<N: Network + ?Sized> VelocityField for ClassVelocity<'_, N> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let t = self.clamp.apply(t);
        let n = self.net.output(x, &[t])?;
        n.same_shape("velocity_field", x)?;
        match self.class {
            ParamClass::Vel => Ok(n),
            ParamClass::Den => n.zip_map(x, |n, x| (n - x) / (1.0 - t)),
            ParamClass::Noise => n.zip_map(x, |n, x| (x - n) / t),
        }
    }
}

fn integrate_chunk<V: VelocityField + ?Sized>(field: &V, x: Tensor, cfg: &IntegratorConfig) -> Result<Tensor> {
    let dt = cfg.dt();
    let mut x = x;
    for k in 0..cfg.steps {
        let t = cfg.time(k);
        let v = field.velocity(&x, t)?;
        x = match cfg.method {
            Method::Euler => x.zip_map(&v, |x, v| x + dt * v)?,
            Method::Heun => {
                let pred = x.zip_map(&v, |x, v| x + dt * v)?;
                let v2 = field.velocity(&pred, cfg.time(k + 1))?;
                let avg = v.zip_map(&v2, |a, b| 0.5 * (a + b))?;
                x.zip_map(&avg, |x, v| x + dt * v)?
            }
        };
        if !x.is_finite() {
            return Err(Error::SamplerDiverged {
                step: k,
                t,
                detail: "state became non-finite".into(),
            });
        }
    }
    Ok(x)
}

/// Integrates every row of `x_init` (`[batch, d]`) through `field`.
pub fn integrate<V: VelocityField + ?Sized>(field: &V, x_init: &Tensor, cfg: &IntegratorConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x_init.shape().len() != 2 {
        return Err(Error::shape("integrate", format!("expected [batch, d], got {:?}", x_init.shape())));
    }
    let rows = x_init.rows();
    let d = x_init.row_len();
    let chunks: Vec<Tensor> = (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|s| {
            let idx: Vec<usize> = (s..(s + CHUNK_ROWS).min(rows)).collect();
            x_init.gather_rows(&idx)
        })
        .collect();
    let done: Vec<Tensor> = chunks
        .into_par_iter()
        .map(|c| integrate_chunk(field, c, cfg))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(rows * d);
    for c in done {
        data.extend(c.into_data());
    }
    Tensor::new(vec![rows, d], data)
}

/// Integrates a network wrapped in `class`; divergence reports the class.
pub fn integrate_class<N: Network + ?Sized>(
    net: &N,
    class: ParamClass,
    clamp: &TimeClamp,
    x_init: &Tensor,
    cfg: &IntegratorConfig,
) -> Result<Tensor> {
    let field = ClassVelocity::new(net, class, clamp.clone());
    integrate(&field, x_init, cfg).map_err(|e| match e {
        Error::SamplerDiverged { step, t, detail } => Error::SamplerDiverged {
            step,
            t,
            detail: format!("{detail} under {class}"),
        },
        other => other,
    })
}

/// Standard-normal starting points for `count` samples of dimension `dim`.
pub fn initial_noise(count: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[count, dim], &mut rng)
}

/// Draws `count` samples from noise seeded by `seed`.
pub fn generate<N: Network + ?Sized>(
    net: &N,
    class: ParamClass,
    clamp: &TimeClamp,
    count: usize,
    dim: usize,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Usage("requested zero samples".into()));
    }
    integrate_class(net, class, clamp, &initial_noise(count, dim, seed), cfg)
}
