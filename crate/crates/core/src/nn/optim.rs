//! Named parameters with Adam moments and an EMA shadow copy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl Param {
    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    ema: Option<Vec<Tensor>>,
}

impl ParamStore {
    pub fn new(named: Vec<(String, Tensor)>) -> Self {
        let params = named
            .into_iter()
            .map(|(name, value)| Param {
                m: Tensor::zeros(value.shape()),
                v: Tensor::zeros(value.shape()),
                name,
                value,
                step: 0,
            })
            .collect();
        Self { params, ema: None }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn values(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.value).collect()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn ema(&self) -> Option<&[Tensor]> {
        self.ema.as_deref()
    }

    pub fn set_ema(&mut self, shadow: Vec<Tensor>) -> Result<()> {
        if shadow.len() != self.params.len()
            || shadow
                .iter()
                .zip(&self.params)
                .any(|(s, p)| s.shape() != p.value.shape())
        {
            return Err(Error::shape("set_ema", "shadow does not match parameters"));
        }
        self.ema = Some(shadow);
        Ok(())
    }

    /// EMA weights when present, raw weights otherwise.
    pub fn eval_values(&self) -> Vec<Tensor> {
        match &self.ema {
            Some(e) => e.clone(),
            None => self.params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// is non-finite or mis-shaped.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), self.params.len()),
            ));
        }
        for (g, p) in grads.iter().zip(&self.params) {
            p.value.same_shape("adam_step", g)?;
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step gradient" });
            }
        }
        for (g, p) in grads.iter().zip(self.params.iter_mut()) {
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`; the shadow is
    /// initialized to the current parameters on first use.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        let params = &self.params;
        let shadow = self
            .ema
            .get_or_insert_with(|| params.iter().map(|p| p.value.clone()).collect());
        for (s, p) in shadow.iter_mut().zip(params) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.value.data()) {
                *sv = decay * *sv + (1.0 - decay) * pv;
            }
        }
        Ok(())
    }
}
