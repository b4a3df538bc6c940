//! Desk-scale networks `N(x, t)`: a global MLP and a patch-based mixer whose
//! patch size controls locality.
//!
//! Both take flattened inputs `[batch, d]` and return the same shape. The
//! time enters through a sinusoidal embedding concatenated to the input
//! (MLP) or to every token (mixer). The output layer starts at zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Network;
use crate::nn::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Vector { dim: usize },
    Image { side: usize },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { side } => side * side,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelVariant {
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    PatchMixer {
        patch: usize,
        embed: usize,
        depth: usize,
        token_hidden: usize,
        channel_hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub time_embed_dim: usize,
    pub input: InputShape,
}

impl ModelSpec {
    pub fn mlp(dim: usize, hidden: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            variant: ModelVariant::Mlp {
                hidden,
                activation: Activation::Gelu,
            },
            time_embed_dim,
            input: InputShape::Vector { dim },
        }
    }

    pub fn image_mlp(side: usize, hidden: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            input: InputShape::Image { side },
            ..Self::mlp(side * side, hidden, time_embed_dim)
        }
    }

    pub fn patch_mixer(
        side: usize,
        patch: usize,
        embed: usize,
        depth: usize,
        token_hidden: usize,
        channel_hidden: usize,
        time_embed_dim: usize,
    ) -> Self {
        Self {
            variant: ModelVariant::PatchMixer {
                patch,
                embed,
                depth,
                token_hidden,
                channel_hidden,
            },
            time_embed_dim,
            input: InputShape::Image { side },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.input.dim() == 0 {
            return Err(Error::Config("empty input".into()));
        }
        match &self.variant {
            ModelVariant::Mlp { hidden, .. } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("zero-width hidden layer".into()));
                }
            }
            ModelVariant::PatchMixer {
                patch,
                embed,
                token_hidden,
                channel_hidden,
                ..
            } => {
                let InputShape::Image { side } = self.input else {
                    return Err(Error::Config("patch mixer needs an image input".into()));
                };
                if *patch == 0 || side % patch != 0 {
                    return Err(Error::Config(format!("patch {patch} does not divide image side {side}")));
                }
                if *embed == 0 || *token_hidden == 0 || *channel_hidden == 0 {
                    return Err(Error::Config("zero-width mixer layer".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of tokens, `(side / patch)^2`, for the mixer.
    pub fn tokens(&self) -> Option<usize> {
        match (&self.variant, &self.input) {
            (ModelVariant::PatchMixer { patch, .. }, InputShape::Image { side }) => {
                Some((side / patch) * (side / patch))
            }
            _ => None,
        }
    }

    /// Shapes of every trainable tensor, in parameter order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.input.dim();
        let te = self.time_embed_dim;
        let mut shapes = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            shapes.push((format!("{name}.w"), vec![i, o]));
            shapes.push((format!("{name}.b"), vec![o]));
        };
        match &self.variant {
            ModelVariant::Mlp { hidden, .. } => {
                let mut fan_in = d + te;
                for (i, &h) in hidden.iter().enumerate() {
                    linear(&format!("hidden{i}"), fan_in, h);
                    fan_in = h;
                }
                linear("out", fan_in, d);
            }
            ModelVariant::PatchMixer {
                patch,
                embed,
                depth,
                token_hidden,
                channel_hidden,
            } => {
                let t = self.tokens().unwrap_or(1);
                let p2 = patch * patch;
                linear("embed", p2 + te, *embed);
                for b in 0..*depth {
                    linear(&format!("block{b}.token1"), t, *token_hidden);
                    linear(&format!("block{b}.token2"), *token_hidden, t);
                    linear(&format!("block{b}.channel1"), *embed, *channel_hidden);
                    linear(&format!("block{b}.channel2"), *channel_hidden, *embed);
                }
                linear("out", *embed, p2);
                shapes.insert(2, ("pos".to_string(), vec![t, *embed]));
            }
        }
        shapes
    }
}

/// Exact number of trainable scalars.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Sinusoidal embedding `[sin(w_k t), cos(w_k t)]` with periods spaced
/// geometrically from 4 down to 4/100. The slowest pair alone is injective
/// on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
}

impl TimeEmbedding {
    const SLOWEST_PERIOD: f64 = 4.0;
    const PERIOD_RATIO: f64 = 100.0;

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half)
            .map(|k| {
                let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
                let period = Self::SLOWEST_PERIOD / Self::PERIOD_RATIO.powf(frac);
                2.0 * std::f64::consts::PI / period
            })
            .collect()
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let freqs = self.frequencies();
        let mut out = Vec::with_capacity(self.dim);
        out.extend(freqs.iter().map(|w| (w * t).sin()));
        out.extend(freqs.iter().map(|w| (w * t).cos()));
        out
    }

    /// `[rows, repeat, dim]` (or `[rows, dim]` for `repeat == None`).
    fn batch(&self, t: &[f64], rows: usize, repeat: Option<usize>) -> Result<Tensor> {
        let r = repeat.unwrap_or(1);
        let mut data = Vec::with_capacity(rows * r * self.dim);
        for i in 0..rows {
            let e = self.embed(if t.len() == 1 { t[0] } else { t[i] });
            for _ in 0..r {
                data.extend_from_slice(&e);
            }
        }
        match repeat {
            Some(r) => Tensor::new(vec![rows, r, self.dim], data),
            None => Tensor::new(vec![rows, self.dim], data),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases, small Gaussian
    /// position offsets and a zero output layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let pos_law = Normal::new(0.0, 0.02).expect("valid std");
        let named = self
            .spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.starts_with("out.") || name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else if name == "pos" {
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| pos_law.sample(rng))
                        .collect();
                    Tensor::new(shape, data).expect("shape")
                } else {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::uniform(&shape, bound, rng)
                };
                (name, value)
            })
            .collect();
        ParamStore::new(named)
    }

    fn act(tape: &mut Tape, a: Activation, x: Var) -> Result<Var> {
        match a {
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Records `N(x, t)` for `x: [batch, d]`; `params` follow
    /// [`ModelSpec::param_shapes`] order; `t` holds one time or one per row.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var, t: &[f64]) -> Result<Var> {
        let shapes = self.spec.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::shape(
                "model_forward",
                format!("{} parameters for {} slots", params.len(), shapes.len()),
            ));
        }
        let xs = tape.value(x).shape().to_vec();
        let d = self.spec.input.dim();
        if xs.len() != 2 || xs[1] != d {
            return Err(Error::shape("model_forward", format!("input {xs:?}, expected [batch, {d}]")));
        }
        let batch = xs[0];
        if t.len() != 1 && t.len() != batch {
            return Err(Error::shape("model_forward", format!("{} times for batch {batch}", t.len())));
        }
        let emb = TimeEmbedding {
            dim: self.spec.time_embed_dim,
        };
        match &self.spec.variant {
            ModelVariant::Mlp { hidden, activation } => {
                let te = tape.constant(emb.batch(t, batch, None)?)?;
                let mut h = tape.concat(x, te)?;
                for i in 0..hidden.len() {
                    h = Self::linear(tape, h, params[2 * i], params[2 * i + 1])?;
                    h = Self::act(tape, *activation, h)?;
                }
                let k = 2 * hidden.len();
                Self::linear(tape, h, params[k], params[k + 1])
            }
            ModelVariant::PatchMixer { patch, depth, .. } => {
                let InputShape::Image { side } = self.spec.input else {
                    unreachable!("validated")
                };
                let tokens = self.spec.tokens().expect("mixer");
                let img = tape.reshape(x, &[batch, side, side])?;
                let patches = tape.patchify(img, *patch)?;
                let te = tape.constant(emb.batch(t, batch, Some(tokens))?)?;
                let inp = tape.concat(patches, te)?;
                let mut h = Self::linear(tape, inp, params[0], params[1])?;
                h = tape.add(h, params[2])?;
                let mut k = 3;
                for _ in 0..*depth {
                    let y = tape.layer_norm(h)?;
                    let y = tape.swap_last(y)?;
                    let y = Self::linear(tape, y, params[k], params[k + 1])?;
                    let y = tape.gelu(y)?;
                    let y = Self::linear(tape, y, params[k + 2], params[k + 3])?;
                    let y = tape.swap_last(y)?;
                    h = tape.add(h, y)?;

                    let y = tape.layer_norm(h)?;
                    let y = Self::linear(tape, y, params[k + 4], params[k + 5])?;
                    let y = tape.gelu(y)?;
                    let y = Self::linear(tape, y, params[k + 6], params[k + 7])?;
                    h = tape.add(h, y)?;
                    k += 8;
                }
                let out = Self::linear(tape, h, params[k], params[k + 1])?;
                let img = tape.unpatchify(out, side)?;
                tape.reshape(img, &[batch, d])
            }
        }
    }

    /// Forward pass on a fresh tape with frozen parameters.
    pub fn forward(&self, params: &[Tensor], x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(params.len());
        for p in params {
            vars.push(tape.constant(p.clone())?);
        }
        let xv = tape.constant(x.clone())?;
        let out = self.forward_tape(&mut tape, &vars, xv, t)?;
        Ok(tape.value(out).clone())
    }
}

/// A model with frozen parameters, usable as a [`Network`].
#[derive(Clone, Debug)]
pub struct FrozenModel {
    pub model: Model,
    pub params: Vec<Tensor>,
}

impl Network for FrozenModel {
    fn output(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let d = self.model.spec.input.dim();
        if x.numel() % d != 0 {
            return Err(Error::shape("model_forward", format!("{:?} vs dim {d}", x.shape())));
        }
        let flat = x.reshape(&[x.numel() / d, d])?;
        let out = self.model.forward(&self.params, &flat, t)?;
        out.reshape(x.shape())
    }
}
