//! The weighted denoising objective `E[w(t) |D(x_t, t) - x_1|^2]`, its
//! weightings, the three parametrization classes and the conversions between
//! denoiser, velocity and noise views.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// Classic denoiser weighting default: `t_min = 1 / (1 + 19) = 0.05`.
pub const DEFAULT_SIGMA_MAX: f64 = 19.0;

/// `w(t) = t^a (1-t)^b` on `t >= support_from`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeMonomial {
    pub t_exp: f64,
    pub one_minus_t_exp: f64,
    pub support_from: f64,
}

impl TimeMonomial {
    const ONE: Self = Self {
        t_exp: 0.0,
        one_minus_t_exp: 0.0,
        support_from: 0.0,
    };

    pub fn eval(&self, t: f64) -> f64 {
        if t < self.support_from {
            return 0.0;
        }
        let mut v = 1.0;
        if self.t_exp != 0.0 {
            v *= pow(t, self.t_exp);
        }
        if self.one_minus_t_exp != 0.0 {
            v *= pow(1.0 - t, self.one_minus_t_exp);
        }
        v
    }

    fn times(self, other: Self) -> Self {
        Self {
            t_exp: self.t_exp + other.t_exp,
            one_minus_t_exp: self.one_minus_t_exp + other.one_minus_t_exp,
            support_from: self.support_from.max(other.support_from),
        }
    }
}

fn pow(base: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < 64.0 {
        base.powi(e as i32)
    } else {
        base.powf(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightingScheme {
    Den,
    Vel,
    Noise,
    Classic { sigma_max: f64 },
    Power { p: f64 },
}

impl WeightingScheme {
    pub fn monomial(&self) -> TimeMonomial {
        let m = |a, b| TimeMonomial {
            t_exp: a,
            one_minus_t_exp: b,
            support_from: 0.0,
        };
        match *self {
            Self::Den => TimeMonomial::ONE,
            Self::Vel => m(0.0, -2.0),
            Self::Noise => m(2.0, -2.0),
            Self::Classic { sigma_max } => TimeMonomial {
                t_exp: -2.0,
                one_minus_t_exp: 0.0,
                support_from: 1.0 / (1.0 + sigma_max),
            },
            Self::Power { p } => m(0.0, -p),
        }
    }

    /// Lower end of the support (0 except for the classic weighting).
    pub fn t_min(&self) -> f64 {
        self.monomial().support_from
    }

    /// `w(t)` for `t` strictly inside `(0, 1)`.
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Usage(format!(
                "weighting {self} evaluated at t = {t}; clamp t into (0, 1) first"
            )));
        }
        Ok(self.monomial().eval(t))
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Den => write!(f, "w_den"),
            Self::Vel => write!(f, "w_vel"),
            Self::Noise => write!(f, "w_noise"),
            Self::Classic { sigma_max } => write!(f, "w_classic:{sigma_max}"),
            Self::Power { p } => write!(f, "w_pow:{p}"),
        }
    }
}

fn parse_positive(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} value {s:?}")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{what} must be positive, got {v}")));
    }
    Ok(v)
}

impl FromStr for WeightingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w_den" => Ok(Self::Den),
            "w_vel" => Ok(Self::Vel),
            "w_noise" => Ok(Self::Noise),
            "w_classic" => Ok(Self::Classic {
                sigma_max: DEFAULT_SIGMA_MAX,
            }),
            _ => {
                if let Some(v) = s.strip_prefix("w_classic:") {
                    Ok(Self::Classic {
                        sigma_max: parse_positive(v, "sigma_max")?,
                    })
                } else if let Some(v) = s.strip_prefix("w_pow:") {
                    Ok(Self::Power {
                        p: parse_positive(v, "power")?,
                    })
                } else {
                    Err(Error::Config(format!("unknown weighting {s:?}")))
                }
            }
        }
    }
}

impl TryFrom<String> for WeightingScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeightingScheme> for String {
    fn from(w: WeightingScheme) -> String {
        w.to_string()
    }
}

/// How a network output `N` is turned into a denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ParamClass {
    /// `D = N`
    Den,
    /// `D = x + (1 - t) N`
    Vel,
    /// `D = (x - (1 - t) N) / t`
    Noise,
}

impl ParamClass {
    pub const ALL: [ParamClass; 3] = [ParamClass::Den, ParamClass::Vel, ParamClass::Noise];

    /// `s(t)` with `D - x_1 = s(t) (N - target)`.
    pub fn residual_scale(&self) -> TimeMonomial {
        match self {
            Self::Den => TimeMonomial::ONE,
            Self::Vel => TimeMonomial {
                t_exp: 0.0,
                one_minus_t_exp: 1.0,
                support_from: 0.0,
            },
            Self::Noise => TimeMonomial {
                t_exp: -1.0,
                one_minus_t_exp: 1.0,
                support_from: 0.0,
            },
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Den => "c_den",
            Self::Vel => "c_vel",
            Self::Noise => "c_noise",
        })
    }
}

impl FromStr for ParamClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c_den" => Ok(Self::Den),
            "c_vel" => Ok(Self::Vel),
            "c_noise" => Ok(Self::Noise),
            _ => Err(Error::Config(format!("unknown parametrization class {s:?}"))),
        }
    }
}

impl TryFrom<String> for ParamClass {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ParamClass> for String {
    fn from(c: ParamClass) -> String {
        c.to_string()
    }
}

/// Loss factor `w(t) s(t)^2` multiplying `|N - target|^2`. Exponents are
/// combined symbolically, so canonical pairs give exactly 1.
pub fn loss_factor(weighting: &WeightingScheme, class: ParamClass) -> TimeMonomial {
    let s = class.residual_scale();
    let s2 = TimeMonomial {
        t_exp: 2.0 * s.t_exp,
        one_minus_t_exp: 2.0 * s.one_minus_t_exp,
        support_from: 0.0,
    };
    weighting.monomial().times(s2)
}

/// Time interval used for training and class conversions, with a counter of
/// how often a time had to be moved into it.
#[derive(Debug)]
pub struct TimeClamp {
    pub lo: f64,
    pub hi: f64,
    clamped: AtomicUsize,
}

impl Clone for TimeClamp {
    fn clone(&self) -> Self {
        Self {
            lo: self.lo,
            hi: self.hi,
            clamped: AtomicUsize::new(self.clamped_count()),
        }
    }
}

impl Default for TimeClamp {
    fn default() -> Self {
        Self::new(1e-3, 1.0 - 1e-3).expect("valid default")
    }
}

impl TimeClamp {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid time clamp [{lo}, {hi}]")));
        }
        Ok(Self {
            lo,
            hi,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn apply(&self, t: f64) -> f64 {
        self.bound(t, true, true)
    }

    pub fn floor(&self, t: f64) -> f64 {
        self.bound(t, true, false)
    }

    pub fn ceil(&self, t: f64) -> f64 {
        self.bound(t, false, true)
    }

    fn bound(&self, t: f64, low: bool, high: bool) -> f64 {
        let c = if low && t < self.lo {
            self.lo
        } else if high && t > self.hi {
            self.hi
        } else {
            return t;
        };
        self.clamped.fetch_add(1, Ordering::Relaxed);
        c
    }

    pub fn clamped_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolantSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
}

/// `x_t = (1 - t) x_0 + t x_1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<InterpolantSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("interpolation time {t} outside [0, 1]")));
    }
    let xt = x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?;
    Ok(InterpolantSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        xt,
    })
}

/// A batch of interpolants stacked along the leading axis, one time per row.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolantBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub xt: Tensor,
}

impl InterpolantBatch {
    pub fn new(x0: Tensor, x1: Tensor, t: Vec<f64>) -> Result<Self> {
        x0.same_shape("interpolate", &x1)?;
        if x0.rows() != t.len() {
            return Err(Error::shape(
                "interpolate",
                format!("{} rows vs {} times", x0.rows(), t.len()),
            ));
        }
        if t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Usage("interpolation time outside [0, 1]".into()));
        }
        let w = x0.row_len();
        let data = x0
            .data()
            .iter()
            .zip(x1.data())
            .enumerate()
            .map(|(i, (&a, &b))| {
                let ti = t[i / w];
                (1.0 - ti) * a + ti * b
            })
            .collect();
        let xt = Tensor::new(x0.shape().to_vec(), data)?;
        Ok(Self { x0, x1, t, xt })
    }

    pub fn from_samples(samples: &[InterpolantSample]) -> Result<Self> {
        let x0 = Tensor::stack(&samples.iter().map(|s| s.x0.clone()).collect::<Vec<_>>())?;
        let x1 = Tensor::stack(&samples.iter().map(|s| s.x1.clone()).collect::<Vec<_>>())?;
        let t = samples.iter().map(|s| s.t).collect();
        Self::new(x0, x1, t)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn per_row(x: &Tensor, t: &[f64], f: impl Fn(f64, usize) -> f64) -> Tensor {
    let w = if t.len() == 1 { x.numel() } else { x.row_len() };
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, _)| f(t[i / w], i))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn check_times(x: &Tensor, t: &[f64]) -> Result<()> {
    if t.len() != 1 && t.len() != x.rows() {
        return Err(Error::shape(
            "time vector",
            format!("{} times for {} rows", t.len(), x.rows()),
        ));
    }
    Ok(())
}

/// Denoiser induced by `class` around the network output. `t` holds either
/// one time for the whole tensor or one per leading-axis row. For the noise
/// class, times below `clamp.lo` are raised to it and counted.
pub fn denoiser_from_output_rows(
    class: ParamClass,
    n_out: &Tensor,
    x: &Tensor,
    t: &[f64],
    clamp: &TimeClamp,
) -> Result<Tensor> {
    n_out.same_shape("denoiser_from_output", x)?;
    check_times(x, t)?;
    let (n, xd) = (n_out.data(), x.data());
    Ok(match class {
        ParamClass::Den => n_out.clone(),
        ParamClass::Vel => per_row(x, t, |t, i| xd[i] + (1.0 - t) * n[i]),
        ParamClass::Noise => {
            let t: Vec<f64> = t.iter().map(|&t| clamp.floor(t)).collect();
            per_row(x, &t, |t, i| (xd[i] - (1.0 - t) * n[i]) / t)
        }
    })
}

pub fn denoiser_from_output(
    class: ParamClass,
    n_out: &Tensor,
    x: &Tensor,
    t: f64,
    clamp: &TimeClamp,
) -> Result<Tensor> {
    denoiser_from_output_rows(class, n_out, x, &[t], clamp)
}

/// `v = (D - x) / (1 - t)`, with `t` capped at `clamp.hi`.
pub fn velocity_from_denoiser(d: &Tensor, x: &Tensor, t: f64, clamp: &TimeClamp) -> Result<Tensor> {
    d.same_shape("velocity_from_denoiser", x)?;
    let t = clamp.ceil(t);
    d.zip_map(x, |d, x| (d - x) / (1.0 - t))
}

/// `eps = (x - t D) / (1 - t)`, with `t` capped at `clamp.hi`.
pub fn noise_from_denoiser(d: &Tensor, x: &Tensor, t: f64, clamp: &TimeClamp) -> Result<Tensor> {
    d.same_shape("noise_from_denoiser", x)?;
    let t = clamp.ceil(t);
    d.zip_map(x, |d, x| (x - t * d) / (1.0 - t))
}

/// Regression target of the network output for `class`, so that
/// `D - x_1 = s(t) (N - target)`.
pub fn class_target(class: ParamClass, batch: &InterpolantBatch) -> Result<Tensor> {
    match class {
        ParamClass::Den => Ok(batch.x1.clone()),
        ParamClass::Vel => batch.x1.sub(&batch.x0),
        ParamClass::Noise => Ok(batch.x0.clone()),
    }
}

/// Records `mean_b w(t_b) |D(x_t, t_b) - x_1|^2` on the tape in the factorized
/// form `w s^2 |N - target|^2`. `model` maps `(x_t, times)` to the network
/// output.
pub fn unified_loss<F>(
    tape: &mut Tape,
    batch: &InterpolantBatch,
    class: ParamClass,
    weighting: &WeightingScheme,
    model: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var, &[f64]) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let factor = loss_factor(weighting, class);
    let factors: Vec<f64> = batch.t.iter().map(|&t| factor.eval(t)).collect();
    let diagnose = |detail: &str| {
        let lo = batch.t.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = batch.t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Error::NonFiniteLoss(format!(
            "{detail} (class {class}, weighting {weighting}, t in [{lo}, {hi}])"
        ))
    };
    if factors.iter().any(|f| !f.is_finite()) {
        return Err(diagnose("non-finite loss weight"));
    }
    let run = |tape: &mut Tape| -> Result<Var> {
        let xt = tape.constant(batch.xt.clone())?;
        let out = model(tape, xt, &batch.t)?;
        let target = tape.constant(class_target(class, batch)?)?;
        let core = tape.sub(out, target)?;
        let sq = tape.mul(core, core)?;
        let flat = tape.reshape(sq, &[batch.len(), batch.xt.row_len()])?;
        let per_sample = tape.sum_last(flat)?;
        let weighted = tape.scale_rows(per_sample, &factors)?;
        tape.mean(weighted)
    };
    run(tape).map_err(|e| match e {
        Error::NonFinite { op } => diagnose(&format!("non-finite value in {op}")),
        other => other,
    })
}

/// Uniform draw on `[lo, hi]`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("invalid time range [{lo}, {hi}]")));
    }
    Ok(lo + (hi - lo) * rng.gen::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn interpolation_endpoints() {
        let (a, b) = (v(&[0.0, 2.0]), v(&[2.0, 0.0]));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().xt, a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().xt, b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().xt.data(), &[1.0, 1.0]);
        assert!(interpolate(&a, &v(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn weighting_table_values() {
        assert_eq!(WeightingScheme::Vel.value(0.5).unwrap(), 4.0);
        assert_eq!(WeightingScheme::Noise.value(0.5).unwrap(), 1.0);
        assert_eq!(WeightingScheme::Den.value(0.3).unwrap(), 1.0);
        let classic = WeightingScheme::Classic { sigma_max: 19.0 };
        assert!((classic.t_min() - 0.05).abs() < 1e-15);
        assert_eq!(classic.value(0.04).unwrap(), 0.0);
        assert!((classic.value(0.5).unwrap() - 4.0).abs() < 1e-12);
        assert!((WeightingScheme::Power { p: 3.0 }.value(0.5).unwrap() - 8.0).abs() < 1e-12);
        assert!(WeightingScheme::Vel.value(1.0).is_err());
        assert!(WeightingScheme::Vel.value(0.0).is_err());
    }

    #[test]
    fn config_strings_round_trip() {
        for s in ["w_den", "w_vel", "w_noise", "w_classic:19", "w_pow:1.5"] {
            let w: WeightingScheme = s.parse().unwrap();
            assert_eq!(w.to_string(), s);
        }
        for s in ["c_den", "c_vel", "c_noise"] {
            let c: ParamClass = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert!("w_pow:-1".parse::<WeightingScheme>().is_err());
        assert!("w_classic:abc".parse::<WeightingScheme>().is_err());
        assert!("c_score".parse::<ParamClass>().is_err());
        let json = serde_json::to_string(&WeightingScheme::Power { p: 3.0 }).unwrap();
        assert_eq!(json, "\"w_pow:3\"");
    }

    #[test]
    fn class_constructions() {
        let c = TimeClamp::default();
        let d = denoiser_from_output(ParamClass::Den, &v(&[5.0]), &v(&[0.0]), 0.3, &c).unwrap();
        assert_eq!(d.data(), &[5.0]);
        let d = denoiser_from_output(ParamClass::Vel, &v(&[2.0]), &v(&[1.0]), 0.5, &c).unwrap();
        assert_eq!(d.data(), &[2.0]);
        let d = denoiser_from_output(ParamClass::Noise, &v(&[1.0]), &v(&[1.0]), 0.5, &c).unwrap();
        assert_eq!(d.data(), &[1.0]);
        assert_eq!(c.clamped_count(), 0);
        denoiser_from_output(ParamClass::Noise, &v(&[1.0]), &v(&[1.0]), 0.0, &c).unwrap();
        assert_eq!(c.clamped_count(), 1);
    }

    #[test]
    fn conversions() {
        let c = TimeClamp::default();
        let x = v(&[1.0]);
        assert_eq!(velocity_from_denoiser(&x, &x, 0.4, &c).unwrap().data(), &[0.0]);
        assert_eq!(velocity_from_denoiser(&v(&[2.0]), &x, 0.5, &c).unwrap().data(), &[2.0]);
        assert_eq!(noise_from_denoiser(&v(&[7.0]), &v(&[3.0]), 0.0, &c).unwrap().data(), &[3.0]);
        assert_eq!(noise_from_denoiser(&x, &x, 0.5, &c).unwrap().data(), &[1.0]);
        velocity_from_denoiser(&x, &x, 1.0, &c).unwrap();
        assert_eq!(c.clamped_count(), 1);
    }

    #[test]
    fn round_trips_recover_network_output() {
        let c = TimeClamp::default();
        let n = v(&[0.3, -1.2, 2.5]);
        let x = v(&[1.0, 0.5, -0.7]);
        for &t in &[0.1, 0.5, 0.9] {
            let d = denoiser_from_output(ParamClass::Vel, &n, &x, t, &c).unwrap();
            let back = velocity_from_denoiser(&d, &x, t, &c).unwrap();
            assert!(back.max_abs_diff(&n) < 1e-12);
            let d = denoiser_from_output(ParamClass::Noise, &n, &x, t, &c).unwrap();
            let back = noise_from_denoiser(&d, &x, t, &c).unwrap();
            assert!(back.max_abs_diff(&n) < 1e-12);
        }
    }

    #[test]
    fn canonical_pairs_have_unit_factor() {
        for (w, c) in [
            (WeightingScheme::Den, ParamClass::Den),
            (WeightingScheme::Vel, ParamClass::Vel),
            (WeightingScheme::Noise, ParamClass::Noise),
        ] {
            for &t in &[1e-3, 0.2, 0.7, 1.0 - 1e-3] {
                assert_eq!(loss_factor(&w, c).eval(t), 1.0);
            }
        }
    }

    #[test]
    fn time_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_time(&mut rng, 0.3, 0.3).is_err());
        assert!(sample_time(&mut rng, 0.5, 0.2).is_err());
        for _ in 0..1000 {
            let t = sample_time(&mut rng, 0.2, 0.4).unwrap();
            assert!((0.2..=0.4).contains(&t));
        }
    }
}
