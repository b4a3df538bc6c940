use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    generate_fourier_images, sample_gaussian_data, sample_mixture2d, select_modes, DatasetFile,
    DatasetHeader, DatasetSource, FourierManifoldSpec, ModeSet, ResidualFloor,
};
use crate::error::{Error, Result};
use crate::metrics::residual_floor;
use crate::models::{param_count, Model, ModelSpec};
use crate::nn::Tensor;
use crate::objectives::{ParamClass, TimeClamp, WeightingScheme};
use crate::oracle::GaussianDataSpec;
use crate::sampler::IntegratorConfig;

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FMW_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// `train_size` images for training; `eval_size` held-out images.
    Fourier {
        spec: FourierManifoldSpec,
        train_size: usize,
        eval_size: usize,
    },
    /// `train_size = None` draws fresh samples every step.
    Gaussian {
        spec: GaussianDataSpec,
        train_size: Option<usize>,
        eval_size: usize,
        data_seed: u64,
    },
    Mixture {
        centers: Vec<[f64; 2]>,
        weights: Vec<f64>,
        std: f64,
        train_size: Option<usize>,
        eval_size: usize,
        data_seed: u64,
    },
    /// Training samples from a dataset file; the evaluation set is the same.
    File { path: PathBuf },
}

/// Materialized data of one run.
#[derive(Clone, Debug)]
pub struct Data {
    /// `None` when the source is sampled afresh per batch.
    pub train: Option<Tensor>,
    pub eval: Tensor,
    pub dim: usize,
    pub mode_set: Option<ModeSet>,
    pub floor: Option<ResidualFloor>,
    pub source: DatasetSource,
}

impl DatasetConfig {
    pub fn with_train_size(&self, n: usize) -> Result<Self> {
        let mut c = self.clone();
        match &mut c {
            DatasetConfig::Fourier { train_size, .. } => *train_size = n,
            DatasetConfig::Gaussian { train_size, .. } | DatasetConfig::Mixture { train_size, .. } => {
                *train_size = Some(n)
            }
            DatasetConfig::File { .. } => {
                return Err(Error::Config("cannot resize a file dataset".into()));
            }
        }
        Ok(c)
    }

    pub fn train_size(&self) -> Option<usize> {
        match self {
            DatasetConfig::Fourier { train_size, .. } => Some(*train_size),
            DatasetConfig::Gaussian { train_size, .. } | DatasetConfig::Mixture { train_size, .. } => *train_size,
            DatasetConfig::File { .. } => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            DatasetConfig::Fourier { spec, .. } => format!("fourier{}_m{}", spec.n, spec.m),
            DatasetConfig::Gaussian { spec, .. } => format!("gaussian_d{}", spec.dim),
            DatasetConfig::Mixture { centers, .. } => format!("mixture{}", centers.len()),
            DatasetConfig::File { path } => format!("file:{}", path.display()),
        }
    }

    /// Builds the training and evaluation sets. Fourier data use the
    /// dataset seed for modes and training images and an independent stream
    /// for held-out images.
    pub fn materialize(&self) -> Result<Data> {
        match self {
            DatasetConfig::Fourier {
                spec,
                train_size,
                eval_size,
            } => {
                spec.validate()?;
                if *train_size == 0 || *eval_size == 0 {
                    return Err(Error::Config("fourier dataset sizes must be positive".into()));
                }
                let modes = select_modes(spec)?;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.dataset_seed);
                let train = generate_fourier_images(spec, &modes, *train_size, &mut rng)?;
                let mut eval_rng = ChaCha8Rng::seed_from_u64(spec.dataset_seed);
                eval_rng.set_stream(1);
                let eval = generate_fourier_images(spec, &modes, *eval_size, &mut eval_rng)?;
                let floor = residual_floor(&train, &modes)?;
                Ok(Data {
                    dim: spec.n * spec.n,
                    train: Some(train),
                    eval,
                    mode_set: Some(modes),
                    floor: Some(floor),
                    source: DatasetSource::Fourier { spec: spec.clone() },
                })
            }
            DatasetConfig::Gaussian {
                spec,
                train_size,
                eval_size,
                data_seed,
            } => {
                let (train, eval) = two_sets(*train_size, *eval_size, *data_seed, |n, rng| {
                    sample_gaussian_data(spec, n, rng)
                })?;
                Ok(Data {
                    dim: spec.dim,
                    train,
                    eval,
                    mode_set: None,
                    floor: None,
                    source: DatasetSource::Gaussian { spec: spec.clone() },
                })
            }
            DatasetConfig::Mixture {
                centers,
                weights,
                std,
                train_size,
                eval_size,
                data_seed,
            } => {
                let (train, eval) = two_sets(*train_size, *eval_size, *data_seed, |n, rng| {
                    sample_mixture2d(centers, weights, *std, n, rng)
                })?;
                Ok(Data {
                    dim: 2,
                    train,
                    eval,
                    mode_set: None,
                    floor: None,
                    source: DatasetSource::Mixture {
                        centers: centers.clone(),
                        weights: weights.clone(),
                        std: *std,
                    },
                })
            }
            DatasetConfig::File { path } => {
                let file = DatasetFile::load(path)?;
                let floor = match (&file.header.mode_set, file.header.residual_floor) {
                    (Some(m), None) => Some(residual_floor(&file.samples, m)?),
                    (_, f) => f,
                };
                Ok(Data {
                    dim: file.samples.row_len(),
                    train: Some(file.samples.clone()),
                    eval: file.samples,
                    mode_set: file.header.mode_set,
                    floor,
                    source: file.header.source,
                })
            }
        }
    }
}

fn two_sets(
    train_size: Option<usize>,
    eval_size: usize,
    seed: u64,
    draw: impl Fn(usize, &mut ChaCha8Rng) -> Result<Tensor>,
) -> Result<(Option<Tensor>, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = train_size.map(|n| draw(n, &mut rng)).transpose()?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(1);
    Ok((train, draw(eval_size, &mut eval_rng)?))
}

impl Data {
    /// Dataset file holding the training images (or the evaluation set for
    /// streamed sources).
    pub fn to_file(&self) -> DatasetFile {
        let samples = self.train.clone().unwrap_or_else(|| self.eval.clone());
        DatasetFile {
            header: DatasetHeader {
                source: self.source.clone(),
                shape: vec![samples.rows(), samples.row_len()],
                mode_set: self.mode_set.clone(),
                residual_floor: self.floor,
            },
            samples,
        }
    }
}

/// Learning-rate multiplier over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` at the first step to 0 after the last.
    Cosine,
}

impl LrSchedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub iterations: usize,
    pub ema_decay: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub psnr_times: Vec<f64>,
    pub n_eval: usize,
    pub eval_seed: u64,
    /// Evaluate PSNR on training images instead of held-out ones.
    pub on_train: bool,
    /// Generated samples for moment and residual statistics; 0 skips.
    pub gen_count: usize,
    pub integrator: IntegratorConfig,
    pub gen_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub weighting: WeightingScheme,
    pub class: ParamClass,
    pub optim: OptimConfig,
    pub t_clamp: [f64; 2],
    /// Minibatches, noise and times.
    pub seed: u64,
    /// Parameter initialization.
    pub init_seed: u64,
    pub eval: EvalConfig,
    /// `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        Model::new(self.model.clone())?;
        TimeClamp::new(self.t_clamp[0], self.t_clamp[1])?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if o.batch_size == 0 || o.log_every == 0 {
            return Err(Error::Config("batch size and log interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.ema_decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {}", o.ema_decay)));
        }
        let e = &self.eval;
        if e.psnr_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("PSNR times must lie in [0, 1]".into()));
        }
        if e.gen_count > 0 {
            e.integrator.validate()?;
        }
        Ok(())
    }

    pub fn clamp(&self) -> Result<TimeClamp> {
        TimeClamp::new(self.t_clamp[0], self.t_clamp[1])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON with every field present.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Output directory, resolved against the output root when relative.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|d| resolve_output(d))
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Cross product of cell settings applied to a base run. Every cell uses
/// the base `init_seed`, so cells with equal model specs start from
/// bit-identical parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub name: String,
    pub base: RunConfig,
    pub weightings: Vec<WeightingScheme>,
    pub classes: Vec<ParamClass>,
    pub models: Vec<ModelSpec>,
    /// Empty keeps the base dataset size.
    pub train_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub label: String,
    pub config: RunConfig,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let g: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        g.cells()?;
        Ok(g)
    }

    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.weightings.is_empty() || self.classes.is_empty() || self.models.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(format!("grid {:?} has an empty axis", self.name)));
        }
        let counts: Vec<usize> = self.models.iter().map(param_count).collect();
        let (lo, hi) = (counts.iter().min(), counts.iter().max());
        if let (Some(&lo), Some(&hi)) = (lo, hi) {
            if hi as f64 > 1.1 * lo as f64 {
                return Err(Error::Config(format!(
                    "grid {:?} compares models with {lo} and {hi} parameters (more than 10% apart)",
                    self.name
                )));
            }
        }
        let sizes: Vec<Option<usize>> = if self.train_sizes.is_empty() {
            vec![None]
        } else {
            self.train_sizes.iter().map(|&n| Some(n)).collect()
        };
        let mut cells = Vec::new();
        for (mi, model) in self.models.iter().enumerate() {
            for &n in &sizes {
                for w in &self.weightings {
                    for &class in &self.classes {
                        for &seed in &self.seeds {
                            let mut c = self.base.clone();
                            c.model = model.clone();
                            c.weighting = *w;
                            c.class = class;
                            c.seed = seed;
                            if let Some(n) = n {
                                c.dataset = c.dataset.with_train_size(n)?;
                            }
                            let mut label = format!("m{mi}_{w}_{class}_s{seed}").replace(':', "-");
                            if let Some(n) = n {
                                label = format!("n{n}_{label}");
                            }
                            c.output_dir = self.base.output_dir.as_ref().map(|d| d.join(&label));
                            c.validate()?;
                            cells.push(Cell {
                                index: cells.len(),
                                label,
                                config: c,
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}
