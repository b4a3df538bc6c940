//! Desk-scale experiment setups. Budgets are sized for a single CPU core;
//! the three image models are matched to within 4% in parameter count.

use std::path::PathBuf;

use super::config::{DatasetConfig, EvalConfig, GridSpec, LrSchedule, OptimConfig, RunConfig};
use crate::datasets::FourierManifoldSpec;
use crate::metrics::DEFAULT_PSNR_TIMES;
use crate::models::ModelSpec;
use crate::objectives::{ParamClass, WeightingScheme};
use crate::oracle::GaussianDataSpec;
use crate::sampler::IntegratorConfig;

pub const IMAGE_SIDE: usize = 32;
pub const TIME_EMBED: usize = 16;

/// Global MLP with a narrow bottleneck (21 784 parameters).
pub fn desk_mlp() -> ModelSpec {
    ModelSpec::image_mlp(IMAGE_SIDE, vec![10, 10], TIME_EMBED)
}

/// Patch mixer with 16x16 patches, 4 tokens (21 688 parameters).
pub fn desk_mixer_p16() -> ModelSpec {
    ModelSpec::patch_mixer(IMAGE_SIDE, 16, 32, 2, 8, 32, TIME_EMBED)
}

/// Patch mixer with 4x4 patches, 64 tokens (22 448 parameters).
pub fn desk_mixer_p4() -> ModelSpec {
    ModelSpec::patch_mixer(IMAGE_SIDE, 4, 32, 2, 48, 48, TIME_EMBED)
}

/// MLP whose hidden layer is as wide as the image.
pub fn wide_mlp() -> ModelSpec {
    ModelSpec::image_mlp(IMAGE_SIDE, vec![IMAGE_SIDE * IMAGE_SIDE], TIME_EMBED)
}

pub fn fourier_dataset(m: usize, train_size: usize) -> DatasetConfig {
    DatasetConfig::Fourier {
        spec: FourierManifoldSpec::new(IMAGE_SIDE, m),
        train_size,
        eval_size: 500,
    }
}

pub fn default_eval() -> EvalConfig {
    EvalConfig {
        psnr_times: DEFAULT_PSNR_TIMES.to_vec(),
        n_eval: 500,
        eval_seed: 1,
        on_train: false,
        gen_count: 0,
        integrator: IntegratorConfig::euler(200),
        gen_seed: 2,
    }
}

/// Fourier-32 run trained with the flow-matching loss (`w_vel`).
pub fn fourier_run(m: usize, model: ModelSpec, class: ParamClass, iterations: usize, seed: u64) -> RunConfig {
    RunConfig {
        dataset: fourier_dataset(m, 1000),
        model,
        weighting: WeightingScheme::Vel,
        class,
        optim: OptimConfig {
            lr_schedule: LrSchedule::Constant,
            lr: 2e-3,
            batch_size: 32,
            iterations,
            ema_decay: 0.99,
            log_every: 100,
        },
        t_clamp: [1e-3, 1.0 - 1e-3],
        seed,
        init_seed: 0,
        eval: default_eval(),
        output_dir: None,
    }
}

/// Gaussian toy run with fresh samples every step.
pub fn gaussian_run(tau: f64, dim: usize, weighting: WeightingScheme, iterations: usize, seed: u64) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig::Gaussian {
            spec: GaussianDataSpec { tau, dim },
            train_size: None,
            eval_size: 500,
            data_seed: seed,
        },
        model: ModelSpec::mlp(dim, vec![64, 64], TIME_EMBED),
        weighting,
        class: ParamClass::Vel,
        // low-weight times (small t under w_noise) converge slowly; the
        // cosine decay from a high peak lets them settle within 20k steps
        optim: OptimConfig {
            lr_schedule: LrSchedule::Cosine,
            lr: 8e-3,
            batch_size: 512,
            iterations,
            ema_decay: 0.999,
            log_every: 500,
        },
        t_clamp: [1e-3, 1.0 - 1e-3],
        seed,
        init_seed: 0,
        eval: default_eval(),
        output_dir: None,
    }
}

fn grid(name: &str, base: RunConfig) -> GridSpec {
    GridSpec {
        name: name.into(),
        weightings: vec![base.weighting],
        classes: vec![base.class],
        models: vec![base.model.clone()],
        train_sizes: Vec::new(),
        seeds: vec![base.seed],
        base,
    }
}

/// Every weighting with the velocity parametrization.
pub fn weighting_study(m: usize, model: ModelSpec, iterations: usize, seeds: Vec<u64>) -> GridSpec {
    let mut g = grid("weighting_study", fourier_run(m, model, ParamClass::Vel, iterations, 0));
    g.weightings = vec![
        WeightingScheme::Den,
        WeightingScheme::Vel,
        WeightingScheme::Noise,
        WeightingScheme::Classic {
            sigma_max: crate::objectives::DEFAULT_SIGMA_MAX,
        },
        WeightingScheme::Power { p: 1.0 },
        WeightingScheme::Power { p: 3.0 },
    ];
    g.seeds = seeds;
    g
}

/// Clean versus velocity prediction across the three matched models.
pub fn locality_study(m: usize, iterations: usize, seeds: Vec<u64>) -> GridSpec {
    let mut g = grid("locality_study", fourier_run(m, desk_mlp(), ParamClass::Den, iterations, 0));
    g.classes = vec![ParamClass::Den, ParamClass::Vel];
    g.models = vec![desk_mlp(), desk_mixer_p16(), desk_mixer_p4()];
    g.seeds = seeds;
    g
}

/// Clean versus velocity prediction for several training-set sizes under
/// one iteration budget.
pub fn dataset_size_study(m: usize, sizes: Vec<usize>, iterations: usize, seeds: Vec<u64>) -> GridSpec {
    let mut g = grid("dataset_size_study", fourier_run(m, desk_mlp(), ParamClass::Den, iterations, 0));
    g.classes = vec![ParamClass::Den, ParamClass::Vel];
    g.train_sizes = sizes;
    g.seeds = seeds;
    g
}

/// Named presets for the command line.
pub fn named_grid(name: &str, output_dir: Option<PathBuf>) -> Option<GridSpec> {
    let mut g = match name {
        "weighting" => weighting_study(8, wide_mlp(), 1500, vec![0, 1, 2]),
        "locality" => locality_study(4, 1500, vec![0, 1, 2]),
        "dataset-size" => dataset_size_study(4, vec![100, 1000, 10000], 1500, vec![0]),
        _ => return None,
    };
    g.base.output_dir = output_dir;
    Some(g)
}
