use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Data, RunConfig};
use crate::error::{Error, Result};
use crate::models::{FrozenModel, Model};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{AdamConfig, ParamStore, Tape, Tensor};
use crate::objectives::{sample_time, unified_loss, InterpolantBatch};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    /// The network used for evaluation (EMA weights when present).
    pub fn frozen(&self, config: &RunConfig) -> Result<FrozenModel> {
        Ok(FrozenModel {
            model: Model::new(config.model.clone())?,
            params: self.store.eval_values(),
        })
    }
}

/// Initial parameters of `config.model` drawn from `config.init_seed`.
pub fn init_store(config: &RunConfig) -> Result<ParamStore> {
    let model = Model::new(config.model.clone())?;
    Ok(model.init_params(&mut ChaCha8Rng::seed_from_u64(config.init_seed)))
}

/// Plain training loop: minibatch, per-example time, interpolant, unified
/// loss, backward, Adam, EMA. Writes a checkpoint and log when the config
/// names an output directory.
pub fn train(config: &RunConfig, data: &Data) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.model.clone())?;
    if data.dim != config.model.input.dim() {
        return Err(Error::Config(format!(
            "data dimension {} does not match model input {}",
            data.dim,
            config.model.input.dim()
        )));
    }
    let mut store = init_store(config)?;
    let mut adam = AdamConfig::with_lr(config.optim.lr);
    let [lo, hi] = config.t_clamp;
    let b = config.optim.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // fresh samples for streamed sources come from their own stream
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(7);

    let mut log = Vec::new();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    for step in 0..config.optim.iterations {
        let x1 = match &data.train {
            Some(train) => {
                let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..train.rows())).collect();
                train.gather_rows(&idx)
            }
            None => stream_batch(config, b, &mut data_rng)?,
        };
        let x0 = Tensor::randn(&[b, data.dim], &mut rng);
        let t = (0..b).map(|_| sample_time(&mut rng, lo, hi)).collect::<Result<Vec<_>>>()?;
        let batch = InterpolantBatch::new(x0, x1, t)?;

        let mut tape = Tape::new();
        let vars = store
            .values()
            .into_iter()
            .map(|v| tape.var(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = unified_loss(&mut tape, &batch, config.class, &config.weighting, |tape, xt, t| {
            model.forward_tape(tape, &vars, xt, t)
        })
        .map_err(|e| diverged(step, e))?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward_scalar(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(store.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        adam.lr = config.optim.lr * config.optim.lr_schedule.factor(step, config.optim.iterations);
        store.adam_step(&grads, &adam).map_err(|e| diverged(step, e))?;
        store.ema_update(config.optim.ema_decay)?;

        acc += value;
        acc_n += 1;
        if (step + 1) % config.optim.log_every == 0 || step + 1 == config.optim.iterations {
            log.push(LogEntry {
                step: step + 1,
                loss: acc / acc_n as f64,
            });
            acc = 0.0;
            acc_n = 0;
        }
    }

    let outcome = TrainOutcome { store, log };
    if let Some(dir) = config.resolved_output_dir() {
        persist(config, &outcome, &dir)?;
    }
    Ok(outcome)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteLoss(detail) => Error::Diverged { step, detail },
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn stream_batch(config: &RunConfig, b: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    use super::config::DatasetConfig;
    use crate::datasets::{sample_gaussian_data, sample_mixture2d};
    match &config.dataset {
        DatasetConfig::Gaussian { spec, .. } => sample_gaussian_data(spec, b, rng),
        DatasetConfig::Mixture { centers, weights, std, .. } => sample_mixture2d(centers, weights, *std, b, rng),
        _ => Err(Error::Config("dataset has no streaming sampler".into())),
    }
}

pub fn persist(config: &RunConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_json()?)?;
    let meta = serde_json::to_value(config)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.store, meta)?;
    write_log(std::fs::File::create(dir.join(LOG_FILE))?, &outcome.log)
}

/// Loads a checkpoint written by [`train`] with its run configuration.
pub fn load_run(path: &Path) -> Result<(RunConfig, ParamStore)> {
    let (store, meta) = load_checkpoint(path)?;
    let config: RunConfig = serde_json::from_value(meta)?;
    Ok((config, store))
}

/// Writes the log as CSV to any sink.
pub fn write_log<W: Write>(w: W, log: &[LogEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
