use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Cell, Data, GridSpec, RunConfig};
use super::train::{train, TrainOutcome};
use crate::error::{Error, Result};
use crate::fields::ClassDenoiser;
use crate::metrics::{moment_distance, psnr_curve, residual_energy_stats, MomentDistance, PsnrCurve, ResidualStats};
use crate::models::param_count;
use crate::sampler::generate;

/// Quality measurements of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub psnr: PsnrCurve,
    pub moments: Option<MomentDistance>,
    pub residual: Option<ResidualStats>,
    /// Why generation-based statistics are missing.
    pub generation_failure: Option<String>,
}

/// PSNR curve on the configured set, then (if requested) generated-sample
/// statistics. A diverging sampler is recorded, not raised.
pub fn evaluate(config: &RunConfig, data: &Data, outcome: &TrainOutcome) -> Result<Evaluation> {
    let net = outcome.frozen(config)?;
    let clamp = config.clamp()?;
    let e = &config.eval;
    let set = match (&data.train, e.on_train) {
        (Some(train), true) => train,
        _ => &data.eval,
    };
    let n = e.n_eval.min(set.rows());
    let den = ClassDenoiser::new(&net, config.class, clamp.clone());
    let psnr = psnr_curve(&den, set, &e.psnr_times, n, e.eval_seed)?;

    let mut out = Evaluation {
        psnr,
        moments: None,
        residual: None,
        generation_failure: None,
    };
    if e.gen_count == 0 {
        return Ok(out);
    }
    match generate(&net, config.class, &clamp, e.gen_count, data.dim, &e.integrator, e.gen_seed) {
        Ok(samples) => {
            let k = data.eval.rows().min(e.gen_count.max(2));
            let reference = data.eval.gather_rows(&(0..k).collect::<Vec<_>>());
            out.moments = Some(moment_distance(&samples, &reference)?);
            if let (Some(modes), Some(floor)) = (&data.mode_set, &data.floor) {
                out.residual = Some(residual_energy_stats(&samples, modes, floor)?);
            }
        }
        Err(err @ Error::SamplerDiverged { .. }) => out.generation_failure = Some(err.to_string()),
        Err(other) => return Err(other),
    }
    Ok(out)
}

/// One row of a grid result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: usize,
    pub label: String,
    pub dataset: String,
    pub train_size: Option<usize>,
    pub model: String,
    pub params: usize,
    pub weighting: String,
    pub class: String,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub psnr_times: Vec<f64>,
    pub psnr: Vec<f64>,
    pub mean_err: Option<f64>,
    pub cov_err: Option<f64>,
    pub energy_distance: Option<f64>,
    pub residual_mean: Option<f64>,
    pub residual_median: Option<f64>,
    pub residual_ratio: Option<f64>,
    /// `ok`, or the reason the cell (or its generation step) failed.
    pub status: String,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn psnr_at(&self, t: f64) -> Option<f64> {
        self.psnr_times.iter().position(|&s| s == t).map(|i| self.psnr[i])
    }

    pub fn curve(&self, n_eval: usize, seed: u64) -> PsnrCurve {
        PsnrCurve {
            times: self.psnr_times.clone(),
            psnr: self.psnr.clone(),
            n_eval,
            seed,
        }
    }
}

pub fn model_label(config: &RunConfig) -> String {
    use crate::models::ModelVariant;
    match &config.model.variant {
        ModelVariant::Mlp { hidden, .. } => format!(
            "mlp[{}]",
            hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-")
        ),
        ModelVariant::PatchMixer { patch, depth, .. } => format!("mixer_p{patch}_d{depth}"),
    }
}

/// Trains and evaluates one configuration; failures become the status.
pub fn run_cell(index: usize, label: &str, config: &RunConfig) -> CellResult {
    let mut row = CellResult {
        index,
        label: label.to_string(),
        dataset: config.dataset.label(),
        train_size: config.dataset.train_size(),
        model: model_label(config),
        params: param_count(&config.model),
        weighting: config.weighting.to_string(),
        class: config.class.to_string(),
        seed: config.seed,
        iterations: config.optim.iterations,
        final_loss: None,
        psnr_times: config.eval.psnr_times.clone(),
        psnr: Vec::new(),
        mean_err: None,
        cov_err: None,
        energy_distance: None,
        residual_mean: None,
        residual_median: None,
        residual_ratio: None,
        status: "ok".into(),
    };
    let result = (|| -> Result<(TrainOutcome, Evaluation)> {
        let data = config.dataset.materialize()?;
        let outcome = train(config, &data)?;
        let eval = evaluate(config, &data, &outcome)?;
        Ok((outcome, eval))
    })();
    match result {
        Ok((outcome, eval)) => {
            row.final_loss = outcome.log.last().map(|e| e.loss);
            row.psnr = eval.psnr.psnr;
            if let Some(m) = eval.moments {
                row.mean_err = Some(m.mean_err);
                row.cov_err = Some(m.cov_err);
                row.energy_distance = Some(m.energy_distance);
            }
            if let Some(r) = eval.residual {
                row.residual_mean = Some(r.mean);
                row.residual_median = Some(r.median);
                row.residual_ratio = Some(r.baseline_ratio);
            }
            if let Some(f) = eval.generation_failure {
                row.status = f;
            }
        }
        Err(e) => row.status = e.to_string(),
    }
    row
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResults {
    pub name: String,
    pub n_eval: usize,
    pub eval_seed: u64,
    pub rows: Vec<CellResult>,
}

/// Runs every cell in a worker pool and returns rows in cell order. A
/// failing cell yields a row with its failure reason.
pub fn run_grid(grid: &GridSpec) -> Result<GridResults> {
    let cells = grid.cells()?;
    Ok(GridResults {
        name: grid.name.clone(),
        n_eval: grid.base.eval.n_eval,
        eval_seed: grid.base.eval.eval_seed,
        rows: run_cells(&cells),
    })
}

pub fn run_cells(cells: &[Cell]) -> Vec<CellResult> {
    let mut rows: Vec<CellResult> = cells
        .par_iter()
        .map(|c| run_cell(c.index, &c.label, &c.config))
        .collect();
    rows.sort_by_key(|r| r.index);
    rows
}
