use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fmweights::datasets::{DatasetFile, DatasetSource};
use fmweights::fields::ClassDenoiser;
use fmweights::harness::config::resolve_output;
use fmweights::harness::grid::model_label;
use fmweights::harness::presets;
use fmweights::harness::report::{delta_psnr_groups, delta_psnr_svg, psnr_curves_svg};
use fmweights::harness::{emit_report, load_run, run_grid, train, CellResult, DatasetConfig, GridSpec, RunConfig};
use fmweights::metrics::psnr_curve;
use fmweights::models::{param_count, FrozenModel, Model};
use fmweights::oracle::{optimal_weight, posterior_mean_coeff, posterior_variance};
use fmweights::sampler::{generate, IntegratorConfig, Method};
use fmweights::{Error, Result};

#[derive(Parser)]
#[command(name = "fmweights", version, about = "Weighted-denoising objectives for flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a JSON config; writes checkpoint, log and config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of cells and write the report.
    Grid(GridArgs),
    /// Integrate a trained model from noise into a dataset file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value = "euler")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR curves of one or more checkpoints on common noise.
    EvalPsnr {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Evaluate on the training set instead of held-out samples.
        #[arg(long)]
        on_train: bool,
    },
    /// Write a dataset file.
    GenDataset {
        /// Dataset config (JSON).
        #[arg(long, conflicts_with = "fourier")]
        config: Option<PathBuf>,
        /// Shortcut: Fourier-32 manifold with this many active modes.
        #[arg(long)]
        fourier: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian posterior table as CSV on stdout.
    OracleCheck {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        tau: Vec<f64>,
        #[arg(long, default_value_t = 11)]
        points: usize,
    },
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// One of `weighting`, `locality`, `dataset-size`.
    #[arg(long)]
    preset: Option<String>,
    /// Report directory (relative paths resolve against the output root).
    #[arg(long)]
    out: PathBuf,
    /// Only write the grid spec instead of running it.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            if cfg.output_dir.is_none() {
                return Err(Error::Usage("no output directory: set output_dir or pass --out".into()));
            }
            let data = cfg.dataset.materialize()?;
            let outcome = train(&cfg, &data)?;
            if let Some(last) = outcome.log.last() {
                println!("step {} loss {}", last.step, last.loss);
            }
            println!("wrote {}", cfg.resolved_output_dir().unwrap().display());
            Ok(())
        }
        Command::Grid(args) => grid(args),
        Command::Sample {
            checkpoint,
            count,
            steps,
            method,
            seed,
            out,
        } => {
            let (cfg, store) = load_run(&checkpoint)?;
            let net = frozen(&cfg, &store)?;
            let integrator = IntegratorConfig {
                method,
                steps,
                ..IntegratorConfig::default()
            };
            let samples = generate(&net, cfg.class, &cfg.clamp()?, count, cfg.model.input.dim(), &integrator, seed)?;
            let data = cfg.dataset.materialize()?;
            let file = DatasetFile {
                header: fmweights::datasets::DatasetHeader {
                    source: DatasetSource::Generated {
                        checkpoint: checkpoint.display().to_string(),
                        steps,
                        method: method.to_string(),
                        seed,
                    },
                    shape: vec![samples.rows(), samples.row_len()],
                    mode_set: data.mode_set,
                    residual_floor: data.floor,
                },
                samples,
            };
            let out = resolve_output(&out);
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            file.save(&out)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::EvalPsnr {
            checkpoint,
            out,
            n,
            seed,
            times,
            on_train,
        } => eval_psnr(&checkpoint, &out, n, seed, times, on_train),
        Command::GenDataset {
            config,
            fourier,
            count,
            out,
        } => {
            let ds: DatasetConfig = match (config, fourier) {
                (Some(p), _) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                (None, Some(m)) => presets::fourier_dataset(m, count),
                (None, None) => return Err(Error::Usage("pass --config or --fourier".into())),
            };
            let file = ds.materialize()?.to_file();
            let out = resolve_output(&out);
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            file.save(&out)?;
            println!("wrote {} samples to {}", file.samples.rows(), out.display());
            Ok(())
        }
        Command::OracleCheck { tau, points } => {
            if points < 2 {
                return Err(Error::Usage("--points must be at least 2".into()));
            }
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            w.write_record(["tau", "t", "coeff", "posterior_variance", "optimal_weight"])?;
            for &tau in &tau {
                for k in 0..points {
                    // open interval: the endpoints are degenerate
                    let t = 1e-3 + (1.0 - 2e-3) * k as f64 / (points - 1) as f64;
                    w.write_record([
                        tau.to_string(),
                        t.to_string(),
                        posterior_mean_coeff(t, tau).to_string(),
                        posterior_variance(t, tau).to_string(),
                        optimal_weight(t, tau).to_string(),
                    ])?;
                }
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn grid(args: GridArgs) -> Result<()> {
    let out = resolve_output(&args.out);
    let spec = match (&args.config, &args.preset) {
        (Some(p), _) => GridSpec::load(p)?,
        (None, Some(name)) => presets::named_grid(name, None)
            .ok_or_else(|| Error::Usage(format!("unknown preset `{name}`")))?,
        (None, None) => return Err(Error::Usage("pass --config or --preset".into())),
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("grid.json"), serde_json::to_string_pretty(&spec)?)?;
    if args.dry_run {
        println!("{} cells", spec.cells()?.len());
        return Ok(());
    }
    let results = run_grid(&spec)?;
    for r in &results.rows {
        println!("{:<40} {}", r.label, r.status);
    }
    for p in emit_report(&results, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn frozen(cfg: &RunConfig, store: &fmweights::nn::ParamStore) -> Result<FrozenModel> {
    Ok(FrozenModel {
        model: Model::new(cfg.model.clone())?,
        params: store.eval_values(),
    })
}

fn eval_psnr(
    checkpoints: &[PathBuf],
    out: &Path,
    n: Option<usize>,
    seed: Option<u64>,
    times: Option<Vec<f64>>,
    on_train: bool,
) -> Result<()> {
    let out = resolve_output(out);
    std::fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    let mut w = csv::Writer::from_path(out.join("psnr.csv"))?;
    w.write_record(["checkpoint", "t", "psnr", "n", "seed"])?;
    for (index, path) in checkpoints.iter().enumerate() {
        let (cfg, store) = load_run(path)?;
        let net = frozen(&cfg, &store)?;
        let data = cfg.dataset.materialize()?;
        let set = match (&data.train, on_train) {
            (Some(train), true) => train,
            _ => &data.eval,
        };
        let n = n.unwrap_or(cfg.eval.n_eval).min(set.rows());
        let seed = seed.unwrap_or(cfg.eval.eval_seed);
        let times = times.clone().unwrap_or_else(|| cfg.eval.psnr_times.clone());
        let den = ClassDenoiser::new(&net, cfg.class, cfg.clamp()?);
        let curve = psnr_curve(&den, set, &times, n, seed)?;
        let label = path.display().to_string();
        for (t, p) in curve.times.iter().zip(&curve.psnr) {
            w.write_record([label.clone(), t.to_string(), p.to_string(), n.to_string(), seed.to_string()])?;
        }
        rows.push(CellResult {
            index,
            label,
            dataset: cfg.dataset.label(),
            train_size: cfg.dataset.train_size(),
            model: model_label(&cfg),
            params: param_count(&cfg.model),
            weighting: cfg.weighting.to_string(),
            class: cfg.class.to_string(),
            seed: cfg.seed,
            iterations: cfg.optim.iterations,
            final_loss: None,
            psnr_times: curve.times,
            psnr: curve.psnr,
            mean_err: None,
            cov_err: None,
            energy_distance: None,
            residual_mean: None,
            residual_median: None,
            residual_ratio: None,
            status: "ok".into(),
        });
    }
    w.flush()?;
    std::fs::write(out.join("psnr.svg"), psnr_curves_svg(&rows))?;
    if !delta_psnr_groups(&rows).is_empty() {
        std::fs::write(out.join("delta_psnr.svg"), delta_psnr_svg(&rows))?;
    }
    writeln!(std::io::stdout(), "wrote {}", out.display())?;
    Ok(())
}
