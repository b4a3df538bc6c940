//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmweights::datasets::fourier::{sample_pre_tanh, spectral_residual};
use fmweights::datasets::{select_modes, FourierManifoldSpec};
use fmweights::fields::{ClassDenoiser, Denoiser, Network};
use fmweights::harness::presets::{self, desk_mixer_p16, desk_mixer_p4, desk_mlp, wide_mlp};
use fmweights::harness::{evaluate, run_grid, train, Data, RunConfig};
use fmweights::metrics::psnr_curve;
use fmweights::models::{FrozenModel, Model, ModelSpec};
use fmweights::nn::{forward, Tape, Tensor};
use fmweights::objectives::{unified_loss, InterpolantBatch, ParamClass, TimeClamp, WeightingScheme};
use fmweights::oracle::{
    gaussian_flow_map, ideal_denoiser_gaussian, optimal_weight, posterior_variance, EmpiricalPosterior,
    GaussianOracle,
};
use fmweights::sampler::{initial_noise, integrate, integrate_class, IntegratorConfig};

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, elapsed: Duration, limit: Duration, outcome: Outcome) {
        let secs = elapsed.as_secs_f64();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; runtime {secs:.1}s exceeds {:.0}s", limit.as_secs_f64())),
            o => o,
        };
        match outcome {
            Ok(d) => println!("criterion {id:>2} {name}: PASS ({d}; {secs:.1}s)"),
            Err(d) => {
                self.failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({d}; {secs:.1}s)");
            }
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let s = Instant::now();
    let v = f();
    (v, s.elapsed())
}

fn random_store(model: &Model, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    // every parameter random, including the zero-initialized head
    model
        .spec
        .param_shapes()
        .iter()
        .map(|(_, s)| Tensor::randn(s, rng).scale(0.5))
        .collect()
}

fn loss_value(model: &Model, params: &[Tensor], batch: &InterpolantBatch, class: ParamClass, w: &WeightingScheme) -> f64 {
    let mut tape = Tape::new();
    let (_, out) = forward(&mut tape, params, |tape, vars| {
        unified_loss(tape, batch, class, w, |tape, xt, t| model.forward_tape(tape, vars, xt, t))
    })
    .expect("loss");
    tape.value(out).data()[0]
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let specs: Vec<ModelSpec> = (0..20)
        .map(|i| match i % 4 {
            0 => ModelSpec::mlp(3, vec![5, 4], 4),
            1 => {
                let mut s = ModelSpec::mlp(2, vec![6], 2);
                if let fmweights::models::ModelVariant::Mlp { activation, .. } = &mut s.variant {
                    *activation = fmweights::models::Activation::Tanh;
                }
                s
            }
            2 => ModelSpec::patch_mixer(4, 2, 5, 1, 3, 6, 2),
            _ => ModelSpec::patch_mixer(4, 4, 3, 2, 2, 4, 4),
        })
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, spec) in specs.into_iter().enumerate() {
        let model = Model::new(spec).map_err(|e| e.to_string())?;
        let params = random_store(&model, &mut rng);
        let d = model.spec.input.dim();
        let b = 3;
        let t: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..0.9)).collect();
        let batch = InterpolantBatch::new(Tensor::randn(&[b, d], &mut rng), Tensor::randn(&[b, d], &mut rng), t)
            .map_err(|e| e.to_string())?;
        let class = ParamClass::ALL[i % 3];
        let w = [WeightingScheme::Vel, WeightingScheme::Den, WeightingScheme::Noise][i % 3];

        let mut tape = Tape::new();
        let (vars, out) = forward(&mut tape, &params, |tape, vars| {
            unified_loss(tape, &batch, class, &w, |tape, xt, t| model.forward_tape(tape, vars, xt, t))
        })
        .map_err(|e| e.to_string())?;
        let grads = tape.backward_scalar(out).map_err(|e| e.to_string())?;
        for (k, v) in vars.iter().enumerate() {
            let g = grads.get_or_zeros(*v, params[k].shape());
            for j in 0..params[k].numel().min(12) {
                let h = 1e-6;
                let mut p = params.to_vec();
                p[k].data_mut()[j] += h;
                let up = loss_value(&model, &p, &batch, class, &w);
                p[k].data_mut()[j] -= 2.0 * h;
                let down = loss_value(&model, &p, &batch, class, &w);
                let fd = (up - down) / (2.0 * h);
                let ad = g.data()[j];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let d = format!("max relative error {worst:.2e} over {checked} coordinates of 20 nets");
    if worst <= 1e-4 {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_prod = 0.0f64;
    let mut worst_diff = 0.0f64;
    for _ in 0..100 {
        let t: f64 = rng.gen_range(1e-3..1.0 - 1e-3);
        let tau: f64 = rng.gen_range(0.1..10.0);
        let ow = optimal_weight(t, tau);
        worst_prod = worst_prod.max((ow * posterior_variance(t, tau) - 1.0).abs());
        let wn = WeightingScheme::Noise.value(t).map_err(|e| e.to_string())?;
        // rounding of the two terms scales with their magnitude
        worst_diff = worst_diff.max((ow - wn - 1.0 / (tau * tau)).abs() / ow.max(1.0));
    }
    let d = format!("|w* sigma^2 - 1| <= {worst_prod:.1e}, |w* - w_noise - 1/tau^2| / max(1, w*) <= {worst_diff:.1e}");
    if worst_prod <= 1e-12 && worst_diff <= 1e-12 {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_3() -> Outcome {
    let tau = 1.5;
    let weightings = [
        WeightingScheme::Vel,
        WeightingScheme::Noise,
        WeightingScheme::Den,
        WeightingScheme::Classic { sigma_max: 19.0 },
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for w in weightings {
        let cfg = presets::gaussian_run(tau, 2, w, 20_000, 0);
        let data = cfg.dataset.materialize().map_err(|e| e.to_string())?;
        let outcome = train(&cfg, &data).map_err(|e| e.to_string())?;
        let net = outcome.frozen(&cfg).map_err(|e| e.to_string())?;
        let den = ClassDenoiser::new(&net, ParamClass::Vel, TimeClamp::default());
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut errs = Vec::new();
        for t in [0.2, 0.5, 0.8] {
            let x1 = Tensor::randn(&[500, 2], &mut rng).scale(tau);
            let x0 = Tensor::randn(&[500, 2], &mut rng);
            let xt = x0.zip_map(&x1, |a, b| (1.0 - t) * a + t * b).unwrap();
            let learned = den.denoise(&xt, t).map_err(|e| e.to_string())?;
            let ideal = ideal_denoiser_gaussian(&xt, t, tau);
            let rel = (learned.sub(&ideal).unwrap().sum_sq() / ideal.sum_sq()).sqrt();
            // below the classic support the objective carries no information
            if t >= w.t_min() && rel > 0.05 {
                ok = false;
            }
            errs.push(format!("{rel:.3}"));
        }
        detail.push(format!("{w}: [{}]", errs.join(", ")));
    }
    let d = format!("relative L2 at t=0.2/0.5/0.8: {}", detail.join("; "));
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_4() -> Outcome {
    let field = GaussianOracle { tau: 1.0 };
    let x0 = initial_noise(10_000, 2, 404);
    let out = integrate(&field, &x0, &IntegratorConfig::euler(200)).map_err(|e| e.to_string())?;
    let n = out.rows() as f64;
    let mut mu = [0.0; 2];
    for i in 0..out.rows() {
        mu[0] += out.row(i)[0] / n;
        mu[1] += out.row(i)[1] / n;
    }
    let mut cov = [[0.0; 2]; 2];
    for i in 0..out.rows() {
        let r = out.row(i);
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (r[a] - mu[a]) * (r[b] - mu[b]) / (n - 1.0);
            }
        }
    }
    let mean_norm = (mu[0] * mu[0] + mu[1] * mu[1]).sqrt();
    let cov_err = ((cov[0][0] - 1.0).powi(2) + (cov[1][1] - 1.0).powi(2) + 2.0 * cov[0][1].powi(2)).sqrt()
        / 2f64.sqrt();
    let exact = gaussian_flow_map(&x0, 1.0, 1.0);
    let err = |steps| {
        let o = integrate(&field, &x0, &IntegratorConfig::euler(steps)).unwrap();
        (o.sub(&exact).unwrap().sum_sq() / o.numel() as f64).sqrt()
    };
    let ratio = err(100) / err(200);
    let d = format!("|mean| {mean_norm:.4}, covariance error {:.2}%, order ratio {ratio:.3}", 100.0 * cov_err);
    if mean_norm <= 0.05 && cov_err <= 0.05 && (1.7..=2.3).contains(&ratio) {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let model = Model::new(ModelSpec::mlp(4, vec![8, 8], 4)).map_err(|e| e.to_string())?;
    let g = FrozenModel {
        params: random_store(&model, &mut rng),
        model,
    };
    let per_row = |x: &Tensor, t: &[f64], f: &dyn Fn(f64, f64, f64) -> f64| -> fmweights::Result<Tensor> {
        let gx = g.output(x, t)?;
        let w = x.row_len();
        let data = x
            .data()
            .iter()
            .zip(gx.data())
            .enumerate()
            .map(|(i, (&xv, &gv))| f(xv, gv, if t.len() == 1 { t[0] } else { t[i / w] }))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    let n_den = |x: &Tensor, t: &[f64]| per_row(x, t, &|_, g, _| g);
    let n_vel = |x: &Tensor, t: &[f64]| per_row(x, t, &|x, g, t| (g - x) / (1.0 - t));
    let n_noise = |x: &Tensor, t: &[f64]| per_row(x, t, &|x, g, t| (x - t * g) / (1.0 - t));
    let nets: [(&dyn Network, ParamClass); 3] =
        [(&n_den, ParamClass::Den), (&n_vel, ParamClass::Vel), (&n_noise, ParamClass::Noise)];
    let clamp = TimeClamp::default();

    let x = Tensor::randn(&[16, 4], &mut rng);
    let mut d_err = 0.0f64;
    for t in [1e-3, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0 - 1e-3] {
        let ds: Vec<Tensor> = nets
            .iter()
            .map(|(n, c)| ClassDenoiser::new(*n, *c, clamp.clone()).denoise(&x, t))
            .collect::<fmweights::Result<_>>()
            .map_err(|e| e.to_string())?;
        d_err = d_err.max(ds[0].max_abs_diff(&ds[1])).max(ds[0].max_abs_diff(&ds[2]));
    }
    let x0 = initial_noise(64, 4, 5);
    let cfg = IntegratorConfig::euler(200);
    let trajs: Vec<Tensor> = nets
        .iter()
        .map(|(n, c)| integrate_class(*n, *c, &clamp, &x0, &cfg))
        .collect::<fmweights::Result<_>>()
        .map_err(|e| e.to_string())?;
    let traj_err = trajs[0].max_abs_diff(&trajs[1]).max(trajs[0].max_abs_diff(&trajs[2]));
    let d = format!("denoiser max diff {d_err:.1e}, trajectory max diff {traj_err:.1e}");
    if d_err <= 1e-10 && traj_err <= 1e-8 {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_6() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    let mut worst_res = 0.0f64;
    for m in [4, 8, 16] {
        let spec = FourierManifoldSpec::new(32, m);
        let modes = select_modes(&spec).map_err(|e| e.to_string())?;
        let dof = modes.real_dof();
        let rows = dof + 20;
        let mut rng = ChaCha8Rng::seed_from_u64(600 + m as u64);
        let mut data = Vec::with_capacity(rows * 1024);
        for _ in 0..rows {
            let img = sample_pre_tanh(&spec, &modes, &mut rng).map_err(|e| e.to_string())?;
            worst_res = worst_res.max(spectral_residual(&img, &modes).map_err(|e| e.to_string())?);
            data.extend(img);
        }
        let mat = DMatrix::from_row_slice(rows, 1024, &data);
        let sv = mat.singular_values();
        let top = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-10 * top).count();
        ok &= rank == dof;
        detail.push(format!("m={m}: rank {rank} / dof {dof}"));
    }
    ok &= worst_res <= 1e-20;
    let d = format!("{}; max on-support E_res {worst_res:.1e}", detail.join(", "));
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_7() -> Outcome {
    let mut grid = presets::weighting_study(8, wide_mlp(), 1500, vec![0, 1, 2]);
    grid.weightings = vec![WeightingScheme::Vel, WeightingScheme::Classic { sigma_max: 19.0 }];
    let res = run_grid(&grid).map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    for seed in [0, 1, 2] {
        let at = |w: &str| {
            res.rows
                .iter()
                .find(|r| r.seed == seed && r.weighting == w && r.is_ok())
                .and_then(|r| r.psnr_at(0.9))
        };
        match (at("w_vel"), at("w_classic:19")) {
            (Some(v), Some(c)) => gaps.push(v - c),
            _ => return Err(format!("seed {seed}: missing result rows {:?}", res.rows)),
        }
    }
    let d = format!(
        "PSNR(w_vel) - PSNR(w_classic) at t=0.9 per seed: [{}] dB",
        gaps.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>().join(", ")
    );
    if gaps.iter().all(|&g| g >= 0.5) {
        Ok(d)
    } else {
        Err(d)
    }
}

struct TrainedCell {
    model: &'static str,
    class: ParamClass,
    seed: u64,
    test: Vec<f64>,
    train: Vec<f64>,
    failure: Option<String>,
}

fn train_fourier_cells(data: &Data) -> Vec<TrainedCell> {
    let mut specs: Vec<(&'static str, ModelSpec, ParamClass)> = Vec::new();
    for (name, m) in [("mlp", desk_mlp()), ("p16", desk_mixer_p16()), ("p4", desk_mixer_p4())] {
        for class in [ParamClass::Den, ParamClass::Vel] {
            specs.push((name, m.clone(), class));
        }
    }
    specs.push(("mlp", desk_mlp(), ParamClass::Noise));
    let mut cells = Vec::new();
    for (name, model, class) in specs {
        for seed in [0, 1, 2] {
            let cfg: RunConfig = presets::fourier_run(4, model.clone(), class, 1500, seed);
            let run = train(&cfg, data).and_then(|o| {
                let test = evaluate(&cfg, data, &o)?.psnr.psnr;
                let mut on_train = cfg.clone();
                on_train.eval.on_train = true;
                let train = evaluate(&on_train, data, &o)?.psnr.psnr;
                Ok((test, train))
            });
            let (test, train, failure) = match run {
                Ok((a, b)) => (a, b, None),
                Err(e) => (Vec::new(), Vec::new(), Some(e.to_string())),
            };
            cells.push(TrainedCell {
                model: name,
                class,
                seed,
                test,
                train,
                failure,
            });
        }
    }
    cells
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_8(cells: &[TrainedCell]) -> Outcome {
    let delta = |model: &str, seed: u64| -> Option<Vec<f64>> {
        let get = |c: ParamClass| {
            cells
                .iter()
                .find(|x| x.model == model && x.class == c && x.seed == seed && x.failure.is_none())
                .map(|x| x.test.clone())
        };
        let (d, v) = (get(ParamClass::Den)?, get(ParamClass::Vel)?);
        Some(d.iter().zip(&v).map(|(a, b)| a - b).collect())
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for seed in [0, 1, 2] {
        let (Some(p16), Some(p4), Some(mlp)) = (delta("p16", seed), delta("p4", seed), delta("mlp", seed)) else {
            return Err(format!("seed {seed}: a den/vel cell failed"));
        };
        let positive = mlp.iter().filter(|&&d| d > 0.0).count();
        ok &= mean(&p16) > mean(&p4) && 2 * positive > mlp.len();
        detail.push(format!(
            "seed {seed}: mean dPSNR p16 {:.2} vs p4 {:.2}, MLP positive at {positive}/{}",
            mean(&p16),
            mean(&p4),
            mlp.len()
        ));
    }
    let d = detail.join("; ");
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_9(cells: &[TrainedCell], data: &Data) -> Outcome {
    let train = data.train.as_ref().ok_or("no training set")?;
    let e = presets::default_eval();
    let oracle = EmpiricalPosterior { data: train };
    let n = e.n_eval.min(train.rows());
    let reference = psnr_curve(&oracle, train, &e.psnr_times, n, e.eval_seed).map_err(|e| e.to_string())?;
    let mut worst = f64::NEG_INFINITY;
    for c in cells.iter().filter(|c| c.failure.is_none()) {
        for (m, o) in c.train.iter().zip(&reference.psnr) {
            worst = worst.max(m - o);
        }
    }
    let d = format!(
        "oracle PSNR [{}], max model excess {worst:.2} dB over {} models",
        reference.psnr.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>().join(", "),
        cells.iter().filter(|c| c.failure.is_none()).count()
    );
    if worst <= 0.5 {
        Ok(d)
    } else {
        Err(d)
    }
}

fn criterion_10(cells: &[TrainedCell]) -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for seed in [0, 1, 2] {
        let find = |c: ParamClass| cells.iter().find(|x| x.model == "mlp" && x.class == c && x.seed == seed);
        let (Some(noise), Some(vel)) = (find(ParamClass::Noise), find(ParamClass::Vel)) else {
            return Err("missing cells".into());
        };
        if let Some(f) = &noise.failure {
            detail.push(format!("seed {seed}: divergence recorded ({f})"));
            continue;
        }
        let (pn, pv) = (noise.test[0], vel.test[0]);
        ok &= pn <= pv - 1.0;
        detail.push(format!("seed {seed}: c_noise {pn:.2} vs c_vel {pv:.2} dB at t=0.1"));
    }
    let d = detail.join("; ");
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn main() {
    let mut report = Report { failed: 0 };
    let sec = Duration::from_secs;

    let (o, t) = timed(criterion_1);
    report.line(1, "gradient correctness", t, sec(10), o);
    let (o, t) = timed(criterion_2);
    report.line(2, "analytic weighting identities", t, sec(1), o);
    let (o, t) = timed(criterion_3);
    report.line(3, "shared minimizer across weightings", t, sec(600), o);
    let (o, t) = timed(criterion_4);
    report.line(4, "sampler fidelity", t, sec(60), o);
    let (o, t) = timed(criterion_5);
    report.line(5, "class algebraic consistency", t, sec(1), o);
    let (o, t) = timed(criterion_6);
    report.line(6, "Fourier manifold control", t, sec(10), o);
    let (o, t) = timed(criterion_7);
    report.line(7, "classic weighting inferiority", t, sec(1800), o);

    let (data, t_data) = timed(|| presets::fourier_dataset(4, 1000).materialize());
    match data {
        Ok(data) => {
            let (cells, t_train) = timed(|| train_fourier_cells(&data));
            let (o, t) = timed(|| criterion_8(&cells));
            report.line(8, "locality flip", t_data + t_train + t, sec(2700), o);
            let (o, t) = timed(|| criterion_9(&cells, &data));
            report.line(9, "oracle dominance", t, sec(300), o);
            let (o, t) = timed(|| criterion_10(&cells));
            report.line(10, "noise parametrization early-time failure", t, sec(1), o);
        }
        Err(e) => {
            for (id, name) in [(8, "locality flip"), (9, "oracle dominance"), (10, "noise parametrization early-time failure")] {
                report.line(id, name, t_data, sec(1), Err(format!("dataset: {e}")));
            }
        }
    }

    if report.failed > 0 {
        println!("acceptance: {} of 10 criteria failed", report.failed);
        std::process::exit(1);
    }
    println!("acceptance: all 10 criteria passed");
}
