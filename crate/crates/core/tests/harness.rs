use fmweights::harness::config::{LrSchedule, OptimConfig};
use fmweights::harness::presets::{self, default_eval};
use fmweights::harness::report::{delta_psnr_svg, psnr_curves_svg, weighting_bars_svg};
use fmweights::harness::{
    emit_report, evaluate, init_store, load_run, read_results_csv, run_cell, run_cells, run_grid, train,
    write_results_csv, DatasetConfig, GridResults, GridSpec, RunConfig,
};
use fmweights::models::ModelSpec;
use fmweights::nn::{Tape, Tensor};
use fmweights::objectives::{unified_loss, InterpolantBatch, ParamClass, WeightingScheme};
use fmweights::oracle::GaussianDataSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(iterations: usize) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig::Gaussian {
            spec: GaussianDataSpec { tau: 1.5, dim: 2 },
            train_size: Some(64),
            eval_size: 40,
            data_seed: 3,
        },
        model: ModelSpec::mlp(2, vec![8], 4),
        weighting: WeightingScheme::Vel,
        class: ParamClass::Vel,
        optim: OptimConfig {
            lr_schedule: LrSchedule::Constant,
            lr: 1e-2,
            batch_size: 16,
            iterations,
            ema_decay: 0.9,
            log_every: 5,
        },
        t_clamp: [1e-3, 1.0 - 1e-3],
        seed: 1,
        init_seed: 2,
        eval: fmweights::harness::EvalConfig {
            n_eval: 40,
            gen_count: 30,
            ..default_eval()
        },
        output_dir: None,
    }
}

fn tiny_grid() -> GridSpec {
    GridSpec {
        name: "tiny".into(),
        base: tiny(20),
        weightings: vec![WeightingScheme::Vel, WeightingScheme::Den],
        classes: vec![ParamClass::Den, ParamClass::Vel],
        models: vec![ModelSpec::mlp(2, vec![8], 4)],
        train_sizes: Vec::new(),
        seeds: vec![0, 1],
    }
}

#[test]
fn zero_iterations_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(0);
    cfg.output_dir = Some(dir.path().join("run"));
    let data = cfg.dataset.materialize().unwrap();
    let out = train(&cfg, &data).unwrap();
    let init = init_store(&cfg).unwrap();
    assert_eq!(out.store.values(), init.values());
    let (back_cfg, back) = load_run(&dir.path().join("run/checkpoint.bin")).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_eq!(back.values(), init.values());
    assert_eq!(back.eval_values(), init.eval_values());
}

#[test]
fn identical_configs_train_identically() {
    let cfg = tiny(30);
    let data = cfg.dataset.materialize().unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.store.values(), b.store.values());
    assert_eq!(a.log.len(), 6);
    let mut other = cfg.clone();
    other.seed = 9;
    assert_ne!(train(&other, &data).unwrap().log, a.log);
}

#[test]
fn persisted_config_is_explicit_json() {
    let json = tiny(5).to_json().unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["dataset", "model", "weighting", "class", "optim", "t_clamp", "seed", "init_seed", "eval", "output_dir"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["weighting"], "w_vel");
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, tiny(5));
    let unknown = json.replacen("\"seed\"", "\"sed\"", 1);
    assert!(serde_json::from_str::<RunConfig>(&unknown).is_err());
}

#[test]
fn velocity_training_reaches_the_analytic_loss_floor() {
    let (tau, d) = (1.5, 2);
    let cfg = presets::gaussian_run(tau, d, WeightingScheme::Vel, 20_000, 0);
    let data = cfg.dataset.materialize().unwrap();
    let net = train(&cfg, &data).unwrap().frozen(&cfg).unwrap();

    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0 - 1e-3)).collect();
    let x0 = Tensor::randn(&[n, d], &mut rng);
    let x1 = Tensor::randn(&[n, d], &mut rng).scale(tau);
    let batch = InterpolantBatch::new(x0, x1, t.clone()).unwrap();
    let mut tape = Tape::new();
    let loss = unified_loss(&mut tape, &batch, ParamClass::Vel, &WeightingScheme::Vel, |tape, xt, t| {
        let out = net.model.forward(&net.params, tape.value(xt), t)?;
        tape.constant(out)
    })
    .unwrap();
    let loss = tape.value(loss).data()[0];
    // irreducible part: Var(x1 - x0 | x_t) = d tau^2 / ((1-t)^2 + tau^2 t^2)
    let floor = t
        .iter()
        .map(|&t| d as f64 * tau * tau / ((1.0 - t).powi(2) + tau * tau * t * t))
        .sum::<f64>()
        / n as f64;
    assert!(loss < 1.05 * floor, "loss {loss} vs floor {floor}");
}

#[test]
fn single_cell_grid_matches_a_direct_run() {
    let mut g = tiny_grid();
    g.weightings.truncate(1);
    g.classes.truncate(1);
    g.seeds.truncate(1);
    let res = run_grid(&g).unwrap();
    assert_eq!(res.rows.len(), 1);
    let cfg = &g.cells().unwrap()[0].config;
    let data = cfg.dataset.materialize().unwrap();
    let direct = evaluate(cfg, &data, &train(cfg, &data).unwrap()).unwrap();
    assert_eq!(res.rows[0].psnr, direct.psnr.psnr);
    assert_eq!(res.rows[0].energy_distance, direct.moments.map(|m| m.energy_distance));
}

#[test]
fn cells_are_isolated_from_grid_order() {
    let cells = tiny_grid().cells().unwrap();
    let forward = run_cells(&cells);
    let mut reversed: Vec<_> = cells.iter().rev().cloned().collect();
    for (i, c) in reversed.iter_mut().enumerate() {
        c.index = i;
    }
    let mut back = run_cells(&reversed);
    back.reverse();
    for (a, b) in forward.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.psnr, b.psnr);
        assert_eq!(a.final_loss, b.final_loss);
    }
}

#[test]
fn cells_share_initial_parameters() {
    let cells = tiny_grid().cells().unwrap();
    let first = init_store(&cells[0].config).unwrap();
    for c in &cells[1..] {
        assert_eq!(init_store(&c.config).unwrap().values(), first.values());
    }
}

#[test]
fn a_diverging_cell_does_not_stop_the_grid() {
    let mut g = tiny_grid();
    // (1 - t)^-400 overflows near the upper clamp
    g.weightings = vec![WeightingScheme::Vel, WeightingScheme::Power { p: 400.0 }];
    g.classes = vec![ParamClass::Vel];
    g.seeds = vec![0];
    let res = run_grid(&g).unwrap();
    assert!(res.rows[0].is_ok(), "{}", res.rows[0].status);
    assert!(res.rows[1].status.contains("diverged at step 0"), "{}", res.rows[1].status);
    assert!(res.rows[1].psnr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&res, dir.path()).unwrap();
}

#[test]
fn a_broken_config_is_reported_per_cell() {
    let mut cfg = tiny(5);
    cfg.model = ModelSpec::mlp(3, vec![4], 4);
    let row = run_cell(0, "bad", &cfg);
    assert!(row.status.contains("dimension"), "{}", row.status);
}

fn sample_results() -> GridResults {
    let mut res = run_grid(&tiny_grid()).unwrap();
    res.rows[1].status = "integration diverged at step 3 (t = 0.015): state, with \"quotes\"".into();
    res.rows[1].energy_distance = None;
    res.rows[2].final_loss = Some(0.1 + 0.2);
    res
}

#[test]
fn results_csv_round_trips_exactly() {
    let res = sample_results();
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &res.rows).unwrap();
    let back = read_results_csv(buf.as_slice()).unwrap();
    assert_eq!(back, res.rows);
}

#[test]
fn report_files_are_well_formed() {
    let res = sample_results();
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&res, dir.path()).unwrap();
    assert_eq!(written.len(), 5);
    for svg in [psnr_curves_svg(&res.rows), delta_psnr_svg(&res.rows), weighting_bars_svg(&res.rows)] {
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["psnr_peak"], 2.0);
    assert_eq!(meta["iterations"], serde_json::json!([20]));
}

#[test]
fn delta_plot_colors_follow_the_sign() {
    let mut rows = sample_results().rows;
    // den beats vel at the first time, loses at the second
    for r in rows.iter_mut() {
        r.status = "ok".into();
        r.psnr = if r.class == "c_den" { vec![20.0, 10.0, 0.0, 0.0, 0.0] } else { vec![10.0, 20.0, 0.0, 0.0, 0.0] };
    }
    let svg = delta_psnr_svg(&rows);
    assert!(svg.contains("#2ca02c") && svg.contains("#d62728"));
}

#[test]
fn empty_results_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = GridResults {
        name: "e".into(),
        n_eval: 1,
        eval_seed: 0,
        rows: Vec::new(),
    };
    assert!(emit_report(&empty, dir.path()).is_err());
}

#[test]
fn mismatched_model_sizes_are_rejected() {
    let mut g = tiny_grid();
    g.models.push(ModelSpec::mlp(2, vec![64], 4));
    assert!(g.cells().is_err());
    g.models.truncate(1);
    g.seeds.clear();
    assert!(g.cells().is_err());
}
