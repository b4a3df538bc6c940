//! Result tables (CSV) and plots (hand-written SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::grid::{CellResult, GridResults};
use crate::error::{Error, Result};
use crate::metrics::{spearman, PSNR_CAP, PSNR_PEAK};

const FIXED_HEAD: [&str; 11] = [
    "index", "label", "dataset", "train_size", "model", "params", "weighting", "class", "seed",
    "iterations", "final_loss",
];
const FIXED_TAIL: [&str; 7] = [
    "mean_err",
    "cov_err",
    "energy_distance",
    "residual_mean",
    "residual_median",
    "residual_ratio",
    "status",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn psnr_column(t: f64) -> String {
    format!("psnr_t{t}")
}

/// Writes one row per cell. Floats use the shortest representation that
/// parses back to the same value; missing values are empty.
pub fn write_results_csv<W: Write>(w: W, rows: &[CellResult]) -> Result<()> {
    let times = rows.first().map(|r| r.psnr_times.clone()).unwrap_or_default();
    if rows.iter().any(|r| r.psnr_times != times) {
        return Err(Error::Usage("rows use different PSNR grids".into()));
    }
    let mut w = csv::Writer::from_writer(w);
    let mut header: Vec<String> = FIXED_HEAD.iter().map(|s| s.to_string()).collect();
    header.extend(times.iter().map(|&t| psnr_column(t)));
    header.extend(FIXED_TAIL.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.index.to_string(),
            r.label.clone(),
            r.dataset.clone(),
            opt(r.train_size),
            r.model.clone(),
            r.params.to_string(),
            r.weighting.clone(),
            r.class.clone(),
            r.seed.to_string(),
            r.iterations.to_string(),
            opt(r.final_loss),
        ];
        // failed cells carry no PSNR values
        rec.extend((0..times.len()).map(|i| opt(r.psnr.get(i))));
        rec.extend([
            opt(r.mean_err),
            opt(r.cov_err),
            opt(r.energy_distance),
            opt(r.residual_mean),
            opt(r.residual_median),
            opt(r.residual_ratio),
            r.status.clone(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad value {field:?} in column {name}")))
}

fn parse_opt<T: std::str::FromStr>(field: &str, name: &str) -> Result<Option<T>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(field, name).map(Some)
    }
}

/// Inverse of [`write_results_csv`].
pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<CellResult>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let n_psnr = cols
        .len()
        .checked_sub(FIXED_HEAD.len() + FIXED_TAIL.len())
        .ok_or_else(|| Error::Format("result table has too few columns".into()))?;
    if cols[..FIXED_HEAD.len()] != FIXED_HEAD || cols[FIXED_HEAD.len() + n_psnr..] != FIXED_TAIL {
        return Err(Error::Format(format!("unexpected result header {cols:?}")));
    }
    let times: Vec<f64> = cols[FIXED_HEAD.len()..FIXED_HEAD.len() + n_psnr]
        .iter()
        .map(|c| {
            c.strip_prefix("psnr_t")
                .ok_or_else(|| Error::Format(format!("bad PSNR column {c:?}")))
                .and_then(|v| parse(v, c))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let psnr: Vec<Option<f64>> = (0..n_psnr)
            .map(|i| parse_opt(f(FIXED_HEAD.len() + i), "psnr"))
            .collect::<Result<_>>()?;
        let tail = FIXED_HEAD.len() + n_psnr;
        rows.push(CellResult {
            index: parse(f(0), "index")?,
            label: f(1).to_string(),
            dataset: f(2).to_string(),
            train_size: parse_opt(f(3), "train_size")?,
            model: f(4).to_string(),
            params: parse(f(5), "params")?,
            weighting: f(6).to_string(),
            class: f(7).to_string(),
            seed: parse(f(8), "seed")?,
            iterations: parse(f(9), "iterations")?,
            final_loss: parse_opt(f(10), "final_loss")?,
            psnr_times: times.clone(),
            psnr: psnr.into_iter().flatten().collect(),
            mean_err: parse_opt(f(tail), "mean_err")?,
            cov_err: parse_opt(f(tail + 1), "cov_err")?,
            energy_distance: parse_opt(f(tail + 2), "energy_distance")?,
            residual_mean: parse_opt(f(tail + 3), "residual_mean")?,
            residual_median: parse_opt(f(tail + 4), "residual_median")?,
            residual_ratio: parse_opt(f(tail + 5), "residual_ratio")?,
            status: f(tail + 6).to_string(),
        });
    }
    Ok(rows)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const POS_FILL: &str = "#2ca02c";
const NEG_FILL: &str = "#d62728";

/// Minimal plotting frame with linear axes.
struct Frame {
    w: f64,
    h: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
    body: String,
}

impl Frame {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) -> Self {
        let y = if y.1 - y.0 < 1e-9 { (y.0 - 1.0, y.1 + 1.0) } else { y };
        let mut f = Frame {
            w: 640.0,
            h: 400.0,
            margin: 60.0,
            x,
            y,
            body: String::new(),
        };
        let (l, r, t, b) = (f.margin, f.w - 180.0, f.margin, f.h - f.margin);
        let _ = write!(
            f.body,
            r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            r - l,
            b - t
        );
        let _ = write!(
            f.body,
            r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
            (l + r) / 2.0,
            esc(title)
        );
        let _ = write!(
            f.body,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            (l + r) / 2.0,
            f.h - 15.0,
            esc(xlabel)
        );
        let _ = write!(
            f.body,
            r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            esc(ylabel)
        );
        for i in 0..=4 {
            let xv = x.0 + (x.1 - x.0) * i as f64 / 4.0;
            let yv = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
            let _ = write!(
                f.body,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{xv:.2}</text>"#,
                f.px(xv),
                b + 14.0
            );
            let _ = write!(
                f.body,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{yv:.2}</text>"#,
                l - 4.0,
                f.py(yv) + 3.0
            );
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        let (l, r) = (self.margin, self.w - 180.0);
        l + (x - self.x.0) / (self.x.1 - self.x.0) * (r - l)
    }

    fn py(&self, y: f64) -> f64 {
        let (t, b) = (self.margin, self.h - self.margin);
        b - (y.clamp(self.y.0, self.y.1) - self.y.0) / (self.y.1 - self.y.0) * (b - t)
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        let p: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            p.join(" ")
        );
    }

    fn rect(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, color: &str, opacity: f64) {
        let (a, b) = (self.px(x0), self.px(x1));
        let (c, d) = (self.py(y0), self.py(y1));
        let _ = write!(
            self.body,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="{opacity}"/>"#,
            a.min(b),
            c.min(d),
            (b - a).abs(),
            (d - c).abs()
        );
    }

    fn legend(&mut self, i: usize, label: &str, color: &str) {
        let x = self.w - 170.0;
        let y = self.margin + 14.0 * i as f64;
        let _ = write!(
            self.body,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="10">{}</text>"#,
            y - 9.0,
            x + 14.0,
            y,
            esc(label)
        );
    }

    fn finish(self) -> String {
        format!(
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">{}</svg>
"#,
            self.w, self.h, self.w, self.h, self.body
        )
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

pub fn psnr_curves_svg(rows: &[CellResult]) -> String {
    let ok: Vec<&CellResult> = rows.iter().filter(|r| r.psnr.len() == r.psnr_times.len()).collect();
    let y = range(ok.iter().flat_map(|r| r.psnr.iter().copied()));
    let mut f = Frame::new("PSNR of D(x_t, t)", (0.0, 1.0), y, "t", "PSNR (dB)");
    for (i, r) in ok.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = r.psnr_times.iter().copied().zip(r.psnr.iter().copied()).collect();
        f.polyline(&pts, c);
        f.legend(i, &r.label, c);
    }
    f.finish()
}

/// Key shared by a `c_den` cell and its `c_vel` counterpart.
fn pair_key(r: &CellResult) -> (String, Option<usize>, String, String) {
    (r.dataset.clone(), r.train_size, r.model.clone(), r.weighting.clone())
}

/// Seed-averaged `PSNR(c_den) - PSNR(c_vel)` per (dataset, size, model,
/// weighting) group with both classes present.
pub fn delta_psnr_groups(rows: &[CellResult]) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
    let mut by: BTreeMap<(String, Option<usize>, String, String), BTreeMap<u64, [Option<&CellResult>; 2]>> =
        BTreeMap::new();
    for r in rows.iter().filter(|r| r.psnr.len() == r.psnr_times.len()) {
        let slot = match r.class.as_str() {
            "c_den" => 0,
            "c_vel" => 1,
            _ => continue,
        };
        by.entry(pair_key(r)).or_default().entry(r.seed).or_default()[slot] = Some(r);
    }
    let mut out = BTreeMap::new();
    for (key, seeds) in by {
        let pairs: Vec<(&CellResult, &CellResult)> = seeds
            .values()
            .filter_map(|p| Some((p[0]?, p[1]?)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let times = pairs[0].0.psnr_times.clone();
        let mut delta = vec![0.0; times.len()];
        for (d, v) in &pairs {
            for (i, x) in delta.iter_mut().enumerate() {
                *x += (d.psnr[i] - v.psnr[i]) / pairs.len() as f64;
            }
        }
        let size = key.1.map(|n| format!(" n={n}")).unwrap_or_default();
        out.insert(format!("{} {}{} {}", key.2, key.0, size, key.3), (times, delta));
    }
    out
}

/// ΔPSNR curves with green (c_den better) and red (c_vel better) shading.
pub fn delta_psnr_svg(rows: &[CellResult]) -> String {
    let groups = delta_psnr_groups(rows);
    let (lo, hi) = range(groups.values().flat_map(|(_, d)| d.iter().copied()));
    let y = (lo.min(0.0), hi.max(0.0));
    let mut f = Frame::new("dPSNR = PSNR(c_den) - PSNR(c_vel)", (0.0, 1.0), y, "t", "dPSNR (dB)");
    f.polyline(&[(0.0, 0.0), (1.0, 0.0)], "black");
    let n = groups.len().max(1) as f64;
    for (i, (label, (times, delta))) in groups.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for (j, (&t, &d)) in times.iter().zip(delta).enumerate() {
            // shade a band around each grid time, split between groups
            let half = 0.5 * neighbour_gap(times, j);
            let x0 = t - half + 2.0 * half * i as f64 / n;
            let x1 = x0 + 2.0 * half / n;
            f.rect(x0, x1, 0.0, d, if d >= 0.0 { POS_FILL } else { NEG_FILL }, 0.35);
        }
        let pts: Vec<(f64, f64)> = times.iter().copied().zip(delta.iter().copied()).collect();
        f.polyline(&pts, c);
        f.legend(i, label, c);
    }
    f.finish()
}

fn neighbour_gap(times: &[f64], j: usize) -> f64 {
    let mut gap = f64::INFINITY;
    if j > 0 {
        gap = gap.min(times[j] - times[j - 1]);
    }
    if j + 1 < times.len() {
        gap = gap.min(times[j + 1] - times[j]);
    }
    if gap.is_finite() {
        gap.min(0.1)
    } else {
        0.1
    }
}

/// Mean PSNR over the grid (and seeds) for every (weighting, class) pair.
pub fn weighting_bars(rows: &[CellResult]) -> Vec<(String, f64)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.psnr.len() == r.psnr_times.len() && !r.psnr.is_empty()) {
        let mean = r.psnr.iter().sum::<f64>() / r.psnr.len() as f64;
        let e = acc.entry(format!("{} {}", r.weighting, r.class)).or_default();
        e.0 += mean;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn weighting_bars_svg(rows: &[CellResult]) -> String {
    let bars = weighting_bars(rows);
    let (lo, hi) = range(bars.iter().map(|b| b.1));
    let y = (lo.min(0.0), hi.max(0.0));
    let k = bars.len().max(1) as f64;
    let mut f = Frame::new("mean PSNR over the time grid", (0.0, k), y, "cell group", "PSNR (dB)");
    for (i, (label, v)) in bars.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        f.rect(i as f64 + 0.15, i as f64 + 0.85, 0.0, *v, c, 0.9);
        f.legend(i, label, c);
    }
    f.finish()
}

#[derive(Serialize)]
struct ReportMeta<'a> {
    grid: &'a str,
    psnr_peak: f64,
    psnr_cap: f64,
    n_eval: usize,
    eval_seed: u64,
    iterations: Vec<usize>,
    failed_cells: usize,
    /// Spearman correlation of mean PSNR and energy distance over cells.
    psnr_energy_spearman: Option<f64>,
    sample_quality_proxy: &'static str,
}

pub const RESULTS_CSV: &str = "results.csv";
pub const PSNR_SVG: &str = "psnr_curves.svg";
pub const DELTA_SVG: &str = "delta_psnr.svg";
pub const BARS_SVG: &str = "weighting_bars.svg";
pub const META_JSON: &str = "report_meta.json";

/// Spearman correlation between mean PSNR and energy distance across the
/// cells that have both.
pub fn psnr_quality_correlation(rows: &[CellResult]) -> Option<f64> {
    let (a, b): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| {
            let e = r.energy_distance?;
            (!r.psnr.is_empty()).then(|| (r.psnr.iter().sum::<f64>() / r.psnr.len() as f64, e))
        })
        .unzip();
    spearman(&a, &b).ok().flatten()
}

/// Writes the CSV table, the three plots and a metadata file into `dir`.
pub fn emit_report(results: &GridResults, dir: &Path) -> Result<Vec<PathBuf>> {
    if results.rows.is_empty() {
        return Err(Error::Usage("no results to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join(RESULTS_CSV);
    write_results_csv(std::fs::File::create(&csv_path)?, &results.rows)?;
    written.push(csv_path);
    for (name, svg) in [
        (PSNR_SVG, psnr_curves_svg(&results.rows)),
        (DELTA_SVG, delta_psnr_svg(&results.rows)),
        (BARS_SVG, weighting_bars_svg(&results.rows)),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, svg)?;
        written.push(p);
    }
    let mut iterations: Vec<usize> = results.rows.iter().map(|r| r.iterations).collect();
    iterations.sort_unstable();
    iterations.dedup();
    let meta = ReportMeta {
        grid: &results.name,
        psnr_peak: PSNR_PEAK,
        psnr_cap: PSNR_CAP,
        n_eval: results.n_eval,
        eval_seed: results.eval_seed,
        iterations,
        failed_cells: results.rows.iter().filter(|r| !r.is_ok()).count(),
        psnr_energy_spearman: psnr_quality_correlation(&results.rows),
        sample_quality_proxy: "moment and energy distances to held-out samples (no Inception features)",
    };
    let p = dir.join(META_JSON);
    std::fs::write(&p, serde_json::to_string_pretty(&meta)?)?;
    written.push(p);
    Ok(written)
}
