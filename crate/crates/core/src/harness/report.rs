//! Rendering a [`MetricsReport`] as JSON, CSV, Markdown and SVG charts.
//! Output depends only on the report, so reruns give identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;

use super::metrics::*;
use super::pipeline::write_json;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
    Plots,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Plots];
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "plots" | "svg" => Ok(ReportFormat::Plots),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Write `formats` into `dir`; returns the files written.
pub fn write_report(report: &MetricsReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => {
                let p = dir.join("report.json");
                write_json(&p, report)?;
                out.push(p);
            }
            ReportFormat::Csv => {
                for (name, rows) in csv_tables(report) {
                    let p = dir.join(name);
                    let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
                    for r in rows {
                        w.write_record(&r).map_err(csv_err)?;
                    }
                    w.flush()?;
                    out.push(p);
                }
            }
            ReportFormat::Markdown => {
                let p = dir.join("report.md");
                std::fs::write(&p, markdown(report))?;
                out.push(p);
            }
            ReportFormat::Plots => {
                for (name, svg) in [("rewards.svg", rewards_chart(report)?), ("returns.svg", returns_chart(report)?), ("scores.svg", scores_chart(report)?)] {
                    let p = dir.join(name);
                    std::fs::write(&p, svg)?;
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

type Table = Vec<Vec<String>>;

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Rewards with and without defense.
fn reward_table(r: &MetricsReport) -> Table {
    let mut t = vec![vec!["attack", "undefended_mean", "undefended_std", "defended_mean", "defended_std"].into_iter().map(String::from).collect()];
    if let Some(c) = &r.clean {
        t.push(vec!["none".into(), num(c.undefended.mean), num(c.undefended.std), num(c.defended.mean), num(c.defended.std)]);
    }
    for a in &r.attacks {
        t.push(vec![a.attack.to_string(), num(a.undefended.mean), num(a.undefended.std), num(a.defended.mean), num(a.defended.std)]);
    }
    if let Some(s) = &r.summary {
        t.push(vec!["avg".into(), num(s.undefended.avg), String::new(), num(s.defended.avg), String::new()]);
        t.push(vec![
            format!("min ({} / {})", s.undefended.best_attack, s.defended.best_attack),
            num(s.undefended.min),
            String::new(),
            num(s.defended.min),
            String::new(),
        ]);
    }
    t
}

fn retention_table(r: &MetricsReport) -> Table {
    let mut t = vec![vec!["undefended_clean".to_string(), "defended_clean".into(), "retention".into()]];
    if let Some(c) = &r.clean {
        t.push(vec![num(c.undefended.mean), num(c.defended.mean), c.retention.to_string()]);
    }
    t
}

fn detector_table(r: &MetricsReport) -> Table {
    let mut t = vec![vec!["attack", "clean_accuracy", "f1", "fnr", "mae", "attacked_mae", "heldout_mae", "heldout_attacked_mae"]
        .into_iter()
        .map(String::from)
        .collect()];
    for (d, n) in r.detector.per_attack.iter().zip(&r.denoiser) {
        t.push(vec![
            d.attack.to_string(),
            r.detector.accuracy_clean.to_string(),
            d.f1.to_string(),
            d.fnr.to_string(),
            n.mae.to_string(),
            n.attacked_mae.to_string(),
            n.heldout_mae.to_string(),
            n.heldout_attacked_mae.to_string(),
        ]);
    }
    t
}

fn adaptive_table(r: &MetricsReport) -> Table {
    let mut t = vec![vec!["attack", "defended", "adaptive", "change"].into_iter().map(String::from).collect()];
    for a in &r.adaptive {
        t.push(vec![a.attack.to_string(), num(a.defended), num(a.adaptive.mean), a.change.to_string()]);
    }
    let changes: Vec<f64> = r.adaptive.iter().filter_map(|a| a.change.value()).collect();
    if !changes.is_empty() {
        let min = changes.iter().copied().fold(f64::INFINITY, f64::min);
        let max = changes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        t.push(vec!["min".into(), String::new(), String::new(), num(min)]);
        t.push(vec!["max".into(), String::new(), String::new(), num(max)]);
    }
    t
}

fn csv_tables(r: &MetricsReport) -> Vec<(&'static str, Table)> {
    vec![
        ("rewards.csv", reward_table(r)),
        ("retention.csv", retention_table(r)),
        ("detector.csv", detector_table(r)),
        ("adaptive.csv", adaptive_table(r)),
    ]
}

fn md_table(out: &mut String, t: &Table) {
    let row = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
    out.push_str(&row(&t[0]));
    out.push_str(&row(&vec!["---".to_string(); t[0].len()]));
    for r in &t[1..] {
        out.push_str(&row(r));
    }
}

pub fn markdown(r: &MetricsReport) -> String {
    let h = &r.header;
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation report\n");
    let _ = writeln!(
        s,
        "env `{}`, algo `{}`, epsilon {}, horizon {}, normal trajectories {}, rollouts per cell {}, seed {}",
        h.env, h.algo, h.epsilon, h.horizon, h.normal_trajectories, h.rollouts, h.seed
    );
    let _ = writeln!(s, "\nreference scale: {} trajectories, horizon {}; anomaly threshold {}, vulnerability threshold {}\n", h.reference_trajectories, h.reference_horizon, h.c_anomaly, opt_num(h.c_vul));
    for (title, t) in [
        ("Rewards under attack with and without defense", reward_table(r)),
        ("Clean reward retained by the defense", retention_table(r)),
        ("Detector and denoiser", detector_table(r)),
        ("Change in defended reward under adaptive attacks", adaptive_table(r)),
    ] {
        let _ = writeln!(s, "## {title}\n");
        md_table(&mut s, &t);
        s.push('\n');
    }
    s
}

/// Parse a Markdown document produced by [`markdown`] back into its tables.
pub fn parse_markdown_tables(md: &str) -> Vec<Table> {
    let mut tables = Vec::new();
    let mut cur: Table = Vec::new();
    for line in md.lines() {
        if let Some(inner) = line.strip_prefix("| ").and_then(|l| l.strip_suffix(" |")) {
            let cells: Vec<String> = inner.split(" | ").map(String::from).collect();
            if cells.iter().all(|c| c == "---") {
                continue;
            }
            cur.push(cells);
        } else if !cur.is_empty() {
            tables.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tables.push(cur);
    }
    tables
}

const SIZE: (u32, u32) = (800, 480);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo.min(0.0) - pad, hi.max(0.0) + pad)
}

/// Grouped bars of mean return, undefended and defended, per attack.
fn rewards_chart(r: &MetricsReport) -> Result<String> {
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    if let Some(c) = &r.clean {
        rows.push(("none".into(), c.undefended.mean, c.defended.mean));
    }
    rows.extend(r.attacks.iter().map(|a| (a.attack.to_string(), a.undefended.mean, a.defended.mean)));
    let (lo, hi) = span(rows.iter().flat_map(|(_, u, d)| [*u, *d]));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let n = rows.len().max(1);
        let mut chart = ChartBuilder::on(&root)
            .caption("mean return (blue undefended, red defended)", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(0f64..n as f64, lo..hi)
            .map_err(plot_err)?;
        let labels: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
        chart
            .configure_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
            .draw()
            .map_err(plot_err)?;
        for (i, (_, u, d)) in rows.iter().enumerate() {
            let x = i as f64;
            chart.draw_series([Rectangle::new([(x + 0.1, 0.0), (x + 0.5, *u)], BLUE.filled())]).map_err(plot_err)?;
            chart.draw_series([Rectangle::new([(x + 0.5, 0.0), (x + 0.9, *d)], RED.filled())]).map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Per-rollout return of every cell, in seed order.
fn returns_chart(r: &MetricsReport) -> Result<String> {
    let mut series: Vec<(String, &CellStats)> = Vec::new();
    if let Some(c) = &r.clean {
        series.push(("none/undefended".into(), &c.undefended));
        series.push(("none/defended".into(), &c.defended));
    }
    for a in &r.attacks {
        series.push((format!("{}/undefended", a.attack), &a.undefended));
        series.push((format!("{}/defended", a.attack), &a.defended));
    }
    for a in &r.adaptive {
        series.push((format!("{}/adaptive", a.attack), &a.adaptive));
    }
    let (lo, hi) = span(series.iter().flat_map(|(_, c)| c.returns.iter().copied()));
    let n = series.iter().map(|(_, c)| c.returns.len()).max().unwrap_or(1).max(2);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("return per rollout", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(0f64..(n - 1) as f64, lo..hi)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("rollout").y_desc("return").draw().map_err(plot_err)?;
        for (i, (name, c)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(c.returns.iter().enumerate().map(|(k, &v)| (k as f64, v)), color))
                .map_err(plot_err)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], color));
        }
        if !series.is_empty() {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Detector score distributions of defended cells.
fn scores_chart(r: &MetricsReport) -> Result<String> {
    let hi_x = r.score_histograms.iter().filter_map(|h| h.edges.last().copied()).fold(1e-9, f64::max);
    let fraction = |h: &ScoreHistogram, c: usize| c as f64 / h.counts.iter().sum::<usize>().max(1) as f64;
    let hi_y = r.score_histograms.iter().flat_map(|h| h.counts.iter().map(move |&c| fraction(h, c))).fold(1e-9, f64::max);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("detector score distribution", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(0f64..hi_x, 0f64..hi_y * 1.05)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("score").y_desc("fraction of steps").draw().map_err(plot_err)?;
        for (i, h) in r.score_histograms.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = h.counts.iter().enumerate().map(|(b, &c)| (0.5 * (h.edges[b] + h.edges[b + 1]), fraction(h, c))).collect();
            chart
                .draw_series(LineSeries::new(pts, color))
                .map_err(plot_err)?
                .label(h.cell.clone())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], color));
        }
        if !r.score_histograms.is_empty() {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}
