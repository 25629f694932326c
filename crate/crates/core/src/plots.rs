//! Plot data (CSV) and SVG renderings of a [`Report`].
//!
//! Each panel writes a CSV with exactly the numbers drawn in its SVG.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use plotters::coord::ranged1d::{AsRangedCoord, ValueFormatter};
use plotters::prelude::*;
use serde::Serialize;

use crate::config::AnalysisConfig;
use crate::dataset::NvDataset;
use crate::decomposition::SpectrumEstimate;
use crate::depth::proton_larmor;
use crate::error::{Error, Result};
use crate::fitting::{confidence_band, confidence_band_bootstrap, BandPoint, SpectralFitResult};
use crate::pipeline::{DatasetReport, Report};
use crate::units::psd_to_mhz;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Style {
    Points,
    Line,
    Band,
}

struct Series {
    label: String,
    style: Style,
    /// (x, y) for points and lines; (x, lower, upper) bands use `hi`.
    xy: Vec<(f64, f64)>,
    hi: Vec<f64>,
}

struct Panel<'a> {
    title: String,
    x_label: &'a str,
    y_label: &'a str,
    y_log: bool,
    series: Vec<Series>,
    vlines: Vec<(f64, String)>,
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(format!("plot rendering failed: {e}"))
}

fn bounds(vals: impl Iterator<Item = f64>, log: bool) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite() && (!log || *v > 0.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return if log { (0.1, 10.0) } else { (0.0, 1.0) };
    }
    if log {
        (lo / 1.5, hi * 1.5)
    } else {
        let pad = 0.05 * (hi - lo).max(1e-12);
        (lo - pad, hi + pad)
    }
}

fn draw<Y>(panel: &Panel<'_>, out: &mut String, y_range: Y) -> Result<()>
where
    Y: AsRangedCoord<Value = f64>,
    Y::CoordDescType: ValueFormatter<f64>,
{
    let (x0, x1) = bounds(
        panel.series.iter().flat_map(|s| s.xy.iter().map(|p| p.0)),
        true,
    );
    let root = SVGBackend::with_string(out, (720, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&panel.title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(45)
        .y_label_area_size(70)
        .build_cartesian_2d((x0..x1).log_scale(), y_range)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(panel.x_label)
        .y_desc(panel.y_label)
        .draw()
        .map_err(plot_err)?;
    let y_ok = |y: f64| y.is_finite() && (!panel.y_log || y > 0.0);
    for (i, s) in panel.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        match s.style {
            Style::Points => {
                chart
                    .draw_series(
                        s.xy.iter()
                            .filter(|p| y_ok(p.1))
                            .map(|&p| Circle::new(p, 3, color.filled())),
                    )
                    .map_err(plot_err)?
                    .label(&s.label)
                    .legend(move |(x, y)| Circle::new((x + 10, y), 3, color.filled()));
            }
            Style::Line => {
                chart
                    .draw_series(LineSeries::new(
                        s.xy.iter().copied().filter(|p| y_ok(p.1)),
                        color.stroke_width(2),
                    ))
                    .map_err(plot_err)?
                    .label(&s.label)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
            Style::Band => {
                let (lower, upper): (Vec<(f64, f64)>, Vec<(f64, f64)>) = s
                    .xy
                    .iter()
                    .zip(&s.hi)
                    .filter(|(p, &h)| y_ok(p.1) && y_ok(h))
                    .map(|(p, &h)| (*p, (p.0, h)))
                    .unzip();
                let faded = color.mix(0.25);
                let mut poly = upper.clone();
                poly.extend(lower.iter().rev());
                chart
                    .draw_series(std::iter::once(Polygon::new(poly, faded.filled())))
                    .map_err(plot_err)?
                    .label(&s.label)
                    .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 20, y + 4)], faded.filled()));
            }
        }
    }
    for (x, label) in &panel.vlines {
        let r = chart.y_range();
        let (lo, hi) = (r.start.min(r.end), r.start.max(r.end));
        chart
            .draw_series(LineSeries::new(vec![(*x, lo), (*x, hi)], BLACK.stroke_width(1)))
            .map_err(plot_err)?
            .label(label)
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn render(panel: &Panel<'_>, stamp: Option<&str>) -> Result<String> {
    let mut svg = String::new();
    let ys = panel
        .series
        .iter()
        .flat_map(|s| s.xy.iter().map(|p| p.1).chain(s.hi.iter().copied()));
    let (y0, y1) = bounds(ys, panel.y_log);
    if panel.y_log {
        draw(panel, &mut svg, (y0..y1).log_scale())?;
    } else {
        draw(panel, &mut svg, y0..y1)?;
    }
    if let Some(s) = stamp {
        svg = svg.replacen('\n', &format!("\n<!-- generated {s} -->\n"), 1);
    }
    Ok(svg)
}

#[derive(Debug, Serialize)]
struct Row<'a> {
    series: &'a str,
    style: &'static str,
    x: f64,
    y: f64,
    y_upper: Option<f64>,
}

fn csv_text(panel: &Panel<'_>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let keep = |y: f64| y.is_finite() && (!panel.y_log || y > 0.0);
    for s in &panel.series {
        let style = match s.style {
            Style::Points => "points",
            Style::Line => "line",
            Style::Band => "band",
        };
        for (i, &(x, y)) in s.xy.iter().enumerate() {
            let upper = s.hi.get(i).copied();
            if !keep(y) || upper.is_some_and(|u| !keep(u)) {
                continue;
            }
            w.serialize(Row {
                series: &s.label,
                style,
                x,
                y,
                y_upper: upper,
            })
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    for (x, label) in &panel.vlines {
        w.serialize(Row {
            series: label,
            style: "vline",
            x: *x,
            y: f64::NAN,
            y_upper: None,
        })
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

fn coherence_panel(ds: &NvDataset, rep: &DatasetReport) -> Panel<'static> {
    let mut series = Vec::new();
    for c in ds.decay_curves() {
        series.push(Series {
            label: format!("N={} data", c.n_pulses),
            style: Style::Points,
            xy: c.times_us.iter().copied().zip(c.coherence.iter().copied()).collect(),
            hi: vec![],
        });
        if let Some(f) = rep.decay_fits.iter().find(|f| f.n_pulses == c.n_pulses) {
            let t = log_grid(c.times_us[0], c.times_us[c.times_us.len() - 1], 80);
            series.push(Series {
                label: format!("N={} fit", c.n_pulses),
                style: Style::Line,
                xy: t
                    .iter()
                    .map(|&ti| (ti, f.amplitude * (-(ti / f.t2_us).powf(f.p)).exp()))
                    .collect(),
                hi: vec![],
            });
        }
    }
    Panel {
        title: format!("{}: coherence decay", rep.id),
        x_label: "time t (us)",
        y_label: "coherence C",
        y_log: false,
        series,
        vlines: vec![],
    }
}

fn t2_panel(report: &Report) -> Panel<'static> {
    let mut series = Vec::new();
    for d in &report.datasets {
        let pts: Vec<(f64, f64)> = d
            .decay_fits
            .iter()
            .filter(|f| f.n_pulses > 0)
            .map(|f| (f.n_pulses as f64, f.t2_us))
            .collect();
        if pts.is_empty() {
            continue;
        }
        series.push(Series {
            label: format!("{} T2", d.id),
            style: Style::Points,
            xy: pts.clone(),
            hi: vec![],
        });
        if let Some(s) = &d.scaling {
            let n_max = pts.iter().map(|p| p.0).fold(1.0, f64::max);
            series.push(Series {
                label: format!("{} fit k={:.2}", d.id, s.k),
                style: Style::Line,
                xy: log_grid(1.0, n_max, 60).into_iter().map(|n| (n, s.t2_at(n))).collect(),
                hi: vec![],
            });
        }
    }
    Panel {
        title: "coherence time vs pulse number".into(),
        x_label: "pulse number N",
        y_label: "T2 (us)",
        y_log: true,
        series,
        vlines: vec![],
    }
}

fn band_series(label: String, band: &[BandPoint]) -> Series {
    Series {
        label,
        style: Style::Band,
        xy: band
            .iter()
            .map(|b| (b.omega / (2.0 * PI), psd_to_mhz(b.lower)))
            .collect(),
        hi: band.iter().map(|b| psd_to_mhz(b.upper)).collect(),
    }
}

fn spectrum_panel(
    rep: &DatasetReport,
    report: &Report,
    cfg: &AnalysisConfig,
) -> Result<Option<Panel<'static>>> {
    let Some(est) = &rep.spectrum else {
        return Ok(None);
    };
    let mut series = vec![Series {
        label: "reconstructed".into(),
        style: Style::Points,
        xy: est
            .points
            .iter()
            .map(|p| (p.omega / (2.0 * PI), psd_to_mhz(p.s)))
            .collect(),
        hi: vec![],
    }];
    if let Some(nmr) = &rep.nmr_spectrum {
        series.push(Series {
            label: "XY8 scan".into(),
            style: Style::Points,
            xy: nmr
                .points
                .iter()
                .map(|p| (p.omega / (2.0 * PI), psd_to_mhz(p.s)))
                .collect(),
            hi: vec![],
        });
    }
    let omegas = est.omegas();
    let (lo, hi) = (omegas[0], omegas[omegas.len() - 1]);
    let grid = log_grid(lo, hi, cfg.band_points);
    let fit_est = match rep.fit_excluded_mhz {
        Some((a, b)) => est.excluding(2.0 * PI * a, 2.0 * PI * b),
        None => est.clone(),
    };
    for f in &rep.spectral_fits {
        series.push(Series {
            label: f.kind.label().replace('_', " "),
            style: Style::Line,
            xy: grid
                .iter()
                .map(|&o| (o / (2.0 * PI), psd_to_mhz(f.evaluate(o))))
                .collect(),
            hi: vec![],
        });
        if let Some(b) = band(f, &fit_est, &grid, cfg) {
            series.push(band_series(format!("{} 1 sigma", f.kind.label().replace('_', " ")), &b));
        }
    }
    if let Some(g) = &report.ensemble.global_fit {
        if let Some(i) = g.datasets.iter().position(|d| d.id == rep.id) {
            let m = g.model(i)?;
            series.push(Series {
                label: "global fit".into(),
                style: Style::Line,
                xy: grid
                    .iter()
                    .map(|&o| (o / (2.0 * PI), psd_to_mhz(m.density(o))))
                    .collect(),
                hi: vec![],
            });
        }
    }
    let mut vlines = Vec::new();
    if let Ok(f) = proton_larmor(rep.field_gauss) {
        if f > 0.0 {
            vlines.push((f, format!("1H Larmor {f:.4} MHz")));
        }
    }
    Ok(Some(Panel {
        title: format!("{}: noise spectrum", rep.id),
        x_label: "frequency (MHz)",
        y_label: "S (MHz^2/MHz)",
        y_log: true,
        series,
        vlines,
    }))
}

fn band(
    f: &SpectralFitResult,
    est: &SpectrumEstimate,
    grid: &[f64],
    cfg: &AnalysisConfig,
) -> Option<Vec<BandPoint>> {
    let r = if cfg.bootstrap.enabled {
        confidence_band_bootstrap(f, est, grid, cfg.bootstrap.replicas, cfg.bootstrap.seed)
    } else {
        confidence_band(f, grid)
    };
    match r {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("no confidence band for {}: {e}", f.kind.label());
            None
        }
    }
}

fn depth_panel(report: &Report) -> Option<Panel<'static>> {
    let g = report.ensemble.global_fit.as_ref()?;
    let mut series = Vec::new();
    let fits = [
        ("slow", &report.ensemble.depth_scaling_slow),
        ("fast", &report.ensemble.depth_scaling_fast),
    ];
    for (name, fit) in fits {
        let pts: Vec<(f64, f64)> = g
            .datasets
            .iter()
            .filter_map(|d| {
                let r = report.datasets.iter().find(|r| r.id == d.id)?;
                let v = if name == "slow" { d.delta1_mhz } else { d.delta2_mhz };
                Some((r.depth_used_nm, v))
            })
            .collect();
        let (d0, d1) = bounds(pts.iter().map(|p| p.0), true);
        series.push(Series {
            label: format!("{name} coupling"),
            style: Style::Points,
            xy: pts,
            hi: vec![],
        });
        if let Some(f) = fit {
            series.push(Series {
                label: format!("{name} a/d^n, n={:.2}", f.n),
                style: Style::Line,
                xy: log_grid(d0, d1, 60).into_iter().map(|d| (d, f.delta_at(d))).collect(),
                hi: vec![],
            });
        }
    }
    Some(Panel {
        title: "coupling vs depth".into(),
        x_label: "depth d (nm)",
        y_label: "coupling Delta (MHz)",
        y_log: true,
        series,
        vlines: vec![],
    })
}

fn write_panel(dir: &Path, stem: &str, panel: &Panel<'_>, stamp: Option<&str>, out: &mut Vec<PathBuf>) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv_text(panel)?)?;
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg_path, render(panel, stamp)?)?;
    out.push(csv_path);
    out.push(svg_path);
    Ok(())
}

/// Write every panel to `outdir`; returns the files written. `stamp`, when
/// given, is embedded as a comment in each SVG.
pub fn emit_plots(
    report: &Report,
    datasets: &[NvDataset],
    outdir: &Path,
    stamp: Option<&str>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)?;
    let by_id: BTreeMap<&str, &NvDataset> = datasets.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut files = Vec::new();
    for rep in &report.datasets {
        if let Some(ds) = by_id.get(rep.id.as_str()) {
            write_panel(outdir, &format!("coherence_{}", rep.id), &coherence_panel(ds, rep), stamp, &mut files)?;
        }
        if let Some(p) = spectrum_panel(rep, report, &report.config)? {
            write_panel(outdir, &format!("spectrum_{}", rep.id), &p, stamp, &mut files)?;
        }
    }
    write_panel(outdir, "t2_vs_n", &t2_panel(report), stamp, &mut files)?;
    if let Some(p) = depth_panel(report) {
        write_panel(outdir, "delta_vs_depth", &p, stamp, &mut files)?;
    }
    Ok(files)
}
