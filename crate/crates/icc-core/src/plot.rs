//! Deterministic SVG charts, built by hand so identical input yields
//! identical bytes: no timestamps, no randomness, fixed palette, and every
//! coordinate formatted to two decimals. Four chart shapes cover the
//! pipeline artifacts: measure-vs-accuracy scatter over a sweep table,
//! score-vs-k polylines, per-layer measure profiles, and per-model test
//! accuracy training curves.

use crate::measures::MeasureResult;
use crate::ranking::{KSweepPoint, SweepTable};
use crate::toytrain::EpochStat;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("nothing to plot: {what}")]
    Empty { what: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("model {model_id} has no measure named {measure}")]
    MissingMeasure { model_id: String, measure: String },
}

/// One named point set; rendered as circles (scatter) or a polyline with
/// markers (line chart).
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Tick positions covering [min, max] with a 1/2/5-series step, plus the
/// padded axis bounds. Degenerate ranges are widened symmetrically first.
fn nice_ticks(min: f64, max: f64) -> (Vec<f64>, f64, f64) {
    let (mut lo, mut hi) = (min, max);
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        lo -= pad;
        hi += pad;
    }
    let raw_step = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = mag
        * if norm <= 1.0 {
            1.0
        } else if norm <= 2.0 {
            2.0
        } else if norm <= 5.0 {
            5.0
        } else {
            10.0
        };
    let k0 = (lo / step).floor() as i64;
    let k1 = (hi / step).ceil() as i64;
    let ticks: Vec<f64> = (k0..=k1).map(|k| k as f64 * step).collect();
    (ticks, k0 as f64 * step, k1 as f64 * step)
}

/// Tick label: fixed-point with just enough decimals for the step, or
/// exponent notation when the magnitudes leave the comfortable band.
fn tick_label(v: f64, step: f64) -> String {
    if step >= 1e6 || step < 1e-4 {
        return format!("{v:e}");
    }
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

struct Frame {
    x_ticks: Vec<f64>,
    y_ticks: Vec<f64>,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Frame {
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
        let (x_min, x_max) = bounds(xs);
        let (y_min, y_max) = bounds(ys);
        let (x_ticks, x_lo, x_hi) = nice_ticks(x_min, x_max);
        let (y_ticks, y_lo, y_hi) = nice_ticks(y_min, y_max);
        Frame { x_ticks, y_ticks, x_lo, x_hi, y_lo, y_hi }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (y - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    (min, max)
}

fn validate(series: &[Series], what: &str) -> Result<(), PlotError> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(PlotError::Empty { what: what.to_string() });
    }
    for s in series {
        if s.points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(PlotError::NonFinite { what: format!("series {}", s.name) });
        }
    }
    Ok(())
}

fn chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    lines: bool,
) -> Result<String, PlotError> {
    validate(series, title)?;
    let frame = Frame::from_series(series);
    let mut svg = String::new();
    let w = &mut svg;

    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\">"
    )
    .unwrap();
    writeln!(w, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>").unwrap();
    writeln!(
        w,
        "<text x=\"{:.2}\" y=\"22.00\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape_xml(title)
    )
    .unwrap();

    // Gridlines and tick labels.
    let x_step = frame.x_ticks.get(1).map_or(1.0, |t| t - frame.x_ticks[0]);
    let y_step = frame.y_ticks.get(1).map_or(1.0, |t| t - frame.y_ticks[0]);
    for &t in &frame.x_ticks {
        let x = frame.px(t);
        writeln!(
            w,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#e0e0e0\"/>",
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        )
        .unwrap();
        writeln!(
            w,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            HEIGHT - MARGIN_BOTTOM + 16.0,
            escape_xml(&tick_label(t, x_step))
        )
        .unwrap();
    }
    for &t in &frame.y_ticks {
        let y = frame.py(t);
        writeln!(
            w,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#e0e0e0\"/>",
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        )
        .unwrap();
        writeln!(
            w,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            MARGIN_LEFT - 6.0,
            y + 4.0,
            escape_xml(&tick_label(t, y_step))
        )
        .unwrap();
    }

    // Axis lines and labels.
    writeln!(
        w,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#000000\"/>",
        MARGIN_LEFT,
        HEIGHT - MARGIN_BOTTOM,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    )
    .unwrap();
    writeln!(
        w,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#000000\"/>",
        MARGIN_LEFT,
        MARGIN_TOP,
        MARGIN_LEFT,
        HEIGHT - MARGIN_BOTTOM
    )
    .unwrap();
    writeln!(
        w,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        MARGIN_LEFT + (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape_xml(x_label)
    )
    .unwrap();
    writeln!(
        w,
        "<text x=\"18.00\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 18.00 {:.2})\">{}</text>",
        MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0,
        MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0,
        escape_xml(y_label)
    )
    .unwrap();

    // Series content.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if lines {
            let mut path = String::new();
            for &(x, y) in &s.points {
                if !path.is_empty() {
                    path.push(' ');
                }
                write!(path, "{:.2},{:.2}", frame.px(x), frame.py(y)).unwrap();
            }
            writeln!(
                w,
                "<polyline points=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>"
            )
            .unwrap();
            if s.points.len() <= 60 {
                for &(x, y) in &s.points {
                    writeln!(
                        w,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                        frame.px(x),
                        frame.py(y)
                    )
                    .unwrap();
                }
            }
        } else {
            for &(x, y) in &s.points {
                writeln!(
                    w,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" \
                     fill-opacity=\"0.8\"/>",
                    frame.px(x),
                    frame.py(y)
                )
                .unwrap();
            }
        }
    }

    // Legend, top-right, only when it stays readable.
    if (2..=10).contains(&series.len()) {
        let lx = WIDTH - MARGIN_RIGHT - 150.0;
        for (i, s) in series.iter().enumerate() {
            let ly = MARGIN_TOP + 10.0 + i as f64 * 16.0;
            let color = PALETTE[i % PALETTE.len()];
            writeln!(
                w,
                "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
                ly - 9.0
            )
            .unwrap();
            writeln!(
                w,
                "<text x=\"{:.2}\" y=\"{ly:.2}\" font-size=\"11\">{}</text>",
                lx + 14.0,
                escape_xml(&s.name)
            )
            .unwrap();
        }
    }

    writeln!(w, "</svg>").unwrap();
    Ok(svg)
}

/// Scatter chart from raw series.
pub fn scatter_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String, PlotError> {
    chart(title, x_label, y_label, series, false)
}

/// Line chart (polyline with markers) from raw series.
pub fn line_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String, PlotError> {
    chart(title, x_label, y_label, series, true)
}

/// One circle per model: x = the named measure, y = test accuracy.
pub fn scatter_from_table(table: &SweepTable, measure: &str) -> Result<String, PlotError> {
    if table.records.is_empty() {
        return Err(PlotError::Empty { what: "sweep table".into() });
    }
    let mut points = Vec::with_capacity(table.records.len());
    for r in &table.records {
        let v = *r.measures.get(measure).ok_or_else(|| PlotError::MissingMeasure {
            model_id: r.model_id.clone(),
            measure: measure.to_string(),
        })?;
        points.push((v, r.test_accuracy));
    }
    let series = [Series { name: measure.to_string(), points }];
    scatter_svg(
        &format!("{measure} vs test accuracy"),
        measure,
        "test_accuracy",
        &series,
    )
}

/// One polyline per measure: x = k, y = granulated total score. Points
/// where the score was undefined are dropped.
pub fn k_sweep_chart(
    points_by_measure: &BTreeMap<String, Vec<KSweepPoint>>,
) -> Result<String, PlotError> {
    let mut series = Vec::new();
    for (name, points) in points_by_measure {
        let mut pts: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| p.total_score.map(|s| (p.k as f64, s)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series { name: name.clone(), points: pts });
    }
    if series.is_empty() {
        return Err(PlotError::Empty { what: "k sweep".into() });
    }
    line_svg("granulated score vs k", "k", "total score", &series)
}

/// One polyline per measure over the hidden layers of one model's report;
/// layers where a measure is unavailable are skipped.
pub fn layer_profile_chart(result: &MeasureResult) -> Result<String, PlotError> {
    let profile = match &result.per_layer {
        Some(p) if !p.is_empty() => p,
        _ => return Err(PlotError::Empty { what: "per-layer profile".into() }),
    };
    let mut series = Vec::new();
    for (name, get) in [
        ("c1", &(|l: &crate::measures::LayerProfile| l.c1) as &dyn Fn(_) -> _),
        ("c2", &|l: &crate::measures::LayerProfile| l.c2),
        ("c3", &|l: &crate::measures::LayerProfile| l.c3),
        ("c4", &|l: &crate::measures::LayerProfile| l.c4),
    ] {
        let points: Vec<(f64, f64)> = profile
            .iter()
            .filter_map(|l| get(l).map(|v| (l.layer_index as f64, v)))
            .collect();
        if !points.is_empty() {
            series.push(Series { name: name.to_string(), points });
        }
    }
    if series.is_empty() {
        return Err(PlotError::Empty { what: "per-layer profile".into() });
    }
    line_svg(
        &format!("per-layer profile ({})", result.model_id),
        "layer index",
        "measure value",
        &series,
    )
}

/// One polyline per model: x = completed epochs, y = test accuracy.
pub fn training_curve_chart(curves: &[(String, Vec<EpochStat>)]) -> Result<String, PlotError> {
    let series: Vec<Series> = curves
        .iter()
        .map(|(id, stats)| Series {
            name: id.clone(),
            points: stats.iter().map(|s| (s.epoch as f64, s.test_accuracy)).collect(),
        })
        .collect();
    if series.is_empty() {
        return Err(PlotError::Empty { what: "training curves".into() });
    }
    line_svg("test accuracy by epoch", "epoch", "test_accuracy", &series)
}
