//! Deterministic SVG line charts over the sweep results table.
//!
//! The x axis is picked from the table itself: the first of rho, split,
//! query_per, data_per that actually varies. One line per mode plus any
//! other varying grid column; values are averaged over seeds. Rendering is
//! pure string formatting with fixed precision, so identical rows always
//! yield identical bytes.

use std::collections::BTreeMap;

use anyhow::{bail, Result};

use crate::results::Row;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Connections,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Connections => "avg connections per device",
        }
    }

    fn of(self, row: &Row) -> f64 {
        match self {
            Metric::Accuracy => row.accuracy,
            Metric::Connections => row.avg_connections,
        }
    }
}

const GRID_VARS: [&str; 4] = ["rho", "split", "query_per", "data_per"];

fn var(row: &Row, name: &str) -> f64 {
    match name {
        "rho" => row.rho,
        "split" => row.split as f64,
        "query_per" => row.query_per,
        "data_per" => row.data_per,
        _ => unreachable!("grid var names are fixed"),
    }
}

fn distinct(rows: &[Row], name: &str) -> usize {
    let mut vals: Vec<u64> = rows.iter().map(|r| var(r, name).to_bits()).collect();
    vals.sort_unstable();
    vals.dedup();
    vals.len()
}

/// Short numeric label: fixed 3-decimal rendering with trailing zeros
/// trimmed.
fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() {
        "0".to_string()
    } else {
        s.to_string()
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 545.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 420.0;

pub fn render(rows: &[Row], metric: Metric) -> Result<String> {
    if rows.is_empty() {
        bail!("no rows to plot");
    }
    let x_var = GRID_VARS
        .iter()
        .copied()
        .find(|name| distinct(rows, name) > 1)
        .unwrap_or("split");
    let series_vars: Vec<&str> = GRID_VARS
        .iter()
        .copied()
        .filter(|name| *name != x_var && distinct(rows, name) > 1)
        .collect();

    // series label -> x bits -> (sum, count); non-negative floats order by
    // bit pattern, so the BTreeMap keeps x ascending.
    let mut series: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for row in rows {
        let mut label = row.mode.clone();
        for name in &series_vars {
            label.push_str(&format!(" {name}={}", fmt_num(var(row, name))));
        }
        let x = var(row, x_var);
        let slot = series
            .entry(label)
            .or_default()
            .entry(x.to_bits())
            .or_insert((0.0, 0));
        slot.0 += metric.of(row);
        slot.1 += 1;
    }

    let mut xs: Vec<f64> = rows.iter().map(|r| var(r, x_var)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite grid values"));
    xs.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let (x_lo, x_hi) = (xs[0], *xs.last().expect("nonempty"));
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let y_hi = match metric {
        Metric::Accuracy => 1.0,
        Metric::Connections => {
            let max = rows
                .iter()
                .map(|r| r.avg_connections)
                .fold(0.0f64, f64::max);
            (max * 1.05).max(1.0)
        }
    };

    let px = |x: f64| LEFT + (x - x_lo) / x_span * (RIGHT - LEFT);
    let py = |y: f64| BOTTOM - (y / y_hi) * (BOTTOM - TOP);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" \
         viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{} vs {}</text>\n",
        (LEFT + RIGHT) / 2.0,
        metric.label(),
        x_var
    ));

    for i in 0..=5 {
        let y = y_hi * i as f64 / 5.0;
        let yy = py(y);
        svg.push_str(&format!(
            "<line x1=\"{LEFT:.2}\" y1=\"{yy:.2}\" x2=\"{RIGHT:.2}\" y2=\"{yy:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            yy + 4.0,
            fmt_num(y)
        ));
    }
    for &x in &xs {
        let xx = px(x);
        svg.push_str(&format!(
            "<line x1=\"{xx:.2}\" y1=\"{BOTTOM:.2}\" x2=\"{xx:.2}\" y2=\"{:.2}\" \
             stroke=\"#eeeeee\" stroke-width=\"1\"/>\n",
            TOP
        ));
        svg.push_str(&format!(
            "<text x=\"{xx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            BOTTOM + 20.0,
            fmt_num(x)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{LEFT:.2}\" y1=\"{TOP:.2}\" x2=\"{LEFT:.2}\" y2=\"{BOTTOM:.2}\" \
         stroke=\"black\" stroke-width=\"1.5\"/>\n\
         <line x1=\"{LEFT:.2}\" y1=\"{BOTTOM:.2}\" x2=\"{RIGHT:.2}\" y2=\"{BOTTOM:.2}\" \
         stroke=\"black\" stroke-width=\"1.5\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 44.0,
        x_var
    ));

    for (si, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|(bits, (sum, count))| {
                let x = f64::from_bits(*bits);
                let y = sum / *count as f64;
                format!("{:.2},{:.2}", px(x), py(y))
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        for c in &coords {
            let (cx, cy) = c.split_once(',').expect("formatted pair");
            svg.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = TOP + 16.0 + 20.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            RIGHT + 12.0,
            RIGHT + 36.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{label}</text>\n",
            RIGHT + 42.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
