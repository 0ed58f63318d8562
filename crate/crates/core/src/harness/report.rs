//! Static SVG summary of a metrics table: one bar panel per metric, one bar
//! per run (mean over seeds, whiskers at min and max).

use std::collections::BTreeMap;
use std::fmt::Write;

use super::MetricsRow;

const WIDTH: f64 = 720.0;
const LABEL_W: f64 = 260.0;
const BAR_H: f64 = 18.0;
const PANEL_GAP: f64 = 36.0;

struct Bar {
    run_id: String,
    mean: f64,
    min: f64,
    max: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Per-seed value of one run: aggregate rows (`all`, `mean`) when present,
/// otherwise the mean over tasks.
fn panels(rows: &[MetricsRow]) -> BTreeMap<&str, Vec<Bar>> {
    let mut grouped: BTreeMap<&str, BTreeMap<&str, BTreeMap<u64, Vec<(&str, f64)>>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric != "error") {
        grouped
            .entry(&r.metric)
            .or_default()
            .entry(&r.run_id)
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((&r.task, r.value));
    }
    grouped
        .into_iter()
        .map(|(metric, runs)| {
            let bars = runs
                .into_iter()
                .map(|(run_id, seeds)| {
                    let per_seed: Vec<f64> = seeds
                        .values()
                        .map(|vals| {
                            let agg: Vec<f64> = vals
                                .iter()
                                .filter(|(t, _)| *t == "all" || *t == "mean")
                                .map(|&(_, v)| v)
                                .collect();
                            let pick = if agg.is_empty() { vals.iter().map(|&(_, v)| v).collect() } else { agg };
                            pick.iter().sum::<f64>() / pick.len() as f64
                        })
                        .collect();
                    Bar {
                        run_id: run_id.to_string(),
                        mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                        min: per_seed.iter().copied().fold(f64::INFINITY, f64::min),
                        max: per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    }
                })
                .collect();
            (metric, bars)
        })
        .collect()
}

pub fn render_report(rows: &[MetricsRow]) -> String {
    let panels = panels(rows);
    let height: f64 = panels
        .values()
        .map(|bars| PANEL_GAP + bars.len() as f64 * BAR_H)
        .sum::<f64>()
        + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let mut y = 10.0;
    let plot_w = WIDTH - LABEL_W - 80.0;
    for (metric, bars) in &panels {
        let _ = writeln!(svg, r#"<text x="4" y="{}" font-weight="bold">{}</text>"#, y + 14.0, escape(metric));
        y += PANEL_GAP - 8.0;
        let lo = bars.iter().map(|b| b.min).fold(0.0, f64::min);
        let hi = bars.iter().map(|b| b.max).fold(0.0, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x_of = |v: f64| LABEL_W + (v - lo) / span * plot_w;
        for b in bars {
            let (x0, x1) = (x_of(0.0), x_of(b.mean));
            let _ = writeln!(
                svg,
                r#"<text x="4" y="{}">{}</text><rect x="{}" y="{}" width="{}" height="{}" fill="steelblue"/><line x1="{}" x2="{}" y1="{}" y2="{}" stroke="black"/><text x="{}" y="{}">{:.4}</text>"#,
                y + 12.0,
                escape(&b.run_id),
                x0.min(x1),
                y + 2.0,
                (x1 - x0).abs(),
                BAR_H - 4.0,
                x_of(b.min),
                x_of(b.max),
                y + BAR_H / 2.0,
                y + BAR_H / 2.0,
                WIDTH - 76.0,
                y + 12.0,
                b.mean
            );
            y += BAR_H;
        }
        y += 8.0;
    }
    svg.push_str("</svg>\n");
    svg
}
