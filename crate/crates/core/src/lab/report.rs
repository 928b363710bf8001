//! Static SVG charts backed by the run CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::artifacts::{bucket_summary, read_history, read_profile, write_buckets, PROFILE_HEADER, SIGNAL_HEADER};
use crate::error::Result;

/// Plot position of edges with no path to the labelled nodes.
pub const INF_BUCKET: usize = 15;

/// Magnitudes below this are drawn on the floor of log plots.
const LOG_FLOOR: f64 = 1e-20;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    log_y: bool,
    lines: bool,
    series: Vec<Series>,
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    fn y_value(&self, y: f64) -> f64 {
        if self.log_y {
            y.max(LOG_FLOOR).log10()
        } else {
            y
        }
    }

    fn render(&self) -> String {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| self.y_value(p.1)));
        let (x0, x1) = widen(finite_range(xs).unwrap_or((0.0, 1.0)));
        let (y0, y1) = widen(finite_range(ys).unwrap_or((0.0, 1.0)));
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(s, r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#, H - BOTTOM, W - RIGHT);
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let ylab = if self.log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
            let _ =
                writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.1}</text>"#, px(fx), H - BOTTOM + 18.0);
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{ylab}</text>"#, LEFT - 6.0, py(fy) + 4.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(f64, f64)> = series
                .points
                .iter()
                .map(|&(x, y)| (x, self.y_value(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            if self.lines && pts.len() > 1 {
                let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    d.join(" ")
                );
            } else {
                for &(x, y) in &pts {
                    let _ = writeln!(
                        s,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#,
                        px(x),
                        py(y)
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                W - RIGHT - 150.0,
                TOP + 14.0 + 16.0 * k as f64,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn snapshot_files(dir: &Path, prefix: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(iter) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(".csv")) {
            if let Ok(t) = iter.parse::<usize>() {
                found.push((t, path.clone()));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Renders every chart of an artifact directory and returns the files
/// written. `history.csv` must exist.
pub fn emit_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let history = read_history(&dir.join("history.csv"))?;
    let mut written = Vec::new();
    let save = |written: &mut Vec<PathBuf>, name: String, chart: Chart| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, chart.render())?;
        written.push(path);
        Ok(())
    };
    let curve = |label: &str, f: &dyn Fn(&super::artifacts::HistoryRow) -> f64| Series {
        label: label.into(),
        points: history.iter().map(|r| (r.iteration as f64, f(r))).collect(),
    };
    save(
        &mut written,
        "metrics.svg".into(),
        Chart {
            title: "Metrics per outer iteration".into(),
            x_label: "outer iteration".into(),
            y_label: "metric".into(),
            log_y: false,
            lines: true,
            series: vec![
                curve("V_out (outer training)", &|r| r.outer_metric),
                curve("validation", &|r| r.val_metric),
                curve("test", &|r| r.test_metric),
            ],
        },
    )?;
    save(
        &mut written,
        "refined_edges.svg".into(),
        Chart {
            title: "Refined edges (weight > 1% of max)".into(),
            x_label: "outer iteration".into(),
            y_label: "edges".into(),
            log_y: false,
            lines: true,
            series: vec![curve("refined", &|r| r.refined_edges as f64)],
        },
    )?;
    save(
        &mut written,
        "objective.svg".into(),
        Chart {
            title: "Outer loss".into(),
            x_label: "outer iteration".into(),
            y_label: "loss".into(),
            log_y: true,
            lines: true,
            series: vec![curve("F_out", &|r| r.f_out), curve("objective", &|r| r.objective)],
        },
    )?;
    for (prefix, header, what) in
        [("profile_iter", PROFILE_HEADER, "|hypergradient|"), ("g2g_signal_iter", SIGNAL_HEADER, "|weight change|")]
    {
        for (t, path) in snapshot_files(dir, prefix)? {
            let rows = read_profile(&path, header)?;
            let points =
                rows.iter().map(|r| (r.distance.unwrap_or(INF_BUCKET) as f64, r.magnitude)).collect::<Vec<_>>();
            save(
                &mut written,
                format!("{prefix}{t}.svg"),
                Chart {
                    title: format!("{what} vs edge distance, iteration {t} (∞ drawn at {INF_BUCKET})"),
                    x_label: "edge distance".into(),
                    y_label: format!("{what} (log10, floor 1e-20)"),
                    log_y: true,
                    lines: false,
                    series: vec![Series { label: format!("{} edges", rows.len()), points }],
                },
            )?;
            let buckets = dir.join(format!("{prefix}{t}_buckets.csv"));
            write_buckets(&buckets, &bucket_summary(&rows))?;
            written.push(buckets);
        }
    }
    Ok(written)
}
