//! CSV, SVG and manifest files for a run directory.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{io_at, Result};
use crate::experiment::RunOutput;
use crate::metrics::{aggregate_curves, final_return, MetricsLog};

pub const METRICS_CSV: &str = "metrics.csv";
pub const CURVE_SVG: &str = "learning_curve.svg";
pub const MANIFEST: &str = "run.json";

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    version: &'a str,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<Summary>,
}

#[derive(Serialize)]
struct Summary {
    events: usize,
    labels: usize,
    discarded: usize,
    final_return: Option<f64>,
    wall_clock_secs: f64,
}

pub fn write_manifest(
    dir: &Path,
    config: &ExperimentConfig,
    status: &str,
    out: Option<&RunOutput>,
    error: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let m = Manifest {
        status,
        version: env!("CARGO_PKG_VERSION"),
        config,
        error,
        summary: out.map(|o| Summary {
            events: o.log.len(),
            labels: o.dataset.len(),
            discarded: o.discarded,
            final_return: final_return(&o.log),
            wall_clock_secs: o.wall_clock_secs,
        }),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(io_at(path))
}

/// Writes `metrics.csv` and `learning_curve.svg`; both depend only on
/// the log, so re-emitting gives identical bytes.
pub fn emit_outputs(log: &MetricsLog, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    let path = dir.join(METRICS_CSV);
    std::fs::write(&path, csv).map_err(io_at(path))?;
    let svg = render_svg(&[("return", aggregate_curves(std::slice::from_ref(log)))]);
    let path = dir.join(CURVE_SVG);
    std::fs::write(&path, svg).map_err(io_at(path))
}

pub fn read_log(run_dir: &Path) -> Result<MetricsLog> {
    let path = run_dir.join(METRICS_CSV);
    let f = std::fs::File::open(&path).map_err(io_at(path))?;
    MetricsLog::read_csv(f)
}

/// Mean-over-runs learning curve of several run directories, written as
/// SVG to `out`. Returns the aggregated points.
pub fn plot_runs(runs: &[&Path], out: &Path) -> Result<Vec<(f64, f64)>> {
    let logs = runs.iter().map(|r| read_log(r)).collect::<Result<Vec<_>>>()?;
    let curve = aggregate_curves(&logs);
    let label = format!("mean of {} runs", logs.len());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    std::fs::write(out, render_svg(&[(label.as_str(), curve.clone())])).map_err(io_at(out))?;
    Ok(curve)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Line chart of true episode return against environment steps.
pub fn render_svg(series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">true episode return</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, x, y, anchor) in [
        (x0, sx(x0), H - PAD + 16.0, "start"),
        (x1, sx(x1), H - PAD + 16.0, "end"),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v:.0}</text>"#);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, PAD - 4.0, y + 4.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#,
            PAD + 8.0,
            PAD + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
