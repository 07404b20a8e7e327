//! Result tables and plots.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{RunOutput, RunReport, SweepRow};

fn csv_field(v: &serde_json::Value) -> String {
    let s = match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

/// One row per run: grid parameters, seed, final regret, best-arm
/// fraction, convergence step.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let keys: Vec<&String> = rows.first().map(|r| r.params.keys().collect()).unwrap_or_default();
    let mut out = String::new();
    for k in &keys {
        out.push_str(k);
        out.push(',');
    }
    out.push_str("seed,final_regret,best_arm_fraction,convergence_step\n");
    for r in rows {
        for k in &keys {
            out.push_str(&csv_field(&r.params[*k]));
            out.push(',');
        }
        let conv = r.report.convergence_step.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.seed, r.report.final_regret, r.report.best_arm_fraction, conv
        );
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n{body}</svg>\n",
        y0 = H - PAD,
        x1 = W - PAD,
    )
}

/// Cumulative regret curves, one polyline per report.
pub fn regret_svg(reports: &[&RunReport]) -> String {
    let max_step = reports.iter().flat_map(|r| r.regret_curve.last()).map(|p| p.step).max().unwrap_or(1).max(1) as f64;
    let max_regret = reports
        .iter()
        .flat_map(|r| r.regret_curve.last())
        .map(|p| p.cumulative_regret)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut body = String::new();
    for (i, r) in reports.iter().enumerate() {
        let pts: Vec<String> = std::iter::once((0.0, 0.0))
            .chain(r.regret_curve.iter().map(|p| (p.step as f64, p.cumulative_regret)))
            .map(|(s, y)| {
                format!(
                    "{:.1},{:.1}",
                    PAD + s / max_step * (W - 2.0 * PAD),
                    H - PAD - y / max_regret * (H - 2.0 * PAD)
                )
            })
            .collect();
        let _ = writeln!(
            body,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">max regret {max_regret:.1} at step {max_step}</text>",
        H - 12.0
    );
    frame("cumulative regret", &body)
}

/// Stacked per-window pull fractions for one run.
pub fn pulls_svg(report: &RunReport) -> String {
    let n = report.pull_fractions.len().max(1) as f64;
    let bar = (W - 2.0 * PAD) / n;
    let mut body = String::new();
    for (i, w) in report.pull_fractions.iter().enumerate() {
        let mut y = H - PAD;
        for (a, f) in w.fractions.iter().enumerate() {
            let h = f * (H - 2.0 * PAD);
            if h <= 0.0 {
                continue;
            }
            y -= h;
            let _ = writeln!(
                body,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{}</title></rect>",
                PAD + i as f64 * bar,
                bar * 0.9,
                PALETTE[a % PALETTE.len()],
                report.arm_ids.get(a).map(String::as_str).unwrap_or("")
            );
        }
    }
    frame("pull fractions per window", &body)
}

/// Writes `<stem>.json` and optionally `<stem>.regret.svg`,
/// `<stem>.pulls.svg` and `<stem>.latency.json` under `dir`. Returns the
/// paths written. Latency is wall-clock, so it is the one file that differs
/// between runs with the same seed.
pub fn write_run(dir: &Path, stem: &str, out: &RunOutput, plots: bool, latency: bool) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![(format!("{stem}.json"), serde_json::to_vec_pretty(&out.report)?)];
    if plots {
        files.push((format!("{stem}.regret.svg"), regret_svg(&[&out.report]).into_bytes()));
        files.push((format!("{stem}.pulls.svg"), pulls_svg(&out.report).into_bytes()));
    }
    if latency {
        files.push((format!("{stem}.latency.json"), serde_json::to_vec_pretty(&out.latency)?));
    }
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}
