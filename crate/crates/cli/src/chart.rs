//! Ablation tables and smoothed line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Smoothing window for charts, in steps.
pub const SMOOTH_WINDOW: usize = 25;

/// One CSV row: the raw reward of one step of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub step: usize,
    pub value: String,
    pub seed: u64,
    pub reward: f64,
    /// FLOPs per sample relative to the first arm, in percent.
    pub flops_pct: Option<u64>,
}

/// Centered moving average; near the ends the window shrinks to what is
/// available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn to_csv(rows: &[Row]) -> String {
    let with_flops = rows.iter().any(|r| r.flops_pct.is_some());
    let mut out = String::from(if with_flops {
        "step,value,seed,reward,flops_pct\n"
    } else {
        "step,value,seed,reward\n"
    });
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.step, r.value, r.seed, r.reward);
        if with_flops {
            let _ = write!(out, ",{}", r.flops_pct.map(|p| p.to_string()).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}

/// Seed-averaged reward per step for each value, in first-seen order.
pub fn mean_curves(rows: &[Row]) -> Vec<(String, Vec<f64>)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.value) {
            order.push(r.value.clone());
        }
        let e = acc
            .entry(r.value.clone())
            .or_default()
            .entry(r.step)
            .or_insert((0.0, 0));
        e.0 += r.reward;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|v| {
            let ys = acc[&v].values().map(|(s, n)| s / *n as f64).collect();
            (v, ys)
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Line chart of smoothed curves with a legend.
pub fn to_svg(title: &str, curves: &[(String, Vec<f64>)], window: usize) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let smoothed: Vec<(&str, Vec<f64>)> = curves
        .iter()
        .map(|(l, ys)| (l.as_str(), moving_average(ys, window)))
        .collect();
    let n = smoothed.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0).max(2);
    let ymax = smoothed
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .fold(1.0_f64, f64::max);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v / ymax).clamp(0.0, 1.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for tick in [0.0, 0.5, 1.0] {
        let v = tick * ymax;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.2}</text>"#,
            pad - 4.0,
            y(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">step</text>"#,
        w / 2.0,
        h - 12.0
    );
    for (k, (label, ys)) in smoothed.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (i, v) in ys.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, x(i), y(*v));
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let ly = pad + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            w - pad - 110.0,
            w - pad - 90.0,
            w - pad - 86.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
