//! Static SVG figures for the scaling sweep and the ablation tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use super::ablate::{ContextRow, PolicyRow, ProbeRow, ScalingRow};
use super::artifacts::read_json;
use super::{Pipeline, Stage};
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// A named series of y values.
pub type Series<'a> = (&'a str, Vec<f64>);

fn frame(title: &str, lo: f64, hi: f64) -> String {
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
"#,
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v, lo, hi);
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end">{:.2}</text><line x1="{PAD}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            PAD - 6.0,
            y + 4.0,
            v,
            W - PAD
        );
    }
    s
}

fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD)
}

fn range(series: &[Series]) -> (f64, f64) {
    let vals = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi > lo {
        (lo, hi * 1.05)
    } else {
        (lo, lo + 1.0)
    }
}

fn legend(s: &mut String, series: &[Series]) {
    for (i, (name, _)) in series.iter().enumerate() {
        let y = PAD + 16.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 120.0,
            y - 9.0,
            W - PAD - 105.0,
            y,
            escape(name)
        );
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Polylines of each series over shared x values.
pub fn line_chart(title: &str, x_label: &str, xs: &[f64], series: &[Series]) -> String {
    let (lo, hi) = range(series);
    let (xlo, xhi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if xhi > xlo { xhi - xlo } else { 1.0 };
    let x_of = |x: f64| PAD + (x - xlo) / span * (W - 2.0 * PAD);
    let mut s = frame(title, lo, hi);
    for &x in xs {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#,
            x_of(x),
            H - PAD + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label)
    );
    for (i, (_, ys)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.1},{:.1}", x_of(x), y_of(y, lo, hi)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{c}"/>"#);
        }
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[String], series: &[Series]) -> String {
    let (lo, hi) = range(series);
    let mut s = frame(title, lo, hi);
    let group = (W - 2.0 * PAD) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let gx = PAD + group * g as f64 + group * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            H - PAD + 16.0,
            escape(cat)
        );
        for (i, (_, ys)) in series.iter().enumerate() {
            let v = ys.get(g).copied().unwrap_or(0.0);
            let top = y_of(v, lo, hi);
            let base = y_of(lo.max(0.0), lo, hi);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bar * i as f64,
                top.min(base),
                bar,
                (base - top).abs(),
                COLORS[i % COLORS.len()]
            );
        }
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

impl Pipeline {
    /// Render a figure for every scaling or ablation table present in the
    /// output directory. Returns the files written.
    pub fn plots(&self) -> Result<Vec<String>> {
        let started = Instant::now();
        let mut written = Vec::new();
        let mut read = Vec::new();
        let mut emit = |name: &str, svg: String| -> Result<()> {
            write_svg(&self.path(name), &svg)?;
            written.push(name.to_string());
            Ok(())
        };
        if self.path("scaling.json").exists() {
            read.push("scaling.json");
            let rows: Vec<ScalingRow> = read_json(&self.path("scaling.json"))?;
            let xs: Vec<f64> = rows.iter().map(|r| r.budget).collect();
            emit(
                "plot_scaling.svg",
                line_chart(
                    "Probe accuracy vs token budget",
                    "fraction of pre-training tokens",
                    &xs,
                    &[
                        (
                            "music knowledge %",
                            rows.iter().map(|r| r.music_knowledge_acc).collect(),
                        ),
                        ("q2i %", rows.iter().map(|r| r.q2i_acc).collect()),
                    ],
                ),
            )?;
        }
        if self.path("ablate_pretrain.json").exists() {
            read.push("ablate_pretrain.json");
            let rows: Vec<ProbeRow> = read_json(&self.path("ablate_pretrain.json"))?;
            let cats: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
            emit(
                "plot_ablate_pretrain.svg",
                bar_chart(
                    "Pre-training stages",
                    &cats,
                    &[
                        (
                            "music knowledge %",
                            rows.iter().map(|r| r.music_knowledge_acc).collect(),
                        ),
                        ("q2i %", rows.iter().map(|r| r.q2i_acc).collect()),
                    ],
                ),
            )?;
        }
        if self.path("ablate_context.json").exists() {
            read.push("ablate_context.json");
            let rows: Vec<ContextRow> = read_json(&self.path("ablate_context.json"))?;
            let cats = ["items", "+profile", "+state", "+feedback"].map(String::from);
            emit(
                "plot_ablate_context.svg",
                bar_chart(
                    "U2I perplexity by user context",
                    &cats[..rows.len().min(4)],
                    &[("ppl", rows.iter().map(|r| r.u2i_ppl).collect())],
                ),
            )?;
        }
        for name in ["ablate_rewards", "ablate_training_stage"] {
            let file = format!("{name}.json");
            if !self.path(&file).exists() {
                continue;
            }
            let rows: Vec<PolicyRow> = read_json(&self.path(&file))?;
            let cats: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
            emit(
                &format!("plot_{name}.svg"),
                bar_chart(
                    &name.replace('_', " "),
                    &cats,
                    &[
                        (
                            "relevance % / 10",
                            rows.iter().map(|r| r.relevance_pct / 10.0).collect(),
                        ),
                        ("personalization", rows.iter().map(|r| r.personalization).collect()),
                        ("diversity %", rows.iter().map(|r| r.diversity_pct).collect()),
                    ],
                ),
            )?;
            read.push(if name == "ablate_rewards" {
                "ablate_rewards.json"
            } else {
                "ablate_training_stage.json"
            });
        }
        if written.is_empty() {
            return Err(Error::MissingArtifact {
                stage: "ablate-* or eval --suite scaling".into(),
                path: self.path("scaling.json"),
            });
        }
        let inputs: Vec<(&str, Stage)> = read.iter().map(|&f| (f, Stage::Eval)).collect();
        self.record("plots", &inputs, &written, started)?;
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_svg() {
        let l = line_chart("t", "x", &[0.25, 0.5, 1.0], &[("a", vec![1.0, 2.0, 3.0])]);
        assert!(l.starts_with("<svg") && l.trim_end().ends_with("</svg>"));
        assert_eq!(l.matches("<circle").count(), 3);
        let b = bar_chart(
            "t",
            &["p".into(), "q".into()],
            &[("a", vec![1.0, 2.0]), ("b", vec![0.5, 0.0])],
        );
        assert_eq!(b.matches("<rect").count(), 1 + 4 + 2);
    }
}
