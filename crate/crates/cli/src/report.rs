//! Metric files, ROC CSVs, and the SVG/markdown report built from them.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dgq_core::metrics::{BootstrapResult, ConfusionMatrix, RocPoint, METRIC_NAMES};
use serde_json::{json, Value};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const PLOT: (f64, f64, f64, f64) = (80.0, 60.0, 720.0, 520.0); // left, top, right, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// One evaluation as written by `evaluate` and `compare`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub label: String,
    pub n: usize,
    pub tta: bool,
    /// `(name, value)` in report order; `None` for an undefined AUC.
    pub metrics: Vec<(String, Option<f64>)>,
    pub ci: Vec<(String, [f64; 2])>,
    pub confusion: ConfusionMatrix,
    pub n_boot: usize,
    pub seed: u64,
}

impl MetricsFile {
    pub fn from_bootstrap(label: &str, tta: bool, cm: ConfusionMatrix, b: &BootstrapResult) -> Self {
        Self {
            label: label.to_owned(),
            n: cm.total() as usize,
            tta,
            metrics: METRIC_NAMES.iter().map(|&k| (k.to_owned(), b.point.get(k))).collect(),
            ci: b.intervals.iter().map(|(k, iv)| (k.clone(), [iv.lower, iv.upper])).collect(),
            confusion: cm,
            n_boot: b.n_boot,
            seed: b.seed,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).and_then(|(_, v)| *v)
    }

    pub fn interval(&self, name: &str) -> Option<[f64; 2]> {
        self.ci.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn to_json(&self) -> Value {
        let metrics: serde_json::Map<String, Value> = self.metrics.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let ci: serde_json::Map<String, Value> = self.ci.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let c = self.confusion;
        json!({
            "label": self.label,
            "n": self.n,
            "tta": self.tta,
            "metrics": metrics,
            "ci": ci,
            "confusion": {"tn": c.tn, "fp": c.fp, "fn": c.fn_, "tp": c.tp},
            "n_boot": self.n_boot,
            "seed": self.seed,
        })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let file = origin.display();
        let v: Value = serde_json::from_str(text).with_context(|| format!("{file}: not valid JSON"))?;
        let field = |key: &str| v.get(key).with_context(|| format!("{file}: missing key `{key}`"));
        let uint = |val: &Value, key: &str| val.as_u64().with_context(|| format!("{file}: key `{key}` must be a nonnegative integer"));

        let label = field("label")?
            .as_str()
            .with_context(|| format!("{file}: key `label` must be a string"))?
            .to_owned();
        let tta = v.get("tta").and_then(Value::as_bool).unwrap_or(false);
        let m = field("metrics")?;
        let mut metrics = Vec::new();
        for name in METRIC_NAMES {
            let key = format!("metrics.{name}");
            let raw = m.get(name).with_context(|| format!("{file}: missing key `{key}`"))?;
            let value = match raw {
                Value::Null => None,
                other => {
                    let x = other.as_f64().with_context(|| format!("{file}: key `{key}` must be a number or null"))?;
                    if !(0.0..=1.0).contains(&x) {
                        bail!("{file}: key `{key}` = {x} outside [0, 1]");
                    }
                    Some(x)
                }
            };
            metrics.push((name.to_owned(), value));
        }
        let mut ci = Vec::new();
        if let Some(obj) = v.get("ci") {
            let obj = obj.as_object().with_context(|| format!("{file}: key `ci` must be an object"))?;
            for name in METRIC_NAMES {
                let Some(raw) = obj.get(name) else { continue };
                let pair = raw
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]))
                    .with_context(|| format!("{file}: key `ci.{name}` must be [lower, upper]"))?;
                if pair[0] > pair[1] {
                    bail!("{file}: key `ci.{name}` has lower > upper");
                }
                ci.push((name.to_owned(), pair));
            }
        }
        let c = field("confusion")?;
        let count = |k: &str| -> Result<u64> {
            let key = format!("confusion.{k}");
            uint(c.get(k).with_context(|| format!("{file}: missing key `{key}`"))?, &key)
        };
        let confusion = ConfusionMatrix {
            tn: count("tn")?,
            fp: count("fp")?,
            fn_: count("fn")?,
            tp: count("tp")?,
        };
        Ok(Self {
            label,
            n: v.get("n").and_then(Value::as_u64).map_or(confusion.total() as usize, |n| n as usize),
            tta,
            metrics,
            ci,
            confusion,
            n_boot: v.get("n_boot").and_then(Value::as_u64).unwrap_or(0) as usize,
            seed: v.get("seed").and_then(Value::as_u64).unwrap_or(0),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path)
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        let t = if p.threshold.is_infinite() { "inf".to_owned() } else { format!("{}", p.threshold) };
        let _ = writeln!(out, "{},{},{t}", p.fpr, p.tpr);
    }
    out
}

pub fn read_roc(path: &Path) -> Result<Vec<RocPoint>> {
    let file = path.display();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {file}"))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "fpr,tpr,threshold" => {}
        _ => bail!("{file}: expected header `fpr,tpr,threshold`"),
    }
    let mut pts = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            bail!("{file}:{}: expected 3 columns", i + 1);
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().with_context(|| format!("{file}:{}: bad {what} `{s}`", i + 1))
        };
        pts.push(RocPoint {
            fpr: num(cols[0], "fpr")?,
            tpr: num(cols[1], "tpr")?,
            threshold: num(cols[2], "threshold")?,
        });
    }
    if pts.len() < 2 {
        bail!("{file}: ROC curve needs at least two points");
    }
    Ok(pts)
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" style="font-family:sans-serif;font-size:12px">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" style="fill:#ffffff"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" style="font-size:16px;text-anchor:middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn y_scale(v: f64) -> f64 {
    let (_, top, _, bottom) = PLOT;
    bottom - v * (bottom - top)
}

fn x_scale(v: f64) -> f64 {
    let (left, _, right, _) = PLOT;
    left + v * (right - left)
}

fn axes(s: &mut String, x_label: &str, y_label: &str, x_ticks: bool) {
    let (left, top, right, bottom) = PLOT;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" style="stroke:#000000"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" style="stroke:#000000"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y_scale(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{left}" y2="{y}" style="stroke:#000000"/>"#, left - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" style="text-anchor:end">{}</text>"#,
            left - 8.0,
            y + 4.0,
            f4(v)
        );
        if x_ticks {
            let x = x_scale(v);
            let _ = writeln!(s, r#"<line x1="{x}" y1="{bottom}" x2="{x}" y2="{}" style="stroke:#000000"/>"#, bottom + 5.0);
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" style="text-anchor:middle">{}</text>"#,
                bottom + 20.0,
                f4(v)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" style="text-anchor:middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" transform="rotate(-90 20 {})" style="text-anchor:middle">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(y_label)
    );
}

fn legend(s: &mut String, entries: &[String]) {
    let (_, top, right, _) = PLOT;
    for (i, e) in entries.iter().enumerate() {
        let y = top + 10.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="12" style="fill:{color}"/>"#,
            right - 190.0,
            y - 10.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, right - 172.0, escape(e));
    }
}

/// Grouped bars, one group per metric and one bar per file, with CI whiskers.
pub fn bar_chart_svg(files: &[MetricsFile]) -> String {
    let mut s = svg_open("Metrics with 95% bootstrap intervals");
    axes(&mut s, "metric", "value", false);
    let (left, _, right, bottom) = PLOT;
    let group_w = (right - left) / METRIC_NAMES.len() as f64;
    let bar_w = (group_w * 0.8) / files.len().max(1) as f64;
    for (g, name) in METRIC_NAMES.iter().enumerate() {
        let gx = left + g as f64 * group_w + group_w * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" style="text-anchor:middle">{name}</text>"#,
            left + (g as f64 + 0.5) * group_w,
            bottom + 20.0
        );
        for (i, f) in files.iter().enumerate() {
            let Some(v) = f.metric(name) else { continue };
            let color = PALETTE[i % PALETTE.len()];
            let x = gx + i as f64 * bar_w;
            let y = y_scale(v);
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" style="fill:{color}"><title>{} {name} {}</title></rect>"#,
                bar_w * 0.9,
                bottom - y,
                escape(&f.label),
                f4(v)
            );
            if let Some([lo, hi]) = f.interval(name) {
                let cx = x + bar_w * 0.45;
                let (ylo, yhi) = (y_scale(lo), y_scale(hi));
                let _ = writeln!(s, r#"<line class="whisker" x1="{cx:.2}" y1="{ylo:.2}" x2="{cx:.2}" y2="{yhi:.2}" style="stroke:#000000"/>"#);
                for yy in [ylo, yhi] {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" style="stroke:#000000"/>"#,
                        cx - bar_w * 0.2,
                        cx + bar_w * 0.2
                    );
                }
            }
        }
    }
    let labels: Vec<String> = files.iter().map(|f| f.label.clone()).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

/// ROC curves over the unit square with the chance diagonal.
pub fn roc_svg(curves: &[(String, Vec<RocPoint>)]) -> String {
    let mut s = svg_open("ROC curves");
    axes(&mut s, "false positive rate", "true positive rate", true);
    let _ = writeln!(
        s,
        r#"<line class="diagonal" x1="{}" y1="{}" x2="{}" y2="{}" style="stroke:#999999;stroke-dasharray:4 4"/>"#,
        x_scale(0.0),
        y_scale(0.0),
        x_scale(1.0),
        y_scale(1.0)
    );
    let mut entries = Vec::new();
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_scale(p.fpr.clamp(0.0, 1.0)), y_scale(p.tpr.clamp(0.0, 1.0))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="roc" points="{}" style="fill:none;stroke:{color};stroke-width:2"/>"#,
            path.join(" ")
        );
        entries.push(format!("{label} (AUC {})", f4(dgq_core::metrics::trapezoid_area(pts))));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    s
}

pub fn summary_markdown(files: &[MetricsFile]) -> String {
    let mut s = String::from("# Evaluation summary\n\n## Metrics\n\n| model | n |");
    for name in METRIC_NAMES {
        let _ = write!(s, " {name} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(METRIC_NAMES.len()));
    s.push('\n');
    for f in files {
        let _ = write!(s, "| {} | {} |", f.label, f.n);
        for name in METRIC_NAMES {
            match (f.metric(name), f.interval(name)) {
                (Some(v), Some([lo, hi])) => {
                    let _ = write!(s, " {} [{}, {}] |", f4(v), f4(lo), f4(hi));
                }
                (Some(v), None) => {
                    let _ = write!(s, " {} |", f4(v));
                }
                (None, _) => s.push_str(" n/a |"),
            }
        }
        s.push('\n');
    }
    s.push_str("\n## Confusion matrices\n\n| model | TN | FP | FN | TP |\n|---|---|---|---|---|\n");
    for f in files {
        let c = f.confusion;
        let _ = writeln!(s, "| {} | {} | {} | {} | {} |", f.label, c.tn, c.fp, c.fn_, c.tp);
    }
    s
}
