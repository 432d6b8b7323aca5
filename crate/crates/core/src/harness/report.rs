use std::fmt::Write as _;
use std::path::Path;

use super::{RunSummary, REWARDS_HEADER};
use crate::error::{Error, Result};
use crate::textmetrics::{evaluate_caption_file, EvalOptions, MetricReport};

/// Cell text for a metric that was not measured.
pub const ABSENT: &str = "—";

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        file: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Both corpora scored with the same options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionComparison {
    pub before: MetricReport,
    pub after: MetricReport,
}

impl CaptionComparison {
    pub fn table(&self, scale: f64) -> String {
        let mut out = format!("{:<8} {:>10} {:>10}\n", "metric", "before", "after");
        for ((name, b), (_, a)) in self.before.rows().into_iter().zip(self.after.rows()) {
            let _ = writeln!(out, "{name:<8} {:>10.4} {:>10.4}", b * scale, a * scale);
        }
        let _ = writeln!(out, "{:<8} {:>10} {:>10}", "pairs", self.before.pair_count, self.after.pair_count);
        out
    }

    pub fn csv(&self, scale: f64) -> String {
        let mut out = String::from("metric,before,after\n");
        for ((name, b), (_, a)) in self.before.rows().into_iter().zip(self.after.rows()) {
            let _ = writeln!(out, "{name},{:.6},{:.6}", b * scale, a * scale);
        }
        out
    }
}

pub fn eval_captions(before: &Path, after: &Path, options: EvalOptions) -> Result<CaptionComparison> {
    Ok(CaptionComparison {
        before: evaluate_caption_file(before, options)?,
        after: evaluate_caption_file(after, options)?,
    })
}

/// One framework row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub framework: String,
    /// In [0, 1].
    pub completion_rate: f64,
    pub cum_reward: f64,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
    pub rouge_l: Option<f64>,
}

impl From<&RunSummary> for CompareRow {
    fn from(s: &RunSummary) -> Self {
        CompareRow {
            framework: s.label.clone(),
            completion_rate: s.completion_rate,
            cum_reward: s.mean_cum_reward,
            bleu: s.caption_metrics.map(|m| m.bleu),
            meteor: s.caption_metrics.map(|m| m.meteor),
            rouge_l: s.caption_metrics.map(|m| m.rouge_l),
        }
    }
}

pub fn load_run_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.line(), e.to_string()))
}

/// Rate cell: `85%`, `85` and `0.85` all mean 0.85. Bare numbers above 1
/// are read as percentages.
fn parse_rate(cell: &str) -> Option<f64> {
    let cell = cell.trim();
    let (num, pct) = match cell.strip_suffix('%') {
        Some(n) => (n.trim(), true),
        None => (cell, false),
    };
    let v: f64 = num.parse().ok()?;
    let v = if pct || v > 1.0 { v / 100.0 } else { v };
    (v.is_finite() && (0.0..=1.0).contains(&v)).then_some(v)
}

/// Reads externally supplied rows. Required columns: `framework`,
/// `completion_rate`, `cum_reward`; optional: `bleu`, `meteor`, `rouge_l`
/// (empty cells mean absent).
pub fn read_external_rows(path: &Path) -> Result<Vec<CompareRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| schema(path, 1, e.to_string()))?;
    let headers = reader.headers().map_err(|e| schema(path, 1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| schema(path, 1, format!("missing column {name:?}")));
    let (fw, rate, reward) = (need("framework")?, need("completion_rate")?, need("cum_reward")?);
    let (bleu, meteor, rouge) = (col("bleu"), col("meteor"), col("rouge_l"));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| schema(path, line, e.to_string()))?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let optional = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
            match c.map(cell).filter(|s| !s.is_empty() && *s != ABSENT) {
                None => Ok(None),
                Some(s) => s
                    .parse()
                    .map(Some)
                    .map_err(|_| schema(path, line, format!("{name}: not a number: {s:?}"))),
            }
        };
        rows.push(CompareRow {
            framework: cell(fw).to_string(),
            completion_rate: parse_rate(cell(rate))
                .ok_or_else(|| schema(path, line, format!("completion_rate: bad value {:?}", cell(rate))))?,
            cum_reward: cell(reward)
                .parse()
                .map_err(|_| schema(path, line, format!("cum_reward: not a number: {:?}", cell(reward))))?,
            bleu: optional(bleu, "bleu")?,
            meteor: optional(meteor, "meteor")?,
            rouge_l: optional(rouge, "rouge_l")?,
        });
    }
    Ok(rows)
}

/// Own runs followed by external rows, sorted by completion rate (highest
/// first, input order on ties).
pub fn compare_rows(runs: &[RunSummary], external: Vec<CompareRow>) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = runs.iter().map(CompareRow::from).collect();
    rows.extend(external);
    rows.sort_by(|a, b| b.completion_rate.total_cmp(&a.completion_rate));
    rows
}

fn metric_cell(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |v| format!("{v:.4}"))
}

pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let header = [
        "Framework",
        "Task Completion Rate (%)",
        "Cumulative Reward",
        "BLEU",
        "METEOR",
        "ROUGE-L",
    ];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.framework.clone(),
                format!("{:.1}", r.completion_rate * 100.0),
                format!("{:.2}", r.cum_reward),
                metric_cell(r.bleu),
                metric_cell(r.meteor),
                metric_cell(r.rouge_l),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cols: &[String]| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(" | ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header.map(String::from));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("framework,completion_rate,cum_reward,bleu,meteor,rouge_l\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let name = if r.framework.contains([',', '"', '\n']) {
            format!("\"{}\"", r.framework.replace('"', "\"\""))
        } else {
            r.framework.clone()
        };
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{}",
            r.completion_rate,
            r.cum_reward,
            opt(r.bleu),
            opt(r.meteor),
            opt(r.rouge_l)
        );
    }
    out
}

/// Reads the cumulative-reward column of a rewards file, checking the header
/// and that episode indices run 0, 1, 2, ...
pub fn read_rewards_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == REWARDS_HEADER => {}
        other => {
            return Err(schema(
                path,
                1,
                format!("expected header {REWARDS_HEADER:?}, found {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut rewards = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(schema(path, lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let episode: usize = fields[0]
            .parse()
            .map_err(|_| schema(path, lineno, format!("episode: not an index: {:?}", fields[0])))?;
        if episode != rewards.len() {
            return Err(schema(path, lineno, format!("episode {episode} out of sequence")));
        }
        let reward: f64 = fields[1]
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| schema(path, lineno, format!("cum_reward: not a number: {:?}", fields[1])))?;
        rewards.push(reward);
    }
    if rewards.is_empty() {
        return Err(schema(path, 1, "no episodes"));
    }
    Ok(rewards)
}

/// Trailing mean over the last `window` values (fewer at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub rewards: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Moving-average reward curves as an SVG line chart, one polyline per
/// series. Output depends only on the inputs.
pub fn emit_curve(series: &[CurveSeries], window: usize) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.rewards.is_empty()) {
        return Err(Error::InvalidInput("curve needs at least one non-empty series".into()));
    }
    if window == 0 {
        return Err(Error::InvalidInput("curve window must be positive".into()));
    }
    let smoothed: Vec<Vec<f64>> = series.iter().map(|s| moving_average(&s.rewards, window)).collect();
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let legend_h = 18.0 * series.len() as f64;
    let plot_w = w - left - right;
    let plot_h = h - top - bottom - legend_h;
    let max_len = smoothed.iter().map(Vec::len).max().unwrap_or(1);
    let mut lo = smoothed.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let mut hi = smoothed.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let x_of = |i: usize| {
        if max_len == 1 {
            left + plot_w / 2.0
        } else {
            left + plot_w * i as f64 / (max_len - 1) as f64
        }
    };
    let y_of = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (left, top + plot_h, left + plot_w, top);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    let text = |svg: &mut String, x: f64, y: f64, anchor: &str, body: &str| {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
            xml_escape(body)
        );
    };
    text(&mut svg, x0 - 6.0, y1 + 4.0, "end", &format!("{hi:.2}"));
    text(&mut svg, x0 - 6.0, y0 + 4.0, "end", &format!("{lo:.2}"));
    text(&mut svg, x0, y0 + 16.0, "middle", "0");
    text(&mut svg, x1, y0 + 16.0, "middle", &format!("{}", max_len - 1));
    text(&mut svg, (x0 + x1) / 2.0, y0 + 32.0, "middle", "episode");
    text(
        &mut svg,
        x0,
        y1 - 6.0,
        "start",
        &format!("cumulative reward, moving average over {window}"),
    );
    for (k, (s, ys)) in series.iter().zip(&smoothed).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = h - legend_h + 18.0 * k as f64 - 4.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="14" height="3" fill="{color}"/>"#,
            left,
            ly - 4.0
        );
        text(&mut svg, left + 20.0, ly, "start", &s.label);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
