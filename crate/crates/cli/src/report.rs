//! Read-only summaries of an experiment directory: WER tables (rows are
//! systems, columns the base test and the four rare-word sets) and SVG line
//! plots with their data alongside. Only `<out>/report/` is written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jeit_core::corpus::DOMAIN_NAMES;
use jeit_core::training::MetricsLog;

use crate::artifacts::ScoreTable;
use crate::commands::{metrics_path, read_curve, run_names, CURVE_FILE, DECODE_DIR, FUSED_DIR, SCORES_FILE};
use crate::config::RunConfig;
use crate::CliError;

pub const REPORT_DIR: &str = "report";

/// One table row, WERs in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub system: String,
    pub base: f64,
    pub rare_sets: [f64; 4],
    pub rare: f64,
}

fn fmt_pct(x: f64) -> String {
    if x.is_finite() {
        format!("{:.2}", 100.0 * x)
    } else {
        "-".into()
    }
}

impl TableRow {
    fn from_scores(t: &ScoreTable) -> Self {
        let r = |s: &str| t.rate(s).unwrap_or(f64::NAN);
        Self {
            system: t.system.clone(),
            base: r("base"),
            rare_sets: DOMAIN_NAMES.map(r),
            rare: t.rare().rate(),
        }
    }
}

pub fn markdown_table(rows: &[TableRow]) -> String {
    let mut s = String::from("| system | base |");
    for d in DOMAIN_NAMES {
        let _ = write!(s, " {d} |");
    }
    s.push_str(" rare (pooled) |\n|---|---|");
    s.push_str(&"---|".repeat(DOMAIN_NAMES.len() + 1));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} | {} |", r.system, fmt_pct(r.base));
        for x in r.rare_sets {
            let _ = write!(s, " {} |", fmt_pct(x));
        }
        let _ = writeln!(s, " {} |", fmt_pct(r.rare));
    }
    s
}

fn tsv_table(rows: &[TableRow]) -> String {
    let mut s = String::from("system\tbase");
    for d in DOMAIN_NAMES {
        let _ = write!(s, "\t{d}");
    }
    s.push_str("\trare\n");
    for r in rows {
        let _ = write!(s, "{}\t{:?}", r.system, r.base);
        for x in r.rare_sets {
            let _ = write!(s, "\t{x:?}");
        }
        let _ = writeln!(s, "\t{:?}", r.rare);
    }
    s
}

/// A named polyline for [`svg_plot`].
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Minimal line chart with axes, tick labels and a legend.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 160.0, 30.0, 45.0);
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(x),
            top + ph + 14.0,
            tick(x)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 4.0,
            sy(y) + 4.0,
            tick(y)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 34.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn series_tsv(series: &[Series], x: &str, y: &str) -> String {
    let mut s = format!("series\t{x}\t{y}\n");
    for ser in series {
        for (a, b) in &ser.points {
            let _ = writeln!(s, "{}\t{a:?}\t{b:?}", ser.name);
        }
    }
    s
}

/// Every test-set `scores.json` under the runs directory, sorted by path.
fn score_tables(cfg: &RunConfig) -> Result<Vec<ScoreTable>, CliError> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for run in run_names(cfg)? {
        for sub in [DECODE_DIR, FUSED_DIR] {
            let dec = cfg.out_dir.join("runs").join(&run).join(sub);
            if !dec.is_dir() {
                continue;
            }
            for e in fs::read_dir(&dec)? {
                let p = e?.path().join(SCORES_FILE);
                if p.is_file() {
                    paths.push(p);
                }
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| ScoreTable::read(p)).collect()
}

fn write_plot(dir: &Path, stem: &str, title: &str, x: &str, y: &str, series: &[Series]) -> Result<(), CliError> {
    if series.is_empty() {
        return Ok(());
    }
    fs::write(dir.join(format!("{stem}.svg")), svg_plot(title, x, y, series))?;
    fs::write(dir.join(format!("{stem}.tsv")), series_tsv(series, x, y))?;
    Ok(())
}

/// Writes `table.md`, `table.tsv` and the plots; returns the table rows.
pub fn report(cfg: &RunConfig) -> Result<Vec<TableRow>, CliError> {
    let dir = cfg.out_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let rows: Vec<TableRow> = score_tables(cfg)?
        .iter()
        .filter(|t| t.sets.contains_key("base"))
        .map(TableRow::from_scores)
        .collect();
    fs::write(dir.join("table.md"), markdown_table(&rows))?;
    fs::write(dir.join("table.tsv"), tsv_table(&rows))?;

    let mut ilma = Vec::new();
    let mut train_wer = Vec::new();
    let mut train_loss = Vec::new();
    for run in run_names(cfg)? {
        let curve = cfg.out_dir.join("runs").join(&run).join(CURVE_FILE);
        if curve.is_file() {
            let c = read_curve(&curve)?;
            ilma.push(Series {
                name: run.clone(),
                points: c.iter().map(|p| (p.step as f64, 100.0 * p.rare_wer)).collect(),
            });
            continue;
        }
        let m = metrics_path(cfg, &run);
        if !m.is_file() {
            continue;
        }
        let (_, log) = MetricsLog::from_jsonl(&fs::read_to_string(&m)?)?;
        train_wer.push(Series {
            name: run.clone(),
            points: log.evals().map(|e| (e.step as f64, 100.0 * e.rare_wer)).collect(),
        });
        // Mean over windows of 50 steps keeps the plot legible.
        let steps: Vec<_> = log.steps().collect();
        train_loss.push(Series {
            name: run.clone(),
            points: steps
                .chunks(50)
                .map(|c| {
                    let mean = c.iter().map(|s| s.total).sum::<f64>() / c.len() as f64;
                    (c.last().expect("non-empty chunk").step as f64 + 1.0, mean)
                })
                .collect(),
        });
    }
    write_plot(
        &dir,
        "ilma_curves",
        "ILMA: rare-word WER vs adaptation steps",
        "step",
        "rare WER (%)",
        &ilma,
    )?;
    write_plot(
        &dir,
        "train_wer",
        "Rare-word WER during training",
        "step",
        "rare WER (%)",
        &train_wer,
    )?;
    write_plot(
        &dir,
        "train_loss",
        "Training objective (50-step means)",
        "step",
        "loss",
        &train_loss,
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let rows = vec![TableRow {
            system: "mhat-jeit".into(),
            base: 0.05,
            rare_sets: [0.1, 0.2, f64::NAN, 0.4],
            rare: 0.25,
        }];
        let md = markdown_table(&rows);
        assert!(md.starts_with("| system | base | Maps | Play | Web | YT | rare (pooled) |"));
        assert!(md.contains("| mhat-jeit | 5.00 | 10.00 | 20.00 | - | 40.00 | 25.00 |"));
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_plot(
            "a<b",
            "x",
            "y",
            &[Series {
                name: "s".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b") && s.contains("<polyline"));
    }
}
