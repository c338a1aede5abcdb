use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::MatrixResult;
use crate::envsim::Category;
use crate::probe::ReportRow;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
    SvgBars,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [
        ReportFormat::Csv,
        ReportFormat::Json,
        ReportFormat::Markdown,
        ReportFormat::SvgBars,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "svg_bars" | "svg" => Ok(ReportFormat::SvgBars),
            _ => Err(Error::config(format!("unknown report format `{s}`"))),
        }
    }
}

/// Per-variable seed means, one row per (condition, variable).
pub fn summary_rows(result: &MatrixResult) -> Vec<ReportRow> {
    result
        .summaries
        .iter()
        .flat_map(|s| {
            s.variables.iter().map(move |v| ReportRow {
                condition: s.condition.clone(),
                variable: v.name.clone(),
                category: v.category,
                accuracy: v.accuracy,
                f1: v.f1,
            })
        })
        .collect()
}

fn cell(value: Option<(f64, f64)>, seeds: usize) -> String {
    match value {
        None => "n/a".into(),
        Some((m, s)) if seeds > 1 => format!("{m:.3} ± {s:.3}"),
        Some((m, _)) => format!("{m:.3}"),
    }
}

/// Categories reported by at least one condition.
fn present_categories(result: &MatrixResult) -> Vec<Category> {
    Category::ALL
        .into_iter()
        .filter(|c| result.summaries.iter().any(|s| s.categories.iter().any(|x| x.category == *c)))
        .collect()
}

pub fn markdown(result: &MatrixResult) -> String {
    let mut out = String::new();
    let present = present_categories(result);
    let _ = writeln!(out, "# Probe results: {}\n", result.environment);
    let _ = writeln!(
        out,
        "Config `{}`, master seed {}, {} seed(s), mask fill `{}`. F1 is {}. Means are over categories.\n",
        result.fingerprint, result.master_seed, result.seeds, result.mask_fill, result.f1_averaging
    );
    for (title, use_f1) in [("Accuracy", false), ("F1", true)] {
        let _ = writeln!(out, "## {title}\n");
        let mut header = format!("| {} |", result.environment);
        let mut rule = "|---|".to_string();
        for s in &result.summaries {
            let _ = write!(header, " {} |", s.condition);
            rule.push_str("---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for c in &present {
            let mut row = format!("| {} |", c.title());
            for s in &result.summaries {
                let v = s.categories.iter().find(|x| x.category == *c).map(|x| {
                    if use_f1 {
                        (x.f1, x.f1_std)
                    } else {
                        (x.accuracy, x.accuracy_std)
                    }
                });
                let _ = write!(row, " {} |", cell(v, s.seeds_ok));
            }
            let _ = writeln!(out, "{row}");
        }
        let mut row = "| Mean |".to_string();
        for s in &result.summaries {
            let v = (s.seeds_ok > 0).then_some(if use_f1 { (s.f1, s.f1_std) } else { (s.accuracy, s.accuracy_std) });
            let _ = write!(row, " {} |", cell(v, s.seeds_ok));
        }
        let _ = writeln!(out, "{row}\n");
    }
    let missing: Vec<&str> = Category::ALL
        .into_iter()
        .filter(|c| !present.contains(c))
        .map(|c| c.title())
        .collect();
    if !missing.is_empty() {
        let _ = writeln!(
            out,
            "Not all categories are available: {} had no variable above the entropy threshold.\n",
            missing.join(", ")
        );
    }
    let failed = result.failed_cells();
    if failed > 0 {
        let _ = writeln!(out, "{failed} cell(s) failed; see the JSON report for causes.\n");
    }
    out
}

/// Vertical bars of mean accuracy per condition for one row label.
fn svg_bars(title: &str, bars: &[(String, f64, f64)]) -> String {
    const BAR: f64 = 48.0;
    const GAP: f64 = 16.0;
    const PLOT_H: f64 = 200.0;
    const LEFT: f64 = 40.0;
    const TOP: f64 = 30.0;
    let width = LEFT + bars.len() as f64 * (BAR + GAP) + GAP;
    let height = TOP + PLOT_H + 90.0;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT:.0}" y="18" font-size="13">{title} (probe accuracy)</text>"#);
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = base - v * PLOT_H;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.0}" y1="{y:.1}" x2="{:.0}" y2="{y:.1}" stroke="#ddd"/><text x="4" y="{:.1}">{v:.2}</text>"##,
            width - GAP,
            y + 3.0
        );
    }
    for (i, (label, acc, std)) in bars.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let h = acc.clamp(0.0, 1.0) * PLOT_H;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{BAR:.0}" height="{h:.1}" fill="#4878a8"/>"##,
            base - h
        );
        if *std > 0.0 {
            let cx = x + BAR / 2.0;
            let lo = base - (acc - std).clamp(0.0, 1.0) * PLOT_H;
            let hi = base - (acc + std).clamp(0.0, 1.0) * PLOT_H;
            let _ = writeln!(s, r##"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="#222"/>"##);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{acc:.2}</text>"#, x + BAR / 2.0, base - h - 4.0);
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(40)">{label}</text>"#,
            x + 4.0,
            base + 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `result` into `dir` in the given format and returns the files.
/// Output bytes depend only on `result`.
pub fn emit_report(result: &MatrixResult, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.cells.is_empty() {
        return Err(Error::config("nothing to report: the matrix has no cells"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => write(dir.join("report.csv"), &ReportRow::to_csv(&summary_rows(result)), &mut written)?,
        ReportFormat::Json => write(dir.join("report.json"), &result.to_json(), &mut written)?,
        ReportFormat::Markdown => write(dir.join("report.md"), &markdown(result), &mut written)?,
        ReportFormat::SvgBars => {
            for c in present_categories(result) {
                let bars: Vec<(String, f64, f64)> = result
                    .summaries
                    .iter()
                    .filter_map(|s| {
                        s.categories
                            .iter()
                            .find(|x| x.category == c)
                            .map(|x| (s.condition.clone(), x.accuracy, x.accuracy_std))
                    })
                    .collect();
                write(dir.join(format!("bars-{}.svg", c.key())), &svg_bars(c.title(), &bars), &mut written)?;
            }
            let bars: Vec<(String, f64, f64)> = result
                .summaries
                .iter()
                .filter(|s| s.seeds_ok > 0)
                .map(|s| (s.condition.clone(), s.accuracy, s.accuracy_std))
                .collect();
            write(dir.join("bars-mean.svg"), &svg_bars("Mean", &bars), &mut written)?;
        }
    }
    Ok(written)
}

/// Report rows as JSON, the inverse of [`rows_from_json`].
pub fn rows_to_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize") + "\n"
}

pub fn rows_from_json(text: &str) -> Result<Vec<ReportRow>> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("bad report rows JSON: {e}")))
}
