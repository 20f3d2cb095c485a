use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{scheme_rank, EvalReport, GridCell};
use crate::corpus::FT_BUDGETS_SEC;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
    Plot,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Text, ReportFormat::Plot];
}

/// `"9.20 (0.721)"`: mean with two decimals, std with three.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.3})")
}

fn scheme_name(scheme: &str) -> &str {
    match scheme {
        "multispeaker" => "Multi-Speaker",
        "pseudose" => "PseudoSE",
        "cm" => "CM",
        "random-init" => "Random init",
        other => other,
    }
}

/// Row label of a scheme and premix SNR, e.g. `CM (10 dB)`.
pub fn row_label(scheme: &str, premix_snr_db: Option<f64>) -> String {
    match premix_snr_db {
        Some(s) => format!("{} ({s} dB)", scheme_name(scheme)),
        None => scheme_name(scheme).to_string(),
    }
}

type RowKey = (u8, String, i64);

struct Block<'a> {
    architecture: String,
    /// Row key -> (label, budget index -> cell).
    rows: BTreeMap<RowKey, (String, BTreeMap<usize, &'a GridCell>)>,
}

fn budget_column(budget: f64) -> Option<usize> {
    FT_BUDGETS_SEC.iter().position(|&b| b == budget)
}

fn blocks(report: &EvalReport) -> Vec<Block<'_>> {
    let mut out: Vec<Block<'_>> = Vec::new();
    for arch in report.architectures() {
        let mut rows: BTreeMap<RowKey, (String, BTreeMap<usize, &GridCell>)> = BTreeMap::new();
        for c in report.cells.iter().filter(|c| c.key.architecture == arch) {
            let Some(col) = budget_column(c.key.ft_budget_sec) else {
                continue;
            };
            let key = (
                scheme_rank(&c.key.scheme),
                c.key.scheme.clone(),
                c.key.premix_snr_db.map_or(i64::MIN, |s| (s * 1000.0).round() as i64),
            );
            rows.entry(key)
                .or_insert_with(|| (row_label(&c.key.scheme, c.key.premix_snr_db), BTreeMap::new()))
                .1
                .insert(col, c);
        }
        out.push(Block { architecture: arch, rows });
    }
    out
}

fn header() -> Vec<String> {
    let mut h = vec!["Architecture".to_string(), "Initialization".to_string()];
    h.extend(FT_BUDGETS_SEC.iter().map(|b| format!("{b} s")));
    h
}

fn table_rows(report: &EvalReport) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for block in blocks(report) {
        for (label, cells) in block.rows.values() {
            let mut row = vec![block.architecture.clone(), label.clone()];
            for col in 0..FT_BUDGETS_SEC.len() {
                row.push(
                    cells
                        .get(&col)
                        .map_or_else(|| "-".to_string(), |c| format_cell(c.mean_sisdri_db, c.std_sisdri_db)),
                );
            }
            out.push(row);
        }
    }
    out
}

/// Aligned plain-text table, one block per architecture.
pub fn render_text(report: &EvalReport) -> String {
    let header = header();
    let rows = table_rows(report);
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Mean SI-SDR improvement in dB over speakers, standard deviation in parentheses ({} mixtures per speaker)",
        report.protocol.n_mixtures
    );
    out.push_str(&line(&header));
    out.push('\n');
    let mut last_arch: Option<&str> = None;
    for r in &rows {
        if last_arch.is_some_and(|a| a != r[0]) {
            out.push('\n');
        }
        last_arch = Some(&r[0]);
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Plot(format!("{}: {e}", path.display()));
    w.write_record(header()).map_err(io)?;
    for r in table_rows(report) {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_block(block: &Block<'_>, path: &Path) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, cells) in block.rows.values() {
        for c in cells.values() {
            for v in c.speakers.values().map(|s| s.mean_sisdri_db).chain([c.mean_sisdri_db]) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = ((hi - lo) * 0.1).max(0.5);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let last = (FT_BUDGETS_SEC.len() - 1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{}: SI-SDRi vs finetuning budget", block.architecture), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.2..last + 0.2, (lo - pad)..(hi + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_labels(FT_BUDGETS_SEC.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < FT_BUDGETS_SEC.len() {
                format!("{}", FT_BUDGETS_SEC[i as usize])
            } else {
                String::new()
            }
        })
        .x_desc("Clean finetuning speech (s)")
        .y_desc("SI-SDRi (dB)")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (label, cells)) in block.rows.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut speakers: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for (&col, c) in cells {
            for (spk, s) in &c.speakers {
                speakers.entry(spk.as_str()).or_default().push((col as f64, s.mean_sisdri_db));
            }
        }
        for pts in speakers.values() {
            chart
                .draw_series(LineSeries::new(pts.clone(), color.mix(0.3).stroke_width(1)))
                .map_err(|e| err(&e))?;
        }
        let mean: Vec<(f64, f64)> = cells.iter().map(|(&col, c)| (col as f64, c.mean_sisdri_db)).collect();
        chart
            .draw_series(LineSeries::new(mean.clone(), color.stroke_width(3)))
            .map_err(|e| err(&e))?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(3)));
        chart
            .draw_series(mean.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes the requested formats into `dir`; returns the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if report.cells.is_empty() {
        return Err(Error::EmptySet("report grid".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => {
                let path = dir.join("report.json");
                let text = serde_json::to_string_pretty(report)?;
                fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
            ReportFormat::Csv => {
                let path = dir.join("report.csv");
                write_csv(report, &path)?;
                written.push(path);
            }
            ReportFormat::Text => {
                let path = dir.join("report.txt");
                fs::write(&path, render_text(report)).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
            ReportFormat::Plot => {
                for block in blocks(report) {
                    let path = dir.join(format!("curves_{}.svg", file_safe(&block.architecture)));
                    plot_block(&block, &path)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
