//! CSV, SVG, PNG and JSON emission for runs and sweeps.
//!
//! A run directory holds the raw report (`report.json`) and every derived
//! artifact, so [`regenerate`] can rebuild CSV and SVG output from it.
//!
//! Trace CSV schema: `run_id, position, sample, cumulative_miou, loss,
//! method, seed, skipped`. `loss` is empty for methods without one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::CLASS_NAMES;
use crate::engine::{AdaptReport, LossRow, Preview, SweepTable, TraceRow};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;

pub const MANIFEST: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const CLASS_IOU_CSV: &str = "class_iou.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const EVOLUTION_SVG: &str = "evolution.svg";
pub const TRANSFER_SVG: &str = "transfer.svg";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";
pub const LOSS_CSV: &str = "train_loss.csv";

/// Color per class id in label previews.
pub const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 20],
    [230, 80, 60],
    [70, 160, 230],
    [240, 200, 50],
    [90, 200, 110],
    [180, 90, 200],
    [240, 140, 40],
    [200, 200, 200],
];

pub fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

/// What a command wrote and whether it finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub complete: bool,
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            complete: false,
            seed,
            checkpoint_hash: None,
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_rows(path, trace)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    read_rows(path)
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    read_rows(path)
}

#[derive(Serialize)]
struct ClassIouRow {
    class: usize,
    name: String,
    iou: Option<f64>,
}

pub fn write_class_iou_csv(path: &Path, iou: &[Option<f64>]) -> Result<()> {
    let rows: Vec<_> = iou
        .iter()
        .enumerate()
        .map(|(class, &iou)| ClassIouRow {
            class,
            name: class_name(class),
            iou,
        })
        .collect();
    write_rows(path, &rows)
}

/// Rows are ground truth, columns predictions.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let l = cm.classes();
    let mut out = String::from("truth");
    for p in 0..l {
        write!(out, ",{}", class_name(p)).expect("string write");
    }
    out.push('\n');
    for t in 0..l {
        out.push_str(&class_name(t));
        for p in 0..l {
            write!(out, ",{}", cm.get(t, p)).expect("string write");
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// `row, col, mean, seed=<s>...`, one line per cell.
pub fn write_sweep_csv(path: &Path, table: &SweepTable) -> Result<()> {
    let mut out = String::from("row,col,mean");
    for s in &table.seeds {
        write!(out, ",seed={s}").expect("string write");
    }
    out.push('\n');
    for r in &table.rows {
        write!(out, "{},{},{}", r.row, r.col, r.mean).expect("string write");
        for v in &r.per_seed {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    write_text(path, &out)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const LINE_COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of cumulative mIoU against stream position, one line per run.
pub fn evolution_svg(runs: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 180.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = runs.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">mIoU evolution over the stream</text>"#, left + pw / 2.0).expect("string write");
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#ddd"/><text x="{2}" y="{3:.2}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            left + pw,
            left - 6.0,
            y(v) + 4.0
        )
        .expect("string write");
    }
    writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
        top + ph,
        left + pw
    )
    .expect("string write");
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">sample position</text>"#, left + pw / 2.0, h - 12.0).expect("string write");
    writeln!(s, r#"<text x="{left}" y="{}" text-anchor="start">0</text><text x="{}" y="{}" text-anchor="end">{}</text>"#, top + ph + 16.0, left + pw, top + ph + 16.0, n - 1).expect("string write");
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">cumulative mIoU</text>"#, top + ph / 2.0, top + ph / 2.0).expect("string write");
    for (i, (label, values)) in runs.iter().enumerate() {
        let color = LINE_COLORS[i % LINE_COLORS.len()];
        let pts: Vec<String> = values.iter().enumerate().map(|(j, &v)| format!("{:.2},{:.2}", x(j), y(v))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).expect("string write");
        let ly = top + 14.0 * i as f64 + 10.0;
        writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            left + pw + 10.0,
            left + pw + 28.0,
            left + pw + 32.0,
            ly + 4.0,
            esc(label)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of a row-major `L×L` transfer matrix. Rows are supervised
/// classes, columns unsupervised classes; darker means larger.
pub fn transfer_svg(matrix: &[f64], classes: usize) -> Result<String> {
    if matrix.len() != classes * classes {
        return Err(Error::dim("transfer_svg", format!("{} entries for {classes} classes", matrix.len())));
    }
    let cell = 48.0;
    let (left, top) = (90.0, 80.0);
    let size = cell * classes as f64;
    let (w, h) = (left + size + 20.0, top + size + 20.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">transfer matrix (rows: supervised, columns: unsupervised)</text>"#, w / 2.0).expect("string write");
    for c in 0..classes {
        let name = esc(&class_name(c));
        let cx = left + cell * (c as f64 + 0.5);
        writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="start" transform="rotate(-45 {cx} {})">{name}</text>"#, top - 6.0, top - 6.0).expect("string write");
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{name}</text>"#, left - 6.0, top + cell * (c as f64 + 0.5) + 4.0).expect("string write");
    }
    for r in 0..classes {
        for c in 0..classes {
            let v = matrix[r * classes + c].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let text = if v > 0.5 { "white" } else { "black" };
            let (x, y) = (left + cell * c as f64, top + cell * r as f64);
            writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#888"/><text x="{}" y="{}" text-anchor="middle" fill="{text}">{:.2}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                matrix[r * classes + c]
            )
            .expect("string write");
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar chart of sweep cell means.
pub fn sweep_svg(table: &SweepTable) -> String {
    let bar = 36.0;
    let (left, top, bottom) = (60.0, 40.0, 110.0);
    let ph = 260.0;
    let n = table.rows.len().max(1);
    let w = left + bar * 1.5 * n as f64 + 30.0;
    let h = top + ph + bottom;
    let max = table.rows.iter().map(|r| r.mean).fold(0.0f64, f64::max).max(1e-9);
    let top_v = (max * 10.0).ceil() / 10.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{} sweep: mean final mIoU over {} seed(s)</text>"#, w / 2.0, table.kind, table.seeds.len()).expect("string write");
    writeln!(s, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, top + ph, w - 20.0).expect("string write");
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{top_v:.1}</text><text x="{}" y="{}" text-anchor="end">0</text>"#, left - 6.0, top + 4.0, left - 6.0, top + ph + 4.0).expect("string write");
    for (i, r) in table.rows.iter().enumerate() {
        let bh = ph * r.mean / top_v;
        let x = left + bar * (0.25 + 1.5 * i as f64);
        let label = if r.col.is_empty() { r.row.clone() } else { format!("{} {}", r.row, r.col) };
        let color = LINE_COLORS[i % LINE_COLORS.len()];
        writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{bar}" height="{bh:.2}" fill="{color}"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{:.3}</text>"#,
            top + ph - bh,
            x + bar / 2.0,
            top + ph - bh - 4.0,
            r.mean
        )
        .expect("string write");
        let lx = x + bar / 2.0;
        let ly = top + ph + 12.0;
        writeln!(s, r#"<text x="{lx:.2}" y="{ly}" text-anchor="end" transform="rotate(-45 {lx:.2} {ly})">{}</text>"#, esc(&label)).expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

/// Color-indexed PNG of a label map.
pub fn write_label_png(path: &Path, labels: &[u8], size: (usize, usize)) -> Result<()> {
    let (h, w) = size;
    if labels.len() != h * w {
        return Err(Error::dim("label png", format!("{} labels for {h}x{w}", labels.len())));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, &l) in labels.iter().enumerate() {
        let c = PALETTE[l as usize % PALETTE.len()];
        img.put_pixel((i % w) as u32, (i / w) as u32, image::Rgb(c));
    }
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn preview_files(p: &Preview) -> [String; 2] {
    [format!("preview_{:04}_truth.png", p.sample), format!("preview_{:04}_pred.png", p.sample)]
}

/// Writes every artifact derived from an adaptation report. Returns the file
/// names, relative to `dir`.
pub fn emit_adapt_report(report: &AdaptReport, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(REPORT_JSON), report)?;
    write_trace_csv(&dir.join(TRACE_CSV), &report.trace)?;
    write_class_iou_csv(&dir.join(CLASS_IOU_CSV), &report.class_iou)?;
    write_confusion_csv(&dir.join(CONFUSION_CSV), &report.confusion)?;
    let trace: Vec<f64> = report.trace.iter().map(|r| r.cumulative_miou).collect();
    write_text(&dir.join(EVOLUTION_SVG), &evolution_svg(&[(report.run_id.clone(), trace)]))?;
    let mut files: Vec<String> = [REPORT_JSON, TRACE_CSV, CLASS_IOU_CSV, CONFUSION_CSV, EVOLUTION_SVG]
        .map(String::from)
        .to_vec();
    if let Some(m) = &report.transfer_example {
        write_text(&dir.join(TRANSFER_SVG), &transfer_svg(m, report.confusion.classes())?)?;
        files.push(TRANSFER_SVG.into());
    }
    for p in &report.previews {
        let [t, q] = preview_files(p);
        write_label_png(&dir.join(&t), &p.truth, p.size)?;
        write_label_png(&dir.join(&q), &p.pred, p.size)?;
        files.extend([t, q]);
    }
    Ok(files)
}

/// Writes a sweep table, its chart and an overlay of every run's trace.
pub fn emit_sweep(table: &SweepTable, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(SWEEP_JSON), table)?;
    write_sweep_csv(&dir.join(SWEEP_CSV), table)?;
    write_text(&dir.join(SWEEP_SVG), &sweep_svg(table))?;
    let runs: Vec<(String, Vec<f64>)> = table
        .reports
        .iter()
        .map(|r| (r.run_id.clone(), r.trace.iter().map(|t| t.cumulative_miou).collect()))
        .collect();
    write_text(&dir.join(EVOLUTION_SVG), &evolution_svg(&runs))?;
    Ok([SWEEP_JSON, SWEEP_CSV, SWEEP_SVG, EVOLUTION_SVG].map(String::from).to_vec())
}

/// Rebuilds derived CSV and SVG files of a run or sweep directory from its
/// stored raw data. Running it twice leaves the directory unchanged.
pub fn regenerate(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        ));
    }
    if dir.join(SWEEP_JSON).is_file() {
        let table: SweepTable = read_json(&dir.join(SWEEP_JSON))?;
        return emit_sweep(&table, dir);
    }
    if dir.join(REPORT_JSON).is_file() {
        let report: AdaptReport = read_json(&dir.join(REPORT_JSON))?;
        return emit_adapt_report(&report, dir);
    }
    Err(Error::State(format!("{} holds neither {REPORT_JSON} nor {SWEEP_JSON}", dir.display())))
}

/// Per-run traces found in run or sweep directories, for overlay charts.
pub fn collect_traces(dirs: &[PathBuf]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut runs = Vec::new();
    for dir in dirs {
        if dir.join(SWEEP_JSON).is_file() {
            let table: SweepTable = read_json(&dir.join(SWEEP_JSON))?;
            runs.extend(
                table
                    .reports
                    .iter()
                    .map(|r| (r.run_id.clone(), r.trace.iter().map(|t| t.cumulative_miou).collect())),
            );
        } else {
            let trace = read_trace_csv(&dir.join(TRACE_CSV))?;
            let id = trace.first().map_or_else(|| dir.display().to_string(), |r| r.run_id.clone());
            runs.push((id, trace.iter().map(|r| r.cumulative_miou).collect()));
        }
    }
    Ok(runs)
}

/// Writes an overlay evolution chart of several runs to `path`.
pub fn write_overlay(dirs: &[PathBuf], path: &Path) -> Result<()> {
    write_text(path, &evolution_svg(&collect_traces(dirs)?))
}
