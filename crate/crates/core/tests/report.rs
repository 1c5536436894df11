mod common;

use std::fs;
use std::path::PathBuf;

use common::{quick_model, scenes};
use segadapt::config::{AdaptConfig, SweepConfig};
use segadapt::data::Split;
use segadapt::engine::{adapt_stream, adaptation_sweep, SweepKind};
use segadapt::report::{self, read_trace_csv, transfer_svg, write_trace_csv};

fn svg_ok(text: &str) -> roxmltree::Document<'_> {
    let doc = roxmltree::Document::parse(text).expect("well-formed svg");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc
}

fn shades(text: &str) -> Vec<u8> {
    svg_ok(text)
        .descendants()
        .filter_map(|n| n.attribute("fill"))
        .filter_map(|f| f.strip_prefix("rgb("))
        .map(|f| f.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn trace_csv_roundtrips_with_one_row_per_sample() {
    let net = quick_model(true);
    let stream = scenes(Split::TargetStream, 7, 2);
    let r = adapt_stream(&net, &stream, &AdaptConfig::default(), 0, "rt").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_trace_csv(&path, &r.trace).unwrap();
    let back = read_trace_csv(&path).unwrap();
    assert_eq!(back.len(), 7);
    assert_eq!(back, r.trace);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.starts_with("run_id,position,sample,cumulative_miou,loss,method,seed,skipped"));
}

#[test]
fn identity_heatmap_is_dark_on_the_diagonal_only() {
    let l = 4;
    let eye: Vec<f64> = (0..l * l).map(|i| if i / l == i % l { 1.0 } else { 0.0 }).collect();
    let s = shades(&transfer_svg(&eye, l).unwrap());
    let cells: Vec<u8> = s.into_iter().rev().take(l * l).collect::<Vec<_>>().into_iter().rev().collect();
    for (i, &v) in cells.iter().enumerate() {
        assert_eq!(v, if i / l == i % l { 0 } else { 255 });
    }
}

#[test]
fn heatmap_shade_decreases_with_value() {
    let vals: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
    let s = shades(&transfer_svg(&vals, 3).unwrap());
    let cells = &s[s.len() - 9..];
    assert!(cells.windows(2).all(|w| w[1] < w[0]), "{cells:?}");
    assert!(transfer_svg(&vals, 4).is_err());
}

#[test]
fn regenerate_is_idempotent_and_overlays_runs() {
    let net = quick_model(true);
    let stream = scenes(Split::TargetStream, 4, 2);
    let root = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for seed in [0, 1] {
        let r = adapt_stream(&net, &stream, &AdaptConfig::default(), seed, &format!("run{seed}")).unwrap();
        let dir = root.path().join(format!("run{seed}"));
        let files = report::emit_adapt_report(&r, &dir).unwrap();
        assert!(files.iter().any(|f| f == report::TRANSFER_SVG));
        let snapshot = |files: &[String]| files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect::<Vec<_>>();
        let before = snapshot(&files);
        let again = report::regenerate(&dir).unwrap();
        assert_eq!(again, files);
        for (f, (a, b)) in again.iter().zip(snapshot(&again).iter().zip(&before)) {
            assert!(a == b, "{f} changed on regeneration");
        }
        svg_ok(&fs::read_to_string(dir.join(report::EVOLUTION_SVG)).unwrap());
        dirs.push(dir);
    }
    let overlay = root.path().join("overlay.svg");
    report::write_overlay(&dirs, &overlay).unwrap();
    let text = fs::read_to_string(&overlay).unwrap();
    svg_ok(&text);
    assert!(text.contains("run0") && text.contains("run1"));
}

#[test]
fn sweep_output_is_regenerated_identically() {
    let net = quick_model(true);
    let stream = scenes(Split::TargetStream, 3, 2);
    let sweep = SweepConfig {
        seeds: vec![0],
        ..SweepConfig::default()
    };
    let t = adaptation_sweep(SweepKind::Metric, &net, &stream, &AdaptConfig::default(), &sweep).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report::emit_sweep(&t, dir.path()).unwrap();
    let csv = fs::read(dir.path().join(report::SWEEP_CSV)).unwrap();
    report::regenerate(dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join(report::SWEEP_CSV)).unwrap(), csv);
    let mut rdr = csv::Reader::from_reader(csv.as_slice());
    assert_eq!(rdr.records().count(), sweep.metrics.len());
    svg_ok(&fs::read_to_string(dir.path().join(report::SWEEP_SVG)).unwrap());
}

#[test]
fn missing_run_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report::regenerate(&dir.path().join("absent")).is_err());
    assert!(report::write_overlay(&[PathBuf::from("/nonexistent/run")], &dir.path().join("o.svg")).is_err());
}
