//! Report bundle: metric table (CSV), metadata (JSON) and a bar chart (SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{EvalReport, Metric, MetricKind};
use crate::error::Result;

pub const CSV_COLUMNS: [&str; 7] = ["CLIP-I-f", "CLIP-I-b", "DINO-f", "DINO-b", "CLIP-T", "DIV", "ESR"];

const BAR_COLOURS: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

fn cell(m: &Metric) -> String {
    match m {
        Metric::Value { value, .. } => format!("{value:.6}"),
        Metric::Skipped { .. } => "skipped".into(),
    }
}

/// Quotes a CSV field when it holds a comma, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per labelled report, columns in [`CSV_COLUMNS`] order.
pub fn csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = format!("config,{},samples\n", CSV_COLUMNS.join(","));
    for (label, r) in rows {
        let cells: Vec<String> = MetricKind::ALL.iter().map(|&k| cell(r.metric(k))).collect();
        let _ = writeln!(out, "{},{},{}", csv_field(label), cells.join(","), r.sample_count);
    }
    out
}

#[derive(Serialize)]
struct Row<'a> {
    config: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Full reports including raw values, skip reasons and protocol notes.
pub fn metadata_json(rows: &[(String, EvalReport)]) -> Result<String> {
    let rows: Vec<Row<'_>> = rows
        .iter()
        .map(|(config, report)| Row { config, report })
        .collect();
    Ok(serde_json::to_string_pretty(&rows)? + "\n")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars, one group per metric, one bar per row. Skipped metrics
/// leave a gap.
pub fn svg_bar_chart(rows: &[(String, EvalReport)]) -> String {
    let (left, top, plot_h, group_w) = (50.0, 20.0, 200.0, 24.0 + 14.0 * rows.len() as f64);
    let width = left + group_w * CSV_COLUMNS.len() as f64 + 20.0;
    let legend_h = 16.0 * rows.len() as f64;
    let height = top + plot_h + 30.0 + legend_h + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (g, (kind, name)) in MetricKind::ALL.iter().zip(CSV_COLUMNS).enumerate() {
        let x0 = left + g as f64 * group_w + 12.0;
        for (i, (_, r)) in rows.iter().enumerate() {
            if let Some(v) = r.metric(*kind).value() {
                let h = plot_h * v;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="12" height="{h}" fill="{}"/>"#,
                    x0 + 14.0 * i as f64,
                    top + plot_h - h,
                    BAR_COLOURS[i % BAR_COLOURS.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{name}</text>"#,
            x0 + 7.0 * rows.len() as f64,
            top + plot_h + 16.0
        );
    }
    for (i, (label, _)) in rows.iter().enumerate() {
        let y = top + plot_h + 30.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            BAR_COLOURS[i % BAR_COLOURS.len()],
            left + 14.0,
            y + 9.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv`, `report.json` and `report.svg` into `dir`.
pub fn write_bundle(dir: &Path, rows: &[(String, EvalReport)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        ("report.csv", csv(rows)),
        ("report.json", metadata_json(rows)?),
        ("report.svg", svg_bar_chart(rows)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::super::ReportNotes;
    use super::*;

    fn report(esr: Metric) -> EvalReport {
        EvalReport {
            clip_i_f: Metric::from_raw(0.9),
            clip_i_b: Metric::from_raw(1.2),
            dino_f: Metric::from_raw(-0.1),
            dino_b: Metric::skipped("no dino client"),
            clip_t: Metric::from_raw(0.3),
            div: Metric::from_raw(0.05),
            esr,
            sample_count: 4,
            prompt_list_id: "default-v1".into(),
            notes: ReportNotes {
                region_masking: super::super::REGION_MASKING.into(),
                image_masking: super::super::IMAGE_MASKING.into(),
                esr_judge: "fixed".into(),
                esr: None,
                degenerate_regions: 0,
                default_protocol: true,
            },
        }
    }

    #[test]
    fn csv_layout() {
        let rows = vec![("a".to_string(), report(Metric::from_raw(0.5)))];
        let text = csv(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "config,CLIP-I-f,CLIP-I-b,DINO-f,DINO-b,CLIP-T,DIV,ESR,samples");
        assert_eq!(
            lines[1],
            "a,0.900000,1.000000,0.000000,skipped,0.300000,0.050000,0.500000,4"
        );
    }

    #[test]
    fn json_keeps_raw_values() {
        let rows = vec![("a".to_string(), report(Metric::skipped("no judge")))];
        let v: serde_json::Value = serde_json::from_str(&metadata_json(&rows).unwrap()).unwrap();
        assert_eq!(v[0]["config"], "a");
        assert_eq!(v[0]["clip_i_b"]["raw"], 1.2);
        assert_eq!(v[0]["esr"]["reason"], "no judge");
    }

    #[test]
    fn bundle_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ("x<1>".to_string(), report(Metric::from_raw(0.5))),
            ("y".to_string(), report(Metric::from_raw(1.0))),
        ];
        let paths = write_bundle(dir.path(), &rows).unwrap();
        assert_eq!(paths.len(), 3);
        let svg = fs::read_to_string(&paths[2]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("x&lt;1&gt;"));
        assert_eq!(csv_field("+L_fg,L_bg"), "\"+L_fg,L_bg\"");
    }
}
