//! CSV output and the plain-text summary of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::pipeline::{Layout, Result};

/// Fixed six-decimal rendering so reports are byte-stable.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn header_comment(cfg: &ExperimentConfig) -> String {
    format!("# config-hash={} seed={}", cfg.hash(), cfg.seed)
}

pub fn write_csv(
    path: &Path,
    cfg: &ExperimentConfig,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(header_comment(cfg).as_bytes());
    out.push(b'\n');
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Header comment, column names and rows of a report written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let comment = text.lines().next().unwrap_or_default().to_string();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((comment, header, rows))
}

fn table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r.get(c).map_or(0, String::len))
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{title}\n");
    let _ = writeln!(out, "    {}", line(header));
    for r in rows {
        let _ = writeln!(out, "    {}", line(r));
    }
    out.push('\n');
}

/// Collects whichever reports exist under the run directory into one text
/// summary, written to `report.txt` and returned.
pub fn summarize(layout: &Layout) -> Result<String> {
    let sections = [
        ("train-owners.csv", "Owner models"),
        ("attack-ensemble-summary.csv", "Ensemble gateway (per size)"),
        ("attack-ensemble.csv", "Ensemble gateway (per owner)"),
        ("attack-detector.csv", "Detector gateway"),
    ];
    let mut out = String::new();
    let mut stamp = None;
    for (file, title) in sections {
        let path = layout.file(file);
        if !path.is_file() {
            continue;
        }
        let (comment, header, rows) = read_csv(&path)?;
        stamp.get_or_insert(comment);
        table(&mut out, title, &header, &rows);
    }
    if let Some(stamp) = stamp {
        out.insert_str(0, &format!("{stamp}\n\n"));
    } else {
        out.push_str("no reports found\n");
    }
    fs::write(layout.file("report.txt"), &out)?;
    Ok(out)
}
