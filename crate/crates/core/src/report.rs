//! Ablation CSV parsing and Markdown rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::Toggles;
use crate::train::{AblationResult, ABLATION_CSV_HEADER};

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "ablation csv".into(),
        offset,
        msg: msg.into(),
    }
}

fn parse_flag(field: &str, offset: usize) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format_err(offset, format!("expected 0 or 1, got {field:?}"))),
    }
}

fn parse_f64(field: &str, offset: usize) -> Result<f64> {
    field
        .parse()
        .map_err(|_| format_err(offset, format!("expected a number, got {field:?}")))
}

/// Parses the table written by `AblationTable::to_csv`. Errors carry the byte
/// offset of the offending field.
pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationResult>> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("").trim_end_matches(['\r', '\n']);
    if header != ABLATION_CSV_HEADER {
        return Err(format_err(0, format!("expected header {ABLATION_CSV_HEADER:?}")));
    }
    let mut offset = text.find('\n').map_or(text.len(), |i| i + 1);
    let mut rows = Vec::new();
    for line in lines {
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\r', '\n']);
        if body.is_empty() {
            continue;
        }
        let mut fields = Vec::with_capacity(9);
        let mut pos = start;
        for f in body.split(',') {
            fields.push((f, pos));
            pos += f.len() + 1;
        }
        if fields.len() != 9 {
            return Err(format_err(start, format!("expected 9 fields, found {}", fields.len())));
        }
        let (row, at) = fields[0];
        let row: usize = row.parse().map_err(|_| format_err(at, "row number"))?;
        if row != rows.len() + 1 {
            return Err(format_err(at, format!("expected row {}, found {row}", rows.len() + 1)));
        }
        let toggles = Toggles {
            mea: parse_flag(fields[2].0, fields[2].1)?,
            sr_f: parse_flag(fields[3].0, fields[3].1)?,
            sr_l: parse_flag(fields[4].0, fields[4].1)?,
        };
        let (n, at) = fields[5];
        let n: usize = n.parse().map_err(|_| format_err(at, "seed count"))?;
        let mean = parse_f64(fields[6].0, fields[6].1)?;
        let std = parse_f64(fields[7].0, fields[7].1)?;
        let (per_seed, mut at) = fields[8];
        let mut miou = Vec::with_capacity(n);
        for v in per_seed.split(' ') {
            miou.push(parse_f64(v, at)?);
            at += v.len() + 1;
        }
        if miou.len() != n {
            return Err(format_err(
                fields[8].1,
                format!("{} per-seed values for n_seeds {n}", miou.len()),
            ));
        }
        rows.push(AblationResult {
            label: fields[1].0.to_string(),
            toggles,
            seeds: Vec::new(),
            miou,
            mean,
            std,
        });
    }
    if rows.is_empty() {
        return Err(format_err(offset, "no rows"));
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

/// Markdown table with a delta column against row 1.
pub fn render_markdown(rows: &[AblationResult], timestamp: Option<&str>) -> String {
    let mut out = String::from("# Ablation\n\n");
    if let Some(ts) = timestamp {
        let _ = writeln!(out, "Generated {ts}.\n");
    }
    out.push_str("| # | MEA | SR-F | SR-L | mIoU (%) | Δ vs #1 | seeds |\n");
    out.push_str("|---|:---:|:---:|:---:|---:|---:|---:|\n");
    let base = rows.first().map_or(0.0, |r| r.mean);
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.2} ± {:.2} | {:+.2} | {} |",
            i + 1,
            mark(r.toggles.mea),
            mark(r.toggles.sr_f),
            mark(r.toggles.sr_l),
            r.mean,
            r.std,
            r.mean - base,
            r.miou.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::AblationTable;

    fn table() -> AblationTable {
        let row = |t: Toggles, miou: Vec<f64>| {
            let (mean, std) = crate::train::mean_std(&miou);
            AblationResult {
                label: t.label(),
                toggles: t,
                seeds: vec![0, 1],
                miou,
                mean,
                std,
            }
        };
        AblationTable {
            rows: vec![
                row(Toggles::BASELINE, vec![50.0, 52.5]),
                row(Toggles::FULL, vec![53.25, 51.0]),
            ],
            wall_clock_secs: 1.0,
            workers: 1,
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = table();
        let parsed = parse_ablation_csv(&t.to_csv()).unwrap();
        assert_eq!(parsed.len(), 2);
        for (p, r) in parsed.iter().zip(&t.rows) {
            assert_eq!(p.label, r.label);
            assert_eq!(p.toggles, r.toggles);
            assert_eq!(p.miou, r.miou);
            assert_eq!(p.mean, r.mean);
            assert_eq!(p.std, r.std);
        }
    }

    #[test]
    fn delta_column_is_difference_to_first_row() {
        let md = render_markdown(&table().rows, None);
        assert!(md.contains("| 1 |  |  |  | 51.25 ± 1.77 | +0.00 | 2 |"), "{md}");
        assert!(md.contains("| +0.88 |"), "{md}");
        assert!(!md.contains("Generated"));
        assert!(render_markdown(&table().rows, Some("now")).contains("Generated now."));
    }

    #[test]
    fn bad_field_reports_offset() {
        let csv = table().to_csv();
        let broken = csv.replacen(",1,1,1,", ",1,x,1,", 1);
        let at = broken.find(",x,").unwrap() + 1;
        match parse_ablation_csv(&broken) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, at),
            other => panic!("{other:?}"),
        }
        assert!(parse_ablation_csv("nope\n").is_err());
    }
}
