//! Turns summary tables into per-figure CSV data files. Plots are data
//! files on purpose: any external plotter can render them, and the columns
//! are testable.

use std::collections::BTreeMap;
use std::path::Path;

use entlab_core::adapt::{SummaryRow, SUMMARY_HEADER};

use crate::Failure;

/// Parses a summary TSV produced by the adapt command. Errors carry the
/// 1-based line number.
pub fn parse_summary_tsv(text: &str) -> Result<Vec<SummaryRow>, Failure> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Failure::Data("line 1: summary is empty".to_string()))?;
    if header != SUMMARY_HEADER {
        return Err(Failure::Data(format!(
            "line 1: header mismatch, expected '{SUMMARY_HEADER}'"
        )));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Failure::Data(format!(
                "line {lineno}: expected 7 tab-separated fields, found {}",
                f.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| {
                Failure::Data(format!("line {lineno}: {what} '{s}' is not an integer"))
            })
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| Failure::Data(format!("line {lineno}: {what} '{s}' is not a number")))
        };
        rows.push(SummaryRow {
            speaker_id: f[0].to_string(),
            parameter_set: f[1].to_string(),
            loss_kind: f[2].to_string(),
            amount_utts: parse_usize(f[3], "amount_utts")?,
            chosen_epoch: parse_usize(f[4], "chosen_epoch")?,
            wer_unadapted: parse_f64(f[5], "wer_unadapted")?,
            wer_adapted: parse_f64(f[6], "wer_adapted")?,
        });
    }
    Ok(rows)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("cannot read summary {}: {e}", path.display())))?;
    parse_summary_tsv(&text)
}

fn adapted_rows(rows: &[SummaryRow]) -> impl Iterator<Item = &SummaryRow> {
    rows.iter().filter(|r| r.parameter_set != "unadapted")
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

type CellKey = (String, String, usize);

fn by_cell(rows: &[SummaryRow]) -> BTreeMap<CellKey, Vec<&SummaryRow>> {
    let mut cells: BTreeMap<CellKey, Vec<&SummaryRow>> = BTreeMap::new();
    for r in adapted_rows(rows) {
        cells
            .entry((r.parameter_set.clone(), r.loss_kind.clone(), r.amount_utts))
            .or_default()
            .push(r);
    }
    cells
}

pub const THERMOMETER_HEADER: &str =
    "parameter_set,loss_kind,amount_utts,mean_wer_unadapted,mean_wer_adapted,n_speakers";

/// Method comparison at each data amount: per-speaker-mean WER before and
/// after adaptation, one row per grid cell.
pub fn thermometer_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(THERMOMETER_HEADER);
    out.push('\n');
    for ((pset, kind, amount), cell) in by_cell(rows) {
        let un = mean(cell.iter().map(|r| r.wer_unadapted)).expect("nonempty cell");
        let ad = mean(cell.iter().map(|r| r.wer_adapted)).expect("nonempty cell");
        out.push_str(&format!("{pset},{kind},{amount},{un:.6},{ad:.6},{}\n", cell.len()));
    }
    out
}

pub const DELTAS_HEADER: &str =
    "speaker_id,mean_wer_unadapted,mean_wer_adapted,mean_improvement,n_cells";

/// Per-speaker improvement averaged over every grid cell the speaker
/// completed, sorted by descending improvement (ties by speaker id).
pub fn per_speaker_deltas_csv(rows: &[SummaryRow]) -> String {
    let mut per: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for r in adapted_rows(rows) {
        per.entry(&r.speaker_id).or_default().push(r);
    }
    let mut entries: Vec<(String, f64, f64, f64, usize)> = per
        .into_iter()
        .map(|(sid, cell)| {
            let un = mean(cell.iter().map(|r| r.wer_unadapted)).expect("nonempty");
            let ad = mean(cell.iter().map(|r| r.wer_adapted)).expect("nonempty");
            (sid.to_string(), un, ad, un - ad, cell.len())
        })
        .collect();
    entries.sort_by(|a, b| b.3.total_cmp(&a.3).then_with(|| a.0.cmp(&b.0)));
    let mut out = String::from(DELTAS_HEADER);
    out.push('\n');
    for (sid, un, ad, imp, n) in entries {
        out.push_str(&format!("{sid},{un:.6},{ad:.6},{imp:.6},{n}\n"));
    }
    out
}

pub const SWEEP_HEADER: &str = "parameter_set,loss_kind,amount_utts,mean_wer";

/// WER as a function of adaptation data amount, one curve per (parameter
/// set, objective). The zero-amount point is the unadapted WER of the same
/// speakers.
pub fn amount_sweep_csv(rows: &[SummaryRow]) -> String {
    let cells = by_cell(rows);
    let mut curves: BTreeMap<(String, String), Vec<(usize, f64, f64)>> = BTreeMap::new();
    for ((pset, kind, amount), cell) in cells {
        let un = mean(cell.iter().map(|r| r.wer_unadapted)).expect("nonempty cell");
        let ad = mean(cell.iter().map(|r| r.wer_adapted)).expect("nonempty cell");
        curves.entry((pset, kind)).or_default().push((amount, un, ad));
    }
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for ((pset, kind), points) in curves {
        let zero = mean(points.iter().map(|&(_, un, _)| un)).expect("nonempty curve");
        out.push_str(&format!("{pset},{kind},0,{zero:.6}\n"));
        for (amount, _, ad) in points {
            out.push_str(&format!("{pset},{kind},{amount},{ad:.6}\n"));
        }
    }
    out
}

pub const ABLATION_HEADER: &str = "label,mean_wer_unadapted,mean_wer_adapted,n_rows";

/// Cross-run comparison table; each labeled summary normally comes from a
/// model trained with a different code-injection layer set.
pub fn ablation_csv(labeled: &[(String, Vec<SummaryRow>)]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for (label, rows) in labeled {
        let adapted: Vec<&SummaryRow> = adapted_rows(rows).collect();
        let un = mean(adapted.iter().map(|r| r.wer_unadapted)).unwrap_or(f64::NAN);
        let ad = mean(adapted.iter().map(|r| r.wer_adapted)).unwrap_or(f64::NAN);
        out.push_str(&format!("{label},{un:.6},{ad:.6},{}\n", adapted.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<SummaryRow> {
        let mk = |sid: &str, pset: &str, kind: &str, amount: usize, un: f64, ad: f64| SummaryRow {
            speaker_id: sid.to_string(),
            parameter_set: pset.to_string(),
            loss_kind: kind.to_string(),
            amount_utts: amount,
            chosen_epoch: 3,
            wer_unadapted: un,
            wer_adapted: ad,
        };
        vec![
            mk("all", "unadapted", "none", 0, 0.4, 0.4),
            mk("tst000", "speaker_code", "min_entropy", 5, 0.5, 0.3),
            mk("tst001", "speaker_code", "min_entropy", 5, 0.3, 0.3),
            mk("tst000", "speaker_code", "min_entropy", 40, 0.5, 0.2),
            mk("tst001", "speaker_code", "min_entropy", 40, 0.3, 0.2),
        ]
    }

    #[test]
    fn summary_round_trips_through_tsv() {
        let rows = sample_rows();
        let text = entlab_core::adapt::summary_tsv(&rows);
        let parsed = parse_summary_tsv(&text).expect("parse");
        assert_eq!(parsed.len(), rows.len());
        assert_eq!(parsed[1].speaker_id, "tst000");
        assert!((parsed[1].wer_adapted - 0.3).abs() < 1e-12);
    }

    #[test]
    fn malformed_summaries_name_the_line() {
        let err = parse_summary_tsv("bogus header\n").expect_err("header");
        assert!(err.render().contains("line 1"), "{}", err.render());
        let mut text = entlab_core::adapt::summary_tsv(&sample_rows());
        text.push_str("only\tthree\tfields\n");
        let err = parse_summary_tsv(&text).expect_err("short row");
        assert!(err.render().contains("line 7"), "{}", err.render());
    }

    #[test]
    fn deltas_are_sorted_by_descending_improvement() {
        let csv = per_speaker_deltas_csv(&sample_rows());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], DELTAS_HEADER);
        // tst000 improves by 0.25 on average, tst001 by 0.1.
        assert!(lines[1].starts_with("tst000,"));
        assert!(lines[2].starts_with("tst001,"));
        let imp: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
        assert!((imp - 0.25).abs() < 1e-9);
    }

    #[test]
    fn sweep_includes_the_zero_amount_point() {
        let csv = amount_sweep_csv(&sample_rows());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines[1], "speaker_code,min_entropy,0,0.400000");
        assert!(lines[2].starts_with("speaker_code,min_entropy,5,"));
        assert!(lines[3].starts_with("speaker_code,min_entropy,40,"));
    }

    #[test]
    fn csv_column_counts_match_their_headers() {
        let rows = sample_rows();
        for (csv, header) in [
            (thermometer_csv(&rows), THERMOMETER_HEADER),
            (per_speaker_deltas_csv(&rows), DELTAS_HEADER),
            (amount_sweep_csv(&rows), SWEEP_HEADER),
            (ablation_csv(&[("default".to_string(), rows.clone())]), ABLATION_HEADER),
        ] {
            let want = header.split(',').count();
            for line in csv.lines() {
                assert_eq!(line.split(',').count(), want, "line '{line}'");
            }
        }
    }
}
