//! Result records and their CSV/JSON encodings.
//!
//! Records hold only deterministic fields so reruns are byte-identical;
//! wall-clock timings go to a separate sidecar file.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::Format;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub config_hash: String,
    pub mode: String,
    pub payoff: String,
    pub dim: usize,
    pub steps: usize,
    pub points: usize,
    /// Empty when every branch is enumerated.
    pub branches: Option<usize>,
    pub seed: u64,
    pub value: f64,
    /// Semicolon-separated maximizing volatilities at `t = 0`.
    pub argmax_sigma: String,
    pub argmax_rho: String,
    pub benchmark: Option<f64>,
    pub benchmark_method: Option<String>,
    pub abs_gap: Option<f64>,
    pub rel_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub config_hash: String,
    pub steps: usize,
    pub points: usize,
    /// Time index, or `None` for the whole run.
    pub n: Option<usize>,
    pub seconds: f64,
}

pub fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_records<W: Write, T: Serialize>(
    out: W,
    rows: &[T],
    format: Format,
) -> Result<(), Box<dyn std::error::Error>> {
    match format {
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Human-readable table with bracketed seconds per cell, e.g. `13.7884 [0.7]`.
pub fn summary_table(rows: &[Record], seconds: &[f64]) -> String {
    let mut s = String::new();
    for (r, t) in rows.iter().zip(seconds) {
        s.push_str(&format!("N={:<5} P={:<6} {:.4} [{:.1}]", r.steps, r.points, r.value, t));
        if let (Some(b), Some(g)) = (r.benchmark, r.abs_gap) {
            s.push_str(&format!("  benchmark {b:.4} ({})  gap {g:+.4}", r.benchmark_method.as_deref().unwrap_or("")));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// CSV column order for [`Record`].
    const RECORD_COLUMNS: &[&str] = &[
        "config_hash",
        "mode",
        "payoff",
        "dim",
        "steps",
        "points",
        "branches",
        "seed",
        "value",
        "argmax_sigma",
        "argmax_rho",
        "benchmark",
        "benchmark_method",
        "abs_gap",
        "rel_gap",
    ];

    fn read_records(text: &str, format: Format) -> Result<Vec<Record>, Box<dyn std::error::Error>> {
        Ok(match format {
            Format::Json => serde_json::from_str(text)?,
            Format::Csv => csv::Reader::from_reader(text.as_bytes())
                .deserialize()
                .collect::<Result<_, _>>()?,
        })
    }

    fn sample() -> Vec<Record> {
        vec![
            Record {
                config_hash: "ab".repeat(32),
                mode: "sweep".into(),
                payoff: "outperformer".into(),
                dim: 2,
                steps: 16,
                points: 125,
                branches: None,
                seed: 7,
                value: 13.788_412_345_678_9,
                argmax_sigma: join(&[0.2, 0.2]),
                argmax_rho: join(&[-0.5]),
                benchmark: Some(13.75),
                benchmark_method: Some("numeraire_lattice_2000".into()),
                abs_gap: Some(0.038_412_345_678_9),
                rel_gap: Some(0.0028),
            },
            Record {
                config_hash: "cd".repeat(32),
                mode: "price".into(),
                payoff: "call".into(),
                dim: 1,
                steps: 64,
                points: 125,
                branches: Some(2),
                seed: 0,
                value: 1.0 / 3.0,
                argmax_sigma: join(&[0.2]),
                argmax_rho: String::new(),
                benchmark: None,
                benchmark_method: None,
                abs_gap: None,
                rel_gap: None,
            },
        ]
    }

    #[test]
    fn records_round_trip() {
        for format in [Format::Csv, Format::Json] {
            let mut buf = Vec::new();
            write_records(&mut buf, &sample(), format).unwrap();
            let back = read_records(std::str::from_utf8(&buf).unwrap(), format).unwrap();
            assert_eq!(back, sample(), "{format:?}");
        }
    }

    #[test]
    fn csv_header_is_stable() {
        let mut buf = Vec::new();
        write_records(&mut buf, &sample(), Format::Csv).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), RECORD_COLUMNS.join(","));
    }
}
