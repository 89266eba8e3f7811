use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the CSV export.
pub const COLUMNS: [&str; 11] = [
    "step",
    "train_success_rate",
    "eval_success_rate",
    "entropy",
    "mean_length",
    "unrecoverable_pivots",
    "tokens_main",
    "tokens_aux",
    "estimator_w",
    "estimator_b",
    "wall_ms",
];

/// One row per evaluation point.
///
/// Rates and the unrecoverable count cover the steps since the previous
/// row; token counters are cumulative. `entropy` and `mean_length` are exact
/// expectations per rollout under the current policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_success_rate: f64,
    pub eval_success_rate: f64,
    pub entropy: f64,
    pub mean_length: f64,
    pub unrecoverable_pivots: u64,
    pub tokens_main: u64,
    pub tokens_aux: u64,
    pub estimator_w: f64,
    pub estimator_b: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsFormat {
    #[default]
    Csv,
    JsonLines,
}

impl FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" | "json-lines" | "ndjson" => Ok(MetricsFormat::JsonLines),
            _ => Err(Error::Config(format!("unknown metrics format '{s}'"))),
        }
    }
}

impl MetricsFormat {
    /// JSON lines for `.jsonl`/`.ndjson` paths, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson") => MetricsFormat::JsonLines,
            _ => MetricsFormat::Csv,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::JsonLines => "jsonl",
        }
    }
}

pub fn write_metrics(log: &[MetricsRecord], out: impl Write, format: MetricsFormat) -> Result<()> {
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(COLUMNS)?;
            for r in log {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        MetricsFormat::JsonLines => {
            let mut out = out;
            for r in log {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

pub fn read_metrics(input: impl Read, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    match format {
        MetricsFormat::Csv => {
            let mut r = csv::Reader::from_reader(input);
            let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
            if header != COLUMNS {
                return Err(Error::Format(format!("unexpected metrics header {header:?}")));
            }
            r.deserialize().map(|row| row.map_err(Error::from)).collect()
        }
        MetricsFormat::JsonLines => BufReader::new(input)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect(),
    }
}

pub fn export_metrics(log: &[MetricsRecord], path: impl AsRef<Path>, format: MetricsFormat) -> Result<()> {
    let f = File::create(path.as_ref())?;
    write_metrics(log, BufWriter::new(f), format)
}

pub fn import_metrics(path: impl AsRef<Path>, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    read_metrics(File::open(path.as_ref())?, format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            train_success_rate: 0.125,
            eval_success_rate: 1.0 / 3.0,
            entropy: std::f64::consts::LN_2 * 12.0,
            mean_length: 12.0,
            unrecoverable_pivots: 7,
            tokens_main: 96 * step,
            tokens_aux: 40 * step,
            estimator_w: -0.1234567890123,
            estimator_b: 1e-300,
            wall_ms: 0,
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        let mut buf = Vec::new();
        write_metrics(&[], &mut buf, MetricsFormat::Csv).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), COLUMNS.join(",") + "\n");
        let mut buf = Vec::new();
        write_metrics(&[], &mut buf, MetricsFormat::JsonLines).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn both_formats_hold_the_same_rows() {
        let log: Vec<_> = (0..5).map(sample).collect();
        let mut csv = Vec::new();
        write_metrics(&log, &mut csv, MetricsFormat::Csv).unwrap();
        let mut jl = Vec::new();
        write_metrics(&log, &mut jl, MetricsFormat::JsonLines).unwrap();
        let csv_rows = String::from_utf8(csv.clone()).unwrap().lines().count() - 1;
        let jl_rows = String::from_utf8(jl.clone()).unwrap().lines().count();
        assert_eq!(csv_rows, jl_rows);
        assert_eq!(read_metrics(&csv[..], MetricsFormat::Csv).unwrap(), log);
        assert_eq!(read_metrics(&jl[..], MetricsFormat::JsonLines).unwrap(), log);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "step,eval\n1,0.5\n";
        assert!(matches!(read_metrics(text.as_bytes(), MetricsFormat::Csv), Err(Error::Format(_))));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |x| x.is_finite()), 0.0..1.0]
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            rows in proptest::collection::vec(
                (any::<u64>(), finite(), finite(), finite(), finite(), any::<u64>(),
                 any::<u64>(), any::<u64>(), finite(), finite(), any::<u64>()),
                0..8,
            )
        ) {
            let log: Vec<MetricsRecord> = rows
                .into_iter()
                .map(|(step, a, b, c, d, u, tm, ta, w, bb, ms)| MetricsRecord {
                    step,
                    train_success_rate: a,
                    eval_success_rate: b,
                    entropy: c,
                    mean_length: d,
                    unrecoverable_pivots: u,
                    tokens_main: tm,
                    tokens_aux: ta,
                    estimator_w: w,
                    estimator_b: bb,
                    wall_ms: ms,
                })
                .collect();
            for format in [MetricsFormat::Csv, MetricsFormat::JsonLines] {
                let mut buf = Vec::new();
                write_metrics(&log, &mut buf, format).unwrap();
                let back = read_metrics(&buf[..], format).unwrap();
                prop_assert_eq!(back.len(), log.len());
                for (x, y) in back.iter().zip(&log) {
                    prop_assert_eq!(x.estimator_w.to_bits(), y.estimator_w.to_bits());
                    prop_assert_eq!(x, y);
                }
            }
        }
    }
}
