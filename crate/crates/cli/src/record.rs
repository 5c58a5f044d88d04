//! Experiment records and their aggregation into report tables.

use std::collections::BTreeMap;
use std::path::Path;

use ntt_core::training::fmt_f64;
use ntt_core::{Error, Result};

/// One supervised run's outcome. Wall time is reported only in the sidecar
/// log so the CSV stays byte-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub method: String,
    pub density: f64,
    pub seed: u64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub kept_per_layer: Vec<u64>,
    pub multiply_adds: u64,
    pub dense_multiply_adds: u64,
    pub speedup: f64,
    pub wall_time_secs: f64,
}

pub const RECORD_HEADER: &str = "method,density,seed,final_train_acc,final_test_acc,kept_per_layer,multiply_adds,dense_multiply_adds,speedup";

fn join_kept(kept: &[u64]) -> String {
    kept.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
}

impl ExperimentRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{RECORD_HEADER}\n{},{},{},{},{},{},{},{},{}\n",
            self.method,
            self.density,
            self.seed,
            fmt_f64(self.final_train_acc),
            fmt_f64(self.final_test_acc),
            join_kept(&self.kept_per_layer),
            self.multiply_adds,
            self.dense_multiply_adds,
            fmt_f64(self.speedup)
        )
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Vec<ExperimentRecord>> {
        let bad = |what: &str| {
            Error::Data(format!("{}: malformed record ({what})", origin.display()))
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == RECORD_HEADER => {}
            _ => return Err(bad("unexpected header")),
        }
        let mut out = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 9 {
                return Err(bad("wrong column count"));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad("bad float"));
            let kept = if cols[5].is_empty() {
                Vec::new()
            } else {
                cols[5]
                    .split(';')
                    .map(|k| k.parse::<u64>().map_err(|_| bad("bad kept count")))
                    .collect::<Result<Vec<u64>>>()?
            };
            out.push(ExperimentRecord {
                method: cols[0].to_string(),
                density: f(cols[1])?,
                seed: cols[2].parse().map_err(|_| bad("bad seed"))?,
                final_train_acc: f(cols[3])?,
                final_test_acc: f(cols[4])?,
                kept_per_layer: kept,
                multiply_adds: cols[6].parse().map_err(|_| bad("bad madds"))?,
                dense_multiply_adds: cols[7].parse().map_err(|_| bad("bad madds"))?,
                speedup: f(cols[8])?,
                wall_time_secs: 0.0,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub summary_csv: String,
    pub speedup_csv: String,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregate records by (method, density): mean with min/max error bars for
/// accuracy, endpoint variance, and the multiply-add speedups.
pub fn aggregate(records: &[ExperimentRecord]) -> ReportTables {
    let mut groups: BTreeMap<(String, String), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.density.to_string())).or_default().push(r);
    }
    let mut summary = String::from(
        "method,density,reps,mean_train_acc,mean_test_acc,min_test_acc,max_test_acc,var_test_acc\n",
    );
    let mut speedup = String::from(
        "method,density,multiply_adds,dense_multiply_adds,mean_speedup,min_speedup,max_speedup,kept_per_layer\n",
    );
    for ((method, density), mut group) in groups {
        group.sort_by_key(|r| r.seed);
        let test: Vec<f64> = group.iter().map(|r| r.final_test_acc).collect();
        let train: Vec<f64> = group.iter().map(|r| r.final_train_acc).collect();
        let m = mean(&test);
        let var = mean(&test.iter().map(|v| (v - m) * (v - m)).collect::<Vec<_>>());
        let min = test.iter().copied().fold(f64::INFINITY, f64::min);
        let max = test.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = {
            use std::fmt::Write as _;
            writeln!(
                summary,
                "{method},{density},{},{},{},{},{},{}",
                group.len(),
                fmt_f64(mean(&train)),
                fmt_f64(m),
                fmt_f64(min),
                fmt_f64(max),
                fmt_f64(var)
            )
        };
        let sp: Vec<f64> = group.iter().map(|r| r.speedup).collect();
        let rep = group[0];
        let _ = {
            use std::fmt::Write as _;
            writeln!(
                speedup,
                "{method},{density},{},{},{},{},{},{}",
                rep.multiply_adds,
                rep.dense_multiply_adds,
                fmt_f64(mean(&sp)),
                fmt_f64(sp.iter().copied().fold(f64::INFINITY, f64::min)),
                fmt_f64(sp.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                join_kept(&rep.kept_per_layer)
            )
        };
    }
    ReportTables { summary_csv: summary, speedup_csv: speedup }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, acc: f64) -> ExperimentRecord {
        ExperimentRecord {
            method: method.into(),
            density: 0.1,
            seed,
            final_train_acc: acc + 0.01,
            final_test_acc: acc,
            kept_per_layer: vec![100, 50],
            multiply_adds: 150,
            dense_multiply_adds: 300,
            speedup: 2.0,
            wall_time_secs: 1.0,
        }
    }

    #[test]
    fn record_roundtrip() {
        let r = rec("ntt", 3, 0.91);
        let parsed = ExperimentRecord::parse_csv(&r.to_csv(), Path::new("x.csv")).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].method, "ntt");
        assert_eq!(parsed[0].seed, 3);
        assert_eq!(parsed[0].kept_per_layer, vec![100, 50]);
        assert!((parsed[0].final_test_acc - 0.91).abs() < 1e-9);
        assert!((parsed[0].speedup - 2.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mean_min_max() {
        let records =
            vec![rec("ntt", 0, 0.90), rec("ntt", 1, 0.94), rec("random", 0, 0.80)];
        let tables = aggregate(&records);
        let lines: Vec<&str> = tables.summary_csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("ntt,0.1,2,"));
        let cols: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cols[4], fmt_f64(0.92));
        assert_eq!(cols[5], fmt_f64(0.90));
        assert_eq!(cols[6], fmt_f64(0.94));
        assert!(lines[2].starts_with("random,0.1,1,"));
        let sp: Vec<&str> = tables.speedup_csv.lines().collect();
        assert_eq!(sp.len(), 3);
        assert!(sp[1].ends_with("100;50"));
    }

    #[test]
    fn malformed_record_is_data_error() {
        let e = ExperimentRecord::parse_csv("nope\n", Path::new("x.csv")).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }
}
