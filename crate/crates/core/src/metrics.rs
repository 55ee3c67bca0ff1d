//! Uncertainty accuracy, classification metrics and the scenario report.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detectors::Flag;
use crate::error::{Error, Result};

/// Green is read as "in scope", red as "out of scope". A flag is consistent
/// with a prediction when green goes with correct and red with incorrect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UAReport {
    pub n_in_correct: usize,
    pub n_in_incorrect: usize,
    pub n_out_correct: usize,
    pub n_out_incorrect: usize,
    pub ua: f64,
}

impl UAReport {
    pub fn from_counts(
        n_in_correct: usize,
        n_in_incorrect: usize,
        n_out_correct: usize,
        n_out_incorrect: usize,
    ) -> Result<Self> {
        let consistent = n_in_correct + n_out_incorrect;
        let inconsistent = n_out_correct + n_in_incorrect;
        if consistent + inconsistent == 0 {
            return Err(Error::EmptyInput("uncertainty accuracy"));
        }
        Ok(Self {
            n_in_correct,
            n_in_incorrect,
            n_out_correct,
            n_out_incorrect,
            ua: 1.0 - inconsistent as f64 / (inconsistent + consistent) as f64,
        })
    }

    pub fn total(&self) -> usize {
        self.n_in_correct + self.n_in_incorrect + self.n_out_correct + self.n_out_incorrect
    }
}

pub fn uncertainty_accuracy(
    flags: &[Flag],
    predictions: &[usize],
    labels: &[usize],
) -> Result<UAReport> {
    if flags.len() != predictions.len() || flags.len() != labels.len() {
        return Err(Error::shape(
            "uncertainty_accuracy",
            format!(
                "{} flags, {} predictions, {} labels",
                flags.len(),
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let mut cells = [0usize; 4];
    for ((f, p), l) in flags.iter().zip(predictions).zip(labels) {
        let correct = p == l;
        let idx = match (f, correct) {
            (Flag::Green, true) => 0,
            (Flag::Green, false) => 1,
            (Flag::Red, true) => 2,
            (Flag::Red, false) => 3,
        };
        cells[idx] += 1;
    }
    UAReport::from_counts(cells[0], cells[1], cells[2], cells[3])
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / predictions.len() as f64
}

/// Unweighted mean of per-class F1 over the classes present in `labels`.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    total / classes.len() as f64
}

pub fn red_rate(flags: &[Flag]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|f| f.is_red()).count() as f64 / flags.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub split: String,
    /// Fraction in [0, 1].
    pub ua: f64,
    pub red_rate: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Fraction of a split's windows stopped at each cascade stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub split: String,
    pub reconstruction: f64,
    pub distance: f64,
    pub mcdropout: f64,
    pub passed_all: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub config_checksum: String,
    pub rows: Vec<ReportRow>,
    pub stage_stats: Vec<StageStats>,
}

impl Report {
    pub fn row(&self, method: &str, split: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.split == split)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Stage statistics (an extension to the UA table) as CSV.
    pub fn write_stage_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.stage_stats {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    /// Plain-text table with UA and rates in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config checksum: {}", self.config_checksum);
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:>8} {:>9} {:>9} {:>7}",
            "method", "split", "UA %", "red %", "acc %", "n"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>8.2} {:>9.2} {:>9.2} {:>7}",
                r.method,
                r.split,
                100.0 * r.ua,
                100.0 * r.red_rate,
                100.0 * r.accuracy,
                r.n
            );
        }
        if !self.stage_stats.is_empty() {
            let _ = writeln!(
                s,
                "\nextension: fraction of windows stopped per cascade stage"
            );
            let _ = writeln!(
                s,
                "{:<16} {:>14} {:>9} {:>9} {:>10}",
                "split", "reconstruction", "distance", "mcdropout", "passed_all"
            );
            for st in &self.stage_stats {
                let _ = writeln!(
                    s,
                    "{:<16} {:>14.4} {:>9.4} {:>9.4} {:>10.4}",
                    st.split, st.reconstruction, st.distance, st.mcdropout, st.passed_all
                );
            }
        }
        let _ = writeln!(
            s,
            "\nreconstruction scores are computed per group of consecutive windows; \
             each window takes its group's flag"
        );
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ua_examples() {
        let g = vec![Flag::Green; 4];
        assert_eq!(
            uncertainty_accuracy(&g, &[1, 2, 3, 4], &[1, 2, 3, 4])
                .unwrap()
                .ua,
            1.0
        );
        assert_eq!(
            uncertainty_accuracy(&g, &[0, 0, 0, 0], &[1, 2, 3, 4])
                .unwrap()
                .ua,
            0.0
        );
        let r = UAReport::from_counts(50, 10, 15, 25).unwrap();
        assert!((r.ua - 0.75).abs() < 1e-12);
        assert!(uncertainty_accuracy(&[], &[], &[]).is_err());
    }

    #[test]
    fn all_red_on_unseen_class_is_perfect() {
        let flags = vec![Flag::Red; 5];
        let r = uncertainty_accuracy(&flags, &[0, 1, 2, 3, 4], &[9; 5]).unwrap();
        assert_eq!(r.ua, 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1]), 1.0);
        // class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 0 -> 0
        assert!((macro_f1(&[0, 0], &[0, 1]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report {
            config_checksum: "abc".into(),
            rows: vec![ReportRow {
                method: "distance".into(),
                split: "validation".into(),
                ua: 0.8125,
                red_rate: 0.01,
                accuracy: 0.9,
                n: 10,
            }],
            stage_stats: vec![],
        };
        let p = dir.path().join("r.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,split,ua,red_rate,accuracy,n\n"));
        assert_eq!(Report::read_csv(&p).unwrap(), report.rows);
    }
}
