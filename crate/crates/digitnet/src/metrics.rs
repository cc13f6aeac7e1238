//! Training metrics and their CSV form. Number formatting is fixed so that
//! identical runs emit byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Validation => f.write_str("validation"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecognizerRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SganRecord {
    pub step: u64,
    pub d_loss: f64,
    pub d_accuracy: f64,
    pub g_loss: f64,
}

/// Six significant digits, switching to scientific notation outside the
/// range where fixed-point would lose precision.
pub fn fmt_value(v: f64) -> String {
    if v == 0.0 {
        return "0.000000".to_string();
    }
    let a = v.abs();
    if (1e-4..1e7).contains(&a) {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

pub fn recognizer_csv(records: &[RecognizerRecord]) -> String {
    let mut out = String::from("step,split,loss,accuracy\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            r.split,
            fmt_value(r.loss),
            fmt_value(r.accuracy)
        );
    }
    out
}

pub fn sgan_csv(records: &[SganRecord]) -> String {
    let mut out = String::from("step,d_loss,d_accuracy,g_loss\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            fmt_value(r.d_loss),
            fmt_value(r.d_accuracy),
            fmt_value(r.g_loss)
        );
    }
    out
}

pub fn write_recognizer_csv(path: impl AsRef<Path>, records: &[RecognizerRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, recognizer_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn write_sgan_csv(path: impl AsRef<Path>, records: &[SganRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sgan_csv(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metrics_is_header_only() {
        assert_eq!(recognizer_csv(&[]), "step,split,loss,accuracy\n");
        assert_eq!(sgan_csv(&[]), "step,d_loss,d_accuracy,g_loss\n");
    }

    #[test]
    fn three_records_make_four_lines() {
        let recs: Vec<RecognizerRecord> = (0..3)
            .map(|i| RecognizerRecord {
                step: i,
                split: Split::Train,
                loss: 2.302125,
                accuracy: 0.1,
            })
            .collect();
        let csv = recognizer_csv(&recs);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("1,train,2.302125,0.100000"));
    }

    #[test]
    fn formatting_keeps_six_significant_digits() {
        assert_eq!(fmt_value(0.5), "0.500000");
        assert_eq!(fmt_value(0.0), "0.000000");
        assert_eq!(fmt_value(1234.5678), "1234.567800");
        assert_eq!(fmt_value(0.0000123456), "1.234560e-5");
        assert_eq!(fmt_value(-3.0), "-3.000000");
    }

    #[test]
    fn identical_records_identical_bytes() {
        let recs = [SganRecord {
            step: 7,
            d_loss: 0.368,
            d_accuracy: 0.75,
            g_loss: 0.694,
        }];
        assert_eq!(sgan_csv(&recs), sgan_csv(&recs));
        assert_eq!(
            sgan_csv(&recs),
            "step,d_loss,d_accuracy,g_loss\n7,0.368000,0.750000,0.694000\n"
        );
    }

    #[test]
    fn write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_recognizer_csv(
            &p,
            &[RecognizerRecord {
                step: 0,
                split: Split::Validation,
                loss: 1.0,
                accuracy: 0.5,
            }],
        )
        .unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            body,
            "step,split,loss,accuracy\n0,validation,1.000000,0.500000\n"
        );
    }
}
