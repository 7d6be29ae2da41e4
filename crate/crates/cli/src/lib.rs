//! The `miniflow` command: graph runs, worker processes, the null-step
//! benchmark and the demos.

pub mod bench;
pub mod demo;
pub mod run;
pub mod worker;

use miniflow::error::CheckpointErrorKind;
use miniflow::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// 1 for problems with what the user asked for, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::InvalidArgument(_)
        | Error::Validation(_)
        | Error::NotFound(_)
        | Error::Placement(_)
        | Error::ShapeMismatch { .. }
        | Error::DTypeMismatch { .. }
        | Error::Checkpoint {
            kind: CheckpointErrorKind::FileNotFound | CheckpointErrorKind::NameNotFound,
            ..
        } => EXIT_USER,
        _ => EXIT_INTERNAL,
    }
}

/// Median, 10th and 90th percentile of a set of durations, in ms.
pub fn summarize_ms(times: &[std::time::Duration]) -> (f64, f64, f64) {
    use miniflow::training::coord::percentile;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    (ms(percentile(times, 0.5)), ms(percentile(times, 0.1)), ms(percentile(times, 0.9)))
}

pub const CSV_HEADER: &str = "step,median_ms,p10_ms,p90_ms,images_or_words_per_s";

/// One CSV row in the shared reporting format.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub step: u64,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub per_s: f64,
}

impl CsvRow {
    pub fn from_times(step: u64, times: &[std::time::Duration], units_per_step: f64) -> CsvRow {
        let (median_ms, p10_ms, p90_ms) = summarize_ms(times);
        let per_s = if median_ms > 0.0 { units_per_step * 1e3 / median_ms } else { 0.0 };
        CsvRow {
            step,
            median_ms,
            p10_ms,
            p90_ms,
            per_s,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{:.1}",
            self.step, self.median_ms, self.p10_ms, self.p90_ms, self.per_s
        )
    }

    pub fn parse(line: &str) -> Option<CsvRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return None;
        }
        Some(CsvRow {
            step: f[0].parse().ok()?,
            median_ms: f[1].parse().ok()?,
            p10_ms: f[2].parse().ok()?,
            p90_ms: f[3].parse().ok()?,
            per_s: f[4].parse().ok()?,
        })
    }
}
