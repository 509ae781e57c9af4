//! Evaluation formulas comparing predictions with measured runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FAILURE_WEIGHT: f64 = 0.7;
pub const ERROR_WEIGHT: f64 = 0.3;
pub const QUADRANT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no values to aggregate")]
    EmptyInput,
    #[error("actual peak must be positive")]
    ZeroActual,
}

/// OOM is predicted when the peak exceeds the capacity; equality still fits.
pub fn predict_oom(predicted_peak: u64, capacity: u64) -> bool {
    predicted_peak > capacity
}

/// First validation: the OOM verdict matches what happened.
pub fn correctness_round1(predicted: bool, actual: bool) -> bool {
    predicted == actual
}

/// Second validation, after capping the device at the predicted memory.
/// Correct if the capped run fits, or if the task was rightly rejected.
pub fn correctness_round2(c1: bool, oom1: bool, oom2: bool) -> bool {
    (c1 && !oom2) || (c1 && oom1)
}

pub fn relative_error(predicted: u64, actual: u64) -> Result<f64, MetricError> {
    if actual == 0 {
        return Err(MetricError::ZeroActual);
    }
    Ok(predicted.abs_diff(actual) as f64 / actual as f64)
}

/// Median, taking the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn performance_score(failure_probability: f64, median_error: f64) -> f64 {
    FAILURE_WEIGHT * failure_probability + ERROR_WEIGHT * median_error
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    Optimal,
    Underestimation,
    Overestimation,
    Worst,
}

pub fn quadrant(failure_probability: f64, median_error: f64) -> Quadrant {
    match (
        failure_probability < QUADRANT_THRESHOLD,
        median_error < QUADRANT_THRESHOLD,
    ) {
        (true, true) => Quadrant::Optimal,
        (false, true) => Quadrant::Underestimation,
        (true, false) => Quadrant::Overestimation,
        (false, false) => Quadrant::Worst,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub run_count: usize,
    pub failure_probability: f64,
    pub median_error: f64,
    pub performance_score: f64,
    pub quadrant: Quadrant,
}

/// Summarizes `(correct, relative_error)` pairs for one estimator.
pub fn aggregate(records: &[(bool, f64)]) -> Result<Aggregate, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = records.len();
    let correct = records.iter().filter(|r| r.0).count();
    let p = (n - correct) as f64 / n as f64;
    let errors: Vec<f64> = records.iter().map(|r| r.1).collect();
    let e = median(&errors)?;
    Ok(Aggregate {
        run_count: n,
        failure_probability: p,
        median_error: e,
        performance_score: performance_score(p, e),
        quadrant: quadrant(p, e),
    })
}

fn signed(bytes: u64) -> i64 {
    i64::try_from(bytes).unwrap_or(i64::MAX)
}

/// Memory freed up for other work. A wrong verdict costs the whole device.
pub fn memory_saved(capacity: u64, predicted_peak: u64, c1: bool, oom1: bool, oom2: bool) -> i64 {
    if c1 && !oom2 {
        signed(capacity) - signed(predicted_peak)
    } else if c1 && oom1 {
        signed(capacity)
    } else {
        -signed(capacity)
    }
}

pub fn avg_memory_saved(savings: &[i64]) -> Result<f64, MetricError> {
    if savings.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let total: i128 = savings.iter().map(|&s| s as i128).sum();
    Ok(total as f64 / savings.len() as f64)
}

/// One measured run of a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub config_id: String,
    pub round: u8,
    #[serde(default)]
    pub device: u32,
    #[serde(default)]
    pub estimator: String,
    pub actual_peak: u64,
    pub actual_oom: bool,
}

impl ValidationRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.round == 1 || self.round == 2 {
            Ok(())
        } else {
            Err(format!(
                "{}: round must be 1 or 2, got {}",
                self.config_id, self.round
            ))
        }
    }
}

/// Metrics for one configuration on one device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub config_id: String,
    pub device: u32,
    pub predicted_peak: u64,
    pub actual_peak: u64,
    pub oom_predicted: bool,
    pub correctness_r1: bool,
    /// Absent when there is no second-round measurement.
    pub correctness_r2: Option<bool>,
    /// Absent when the first run measured no peak.
    pub relative_error: Option<f64>,
    pub memory_saved: Option<i64>,
}

impl RunMetrics {
    /// The verdict counted towards the failure probability: the second round
    /// when measured, else the first.
    pub fn correct(&self) -> bool {
        self.correctness_r2.unwrap_or(self.correctness_r1)
    }
}

/// Scores a prediction against the first and, when available, second round.
pub fn score_run(
    predicted_peak: u64,
    oom_predicted: bool,
    capacity: u64,
    round1: &ValidationRecord,
    round2: Option<&ValidationRecord>,
) -> RunMetrics {
    let c1 = correctness_round1(oom_predicted, round1.actual_oom);
    let oom1 = round1.actual_oom;
    let c2 = round2.map(|r| correctness_round2(c1, oom1, r.actual_oom));
    RunMetrics {
        config_id: round1.config_id.clone(),
        device: round1.device,
        predicted_peak,
        actual_peak: round1.actual_peak,
        oom_predicted,
        correctness_r1: c1,
        correctness_r2: c2,
        relative_error: relative_error(predicted_peak, round1.actual_peak).ok(),
        memory_saved: round2
            .map(|r| memory_saved(capacity, predicted_peak, c1, oom1, r.actual_oom)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSet {
    pub run_count: usize,
    pub failure_probability: f64,
    pub median_error: Option<f64>,
    pub performance_score: Option<f64>,
    pub quadrant: Option<Quadrant>,
    pub avg_memory_saved: Option<f64>,
    pub runs: Vec<RunMetrics>,
}

/// Summarizes scored runs. Runs without a relative error still count towards
/// the failure probability.
pub fn summarize(runs: Vec<RunMetrics>) -> Result<MetricSet, MetricError> {
    if runs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = runs.len();
    let p = runs.iter().filter(|r| !r.correct()).count() as f64 / n as f64;
    let errors: Vec<f64> = runs.iter().filter_map(|r| r.relative_error).collect();
    let e = median(&errors).ok();
    let savings: Vec<i64> = runs.iter().filter_map(|r| r.memory_saved).collect();
    Ok(MetricSet {
        run_count: n,
        failure_probability: p,
        median_error: e,
        performance_score: e.map(|e| performance_score(p, e)),
        quadrant: e.map(|e| quadrant(p, e)),
        avg_memory_saved: avg_memory_saved(&savings).ok(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Ok(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Ok(2.5));
        assert_eq!(median(&[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn zero_actual_is_rejected() {
        assert_eq!(relative_error(5, 0), Err(MetricError::ZeroActual));
    }

    #[test]
    fn run_scoring_falls_back_without_second_round() {
        let r1 = ValidationRecord {
            config_id: "a".into(),
            round: 1,
            device: 0,
            estimator: String::new(),
            actual_peak: 100,
            actual_oom: false,
        };
        let run = score_run(110, false, 1000, &r1, None);
        assert!(run.correct());
        assert_eq!(run.correctness_r2, None);
        assert_eq!(run.memory_saved, None);
        let r2 = ValidationRecord {
            round: 2,
            ..r1.clone()
        };
        let run = score_run(110, false, 1000, &r1, Some(&r2));
        assert_eq!(run.memory_saved, Some(890));
        let set = summarize(vec![run]).unwrap();
        assert_eq!(set.failure_probability, 0.0);
        assert_eq!(set.avg_memory_saved, Some(890.0));
    }
}
