//! Stage-level adaptive threshold control.
//!
//! Each serving stage (prefill, decode) owns a controller that watches the
//! P90 of recent token latencies and nudges the brownout coverage threshold:
//! comfortably under the warning line it grows additively, past the SLO it
//! shrinks multiplicatively, and in the buffer zone between the two it holds.
//! An empty observation window also holds — no data, no movement.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SalcError {
    #[error("latency sample at t={got} precedes last sample at t={last}")]
    TimeRegression { last: f64, got: f64 },
    #[error("invalid latency sample {0}")]
    InvalidSample(f64),
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
}

/// The two serving stages measured and controlled independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Prefill => write!(f, "prefill"),
            Stage::Decode => write!(f, "decode"),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefill" => Ok(Stage::Prefill),
            "decode" => Ok(Stage::Decode),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Controller tuning for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SalcParams {
    /// Latency objective for this stage, seconds.
    pub slo_s: f64,
    /// Warning line as a fraction of the SLO (the lower edge of the buffer).
    pub warning_factor: f64,
    /// Multiplicative decrease applied when P90 exceeds the SLO.
    pub shrink_ratio: f64,
    /// Additive increase applied when P90 is under the warning line.
    pub increment: f64,
    /// Width of the trailing observation window, seconds.
    pub window_s: f64,
    /// Clamp bounds for the threshold.
    pub floor: f64,
    pub cap: f64,
}

impl SalcParams {
    pub fn validate(&self) -> Result<(), SalcError> {
        let bad = |msg: String| Err(SalcError::InvalidParams(msg));
        if !(self.slo_s.is_finite() && self.slo_s > 0.0) {
            return bad(format!("slo {} must be positive", self.slo_s));
        }
        if !(self.warning_factor > 0.0 && self.warning_factor < 1.0) {
            return bad(format!(
                "warning_factor {} must lie in (0, 1)",
                self.warning_factor
            ));
        }
        if !(self.shrink_ratio > 0.0 && self.shrink_ratio < 1.0) {
            return bad(format!(
                "shrink_ratio {} must lie in (0, 1)",
                self.shrink_ratio
            ));
        }
        if !(self.increment.is_finite() && self.increment > 0.0) {
            return bad(format!("increment {} must be positive", self.increment));
        }
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return bad(format!("window {} must be positive", self.window_s));
        }
        if !(0.0..=1.0).contains(&self.floor)
            || !(0.0..=1.0).contains(&self.cap)
            || self.floor > self.cap
        {
            return bad(format!(
                "floor {} / cap {} must satisfy 0 <= floor <= cap <= 1",
                self.floor, self.cap
            ));
        }
        Ok(())
    }

    /// Lower edge of the buffer zone: `slo * warning_factor`.
    pub fn warning_line(&self) -> f64 {
        self.slo_s * self.warning_factor
    }
}

/// Time-stamped latency samples with bounded retention.
#[derive(Debug, Clone)]
pub struct LatencyWindow {
    samples: VecDeque<(f64, f64)>,
    retention_s: f64,
}

impl LatencyWindow {
    /// `retention_s` bounds how far back samples are kept; it must be at
    /// least as wide as any window later queried.
    pub fn new(retention_s: f64) -> Self {
        Self {
            samples: VecDeque::new(),
            retention_s: retention_s.max(0.0),
        }
    }

    /// Appends one sample. Timestamps must be nondecreasing.
    pub fn record_latency(&mut self, time_s: f64, latency_s: f64) -> Result<(), SalcError> {
        if !time_s.is_finite() || !latency_s.is_finite() || latency_s < 0.0 {
            return Err(SalcError::InvalidSample(latency_s));
        }
        if let Some(&(last, _)) = self.samples.back() {
            if time_s < last {
                return Err(SalcError::TimeRegression {
                    last,
                    got: time_s,
                });
            }
        }
        self.samples.push_back((time_s, latency_s));
        while let Some(&(t, _)) = self.samples.front() {
            if t <= time_s - self.retention_s {
                self.samples.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nearest-rank P90 of samples with timestamps in `(now - window_s, now]`,
    /// or `None` when that slice is empty.
    pub fn p90(&self, now_s: f64, window_s: f64) -> Option<f64> {
        let mut values: Vec<f64> = self
            .samples
            .iter()
            .filter(|&&(t, _)| t > now_s - window_s && t <= now_s)
            .map(|&(_, v)| v)
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("samples checked finite"));
        percentile_nearest_rank(&values, 90)
    }
}

/// Nearest-rank percentile of an ascending-sorted slice (rank = ceil(p*n/100),
/// computed in integers so e.g. P90 of ten samples picks the ninth).
pub fn percentile_nearest_rank(sorted: &[f64], percentile: u32) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (percentile as usize * sorted.len()).div_ceil(100).max(1);
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Controller state for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SalcState {
    pub stage: Stage,
    pub threshold: f64,
}

/// One control step: reads the window's P90 as of `now_s` and returns the
/// next threshold. Holds on an empty window or inside the buffer zone.
pub fn salc_update(
    current_threshold: f64,
    params: &SalcParams,
    window: &LatencyWindow,
    now_s: f64,
) -> f64 {
    match window.p90(now_s, params.window_s) {
        None => current_threshold,
        Some(p90) => {
            if p90 < params.warning_line() {
                (current_threshold + params.increment).min(params.cap)
            } else if p90 > params.slo_s {
                (current_threshold * params.shrink_ratio).max(params.floor)
            } else {
                current_threshold
            }
        }
    }
}
