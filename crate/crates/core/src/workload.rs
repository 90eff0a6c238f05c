//! Seeded request-trace generation: Poisson arrivals under a
//! piecewise-constant rate schedule, with configurable input/output length
//! distributions, plus CSV export/import so runs are replayable.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid rate schedule: {0}")]
    Schedule(String),
    #[error("invalid length distribution: {0}")]
    Distribution(String),
    #[error("length file {path}: {problem}")]
    LengthFile { path: String, problem: String },
    #[error("trace row {line}: {problem}")]
    TraceRow { line: u64, problem: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One generated (or imported) request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub input_len: usize,
    pub output_len: usize,
}

/// Constant request rate over `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub rps: f64,
}

/// Piecewise-constant arrival-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub segments: Vec<RateSegment>,
}

impl RateSchedule {
    pub fn new(segments: Vec<RateSegment>) -> Result<Self, WorkloadError> {
        let schedule = Self { segments };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.segments.is_empty() {
            return Err(WorkloadError::Schedule("schedule has no segments".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.start_s.is_finite() && seg.end_s.is_finite() && seg.start_s < seg.end_s) {
                return Err(WorkloadError::Schedule(format!(
                    "segment {i} spans [{}, {}), which is empty or non-finite",
                    seg.start_s, seg.end_s
                )));
            }
            if seg.start_s < 0.0 {
                return Err(WorkloadError::Schedule(format!(
                    "segment {i} starts before t=0"
                )));
            }
            if !(seg.rps.is_finite() && seg.rps >= 0.0) {
                return Err(WorkloadError::Schedule(format!(
                    "segment {i} rate {} must be nonnegative",
                    seg.rps
                )));
            }
            if i > 0 && seg.start_s != self.segments[i - 1].end_s {
                return Err(WorkloadError::Schedule(format!(
                    "segment {i} starts at {} but the previous segment ends at {}; \
                     segments must be contiguous (use a zero-rate segment for quiet spans)",
                    seg.start_s,
                    self.segments[i - 1].end_s
                )));
            }
        }
        Ok(())
    }

    pub fn end_s(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end_s)
    }

    /// Expected number of arrivals: Σ rate · duration.
    pub fn expected_arrivals(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.rps * (s.end_s - s.start_s))
            .sum()
    }
}

/// Token-length sampling law for request inputs or outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    Constant {
        value: usize,
    },
    Uniform {
        lo: usize,
        hi: usize,
    },
    /// Lengths are exp(N(ln median, sigma^2)), rounded.
    LogNormal {
        median: f64,
        sigma: f64,
    },
    /// Uniform draw from a fixed pool of observed lengths.
    Empirical {
        values: Vec<usize>,
    },
    /// `Empirical` whose pool lives in a newline-separated file; call
    /// `resolve_files` before sampling.
    EmpiricalFile {
        path: String,
    },
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: String| Err(WorkloadError::Distribution(msg));
        match self {
            LengthDistribution::Constant { value } => {
                if *value == 0 {
                    return bad("constant length must be at least 1".into());
                }
            }
            LengthDistribution::Uniform { lo, hi } => {
                if *lo == 0 || lo > hi {
                    return bad(format!("uniform bounds [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
                }
            }
            LengthDistribution::LogNormal { median, sigma } => {
                if !(median.is_finite() && *median >= 1.0) {
                    return bad(format!("lognormal median {median} must be at least 1"));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return bad(format!("lognormal sigma {sigma} must be nonnegative"));
                }
            }
            LengthDistribution::Empirical { values } => {
                if values.is_empty() {
                    return bad("empirical pool is empty".into());
                }
                if values.contains(&0) {
                    return bad("empirical pool contains a zero length".into());
                }
            }
            LengthDistribution::EmpiricalFile { .. } => {}
        }
        Ok(())
    }

    /// Loads any file-backed pool, returning a ready-to-sample distribution.
    pub fn resolve_files(&self, base_dir: &Path) -> Result<LengthDistribution, WorkloadError> {
        match self {
            LengthDistribution::EmpiricalFile { path } => {
                let full = base_dir.join(path);
                empirical_from_file(&full)
            }
            other => Ok(other.clone()),
        }
    }

    /// Draws one length, clamped into `[lo, hi]`.
    pub fn sample<R: Rng>(&self, rng: &mut R, lo: usize, hi: usize) -> Result<usize, WorkloadError> {
        debug_assert!(lo >= 1 && lo <= hi);
        let raw = match self {
            LengthDistribution::Constant { value } => *value,
            LengthDistribution::Uniform { lo: a, hi: b } => rng.gen_range(*a..=*b),
            LengthDistribution::LogNormal { median, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (median.ln() + sigma * z).exp().round().max(1.0) as usize
            }
            LengthDistribution::Empirical { values } => values[rng.gen_range(0..values.len())],
            LengthDistribution::EmpiricalFile { path } => {
                return Err(WorkloadError::Distribution(format!(
                    "length file {path} not loaded; call resolve_files first"
                )));
            }
        };
        Ok(raw.clamp(lo, hi))
    }
}

/// Reads one length per nonempty line into an `Empirical` pool.
pub fn empirical_from_file(path: &Path) -> Result<LengthDistribution, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|e| WorkloadError::LengthFile {
        path: path.display().to_string(),
        problem: e.to_string(),
    })?;
    let mut values = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let v: usize = trimmed.parse().map_err(|_| WorkloadError::LengthFile {
            path: path.display().to_string(),
            problem: format!("line {}: not a length: {trimmed:?}", i + 1),
        })?;
        values.push(v);
    }
    let dist = LengthDistribution::Empirical { values };
    dist.validate()?;
    Ok(dist)
}

/// Short-request profile: lognormal lengths with median 20 in / 60 out.
pub fn alpaca_like() -> (LengthDistribution, LengthDistribution) {
    (
        LengthDistribution::LogNormal { median: 20.0, sigma: 0.5 },
        LengthDistribution::LogNormal { median: 60.0, sigma: 0.5 },
    )
}

/// Long-request profile: ~4.3x longer inputs and ~13.7x longer outputs
/// than the short profile.
pub fn sharegpt_like() -> (LengthDistribution, LengthDistribution) {
    (
        LengthDistribution::LogNormal { median: 86.0, sigma: 0.5 },
        LengthDistribution::LogNormal { median: 822.0, sigma: 0.5 },
    )
}

/// Generates a time-ordered request trace: within each schedule segment,
/// inter-arrival gaps are exponential at the segment rate (fresh gap at each
/// segment start, which is exact for a Poisson process by memorylessness).
/// Lengths are clamped so `input + output <= max_seq_len`.
pub fn generate_trace(
    schedule: &RateSchedule,
    input_dist: &LengthDistribution,
    output_dist: &LengthDistribution,
    max_seq_len: usize,
    seed: u64,
) -> Result<Vec<Request>, WorkloadError> {
    schedule.validate()?;
    input_dist.validate()?;
    output_dist.validate()?;
    if max_seq_len < 2 {
        return Err(WorkloadError::Distribution(format!(
            "max_seq_len {max_seq_len} leaves no room for input plus output"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::new();
    for seg in &schedule.segments {
        if seg.rps == 0.0 {
            continue;
        }
        let gap = Exp::new(seg.rps).expect("rate validated positive");
        let mut t = seg.start_s;
        loop {
            t += gap.sample(&mut rng);
            if t >= seg.end_s {
                break;
            }
            let input_len = input_dist.sample(&mut rng, 1, max_seq_len - 1)?;
            let output_len = output_dist.sample(&mut rng, 1, max_seq_len - input_len)?;
            requests.push(Request {
                id: requests.len() as u64,
                arrival_time: t,
                input_len,
                output_len,
            });
        }
    }
    Ok(requests)
}

/// Writes a trace as CSV with header `id,arrival_time,input_len,output_len`.
pub fn write_trace_csv(path: &Path, trace: &[Request]) -> Result<(), WorkloadError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| WorkloadError::TraceRow { line: 0, problem: e.to_string() })?;
    for req in trace {
        writer
            .serialize(req)
            .map_err(|e| WorkloadError::TraceRow { line: 0, problem: e.to_string() })?;
    }
    writer
        .flush()
        .map_err(|e| WorkloadError::TraceRow { line: 0, problem: e.to_string() })?;
    Ok(())
}

/// Reads a trace written by `write_trace_csv`. Malformed rows are errors
/// (a replayable trace must be exact), reported with their line number.
pub fn read_trace_csv(path: &Path) -> Result<Vec<Request>, WorkloadError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| WorkloadError::TraceRow { line: 0, problem: e.to_string() })?;
    let mut trace = Vec::new();
    for result in reader.deserialize::<Request>() {
        match result {
            Ok(req) => trace.push(req),
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or(0);
                return Err(WorkloadError::TraceRow { line, problem: e.to_string() });
            }
        }
    }
    Ok(trace)
}
