//! Discrete-event serving engine: FCFS admission with continuous batching,
//! prefill/decode iterations executed through the toy MoE layer under
//! brownout routing, a calibratable latency cost model, and the adaptive
//! threshold controller in the loop. Produces per-token latency records,
//! threshold traces, and an SLO summary report.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::brownout::{
    batch_assignments, plan_brownout, plan_stats, BrownoutConfig, BrownoutError, GroupExecutor,
    PlanStats,
};
use crate::moe::{moe_forward, Activation, HiddenVector, MoeError, MoeLayer, TokenBatch};
use crate::salc::{
    percentile_nearest_rank, salc_update, LatencyWindow, SalcError, SalcParams, Stage,
};
use crate::workload::{
    generate_trace, read_trace_csv, LengthDistribution, RateSchedule, RateSegment, Request,
    WorkloadError,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid trace: {0}")]
    Trace(String),
    #[error("records csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Brownout(#[from] BrownoutError),
    #[error(transparent)]
    Salc(#[from] SalcError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// Latency coefficients for one batched iteration. All values are seconds;
/// the absolute scale is a calibration choice, only the shape matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Flat scheduling/launch cost per iteration.
    pub iteration_overhead_s: f64,
    /// Attention-side cost per token in the batch.
    pub attn_per_token_s: f64,
    /// Flat cost per MoE layer.
    pub moe_fixed_s: f64,
    /// Cost per distinct expert executor launched in a layer.
    pub expert_access_cost_s: f64,
    /// Cost per processed (token, expert) visit; dropped pairs cost nothing.
    pub per_token_compute_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            iteration_overhead_s: 2e-3,
            attn_per_token_s: 5e-4,
            moe_fixed_s: 1.5e-2,
            expert_access_cost_s: 5e-3,
            per_token_compute_s: 5e-4,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("iteration_overhead_s", self.iteration_overhead_s),
            ("attn_per_token_s", self.attn_per_token_s),
            ("moe_fixed_s", self.moe_fixed_s),
            ("expert_access_cost_s", self.expert_access_cost_s),
            ("per_token_compute_s", self.per_token_compute_s),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::Config(format!(
                    "cost.{name} = {v} must be a nonnegative finite number"
                )));
            }
        }
        Ok(())
    }
}

fn layer_moe_cost(cost: &CostModel, stats: &PlanStats) -> f64 {
    let visits = stats.tokens_via_originals + stats.tokens_via_united;
    cost.moe_fixed_s
        + stats.experts_accessed as f64 * cost.expert_access_cost_s
        + visits as f64 * cost.per_token_compute_s
}

/// Latency of one batched iteration: overhead, attention per token, and per
/// MoE layer a fixed cost plus accessed-executor and token-visit costs.
/// Dropped pairs contribute no visit cost.
pub fn iteration_latency(cost: &CostModel, batch_tokens: usize, per_layer_stats: &[PlanStats]) -> f64 {
    let moe: f64 = per_layer_stats.iter().map(|s| layer_moe_cost(cost, s)).sum();
    cost.iteration_overhead_s + batch_tokens as f64 * cost.attn_per_token_s + moe
}

/// Engine-level limits, SLOs, and run geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub max_batch_size: usize,
    pub max_seq_len: usize,
    pub prefill_slo_s: f64,
    pub decode_slo_s: f64,
    pub layers: usize,
    pub seed: u64,
    /// Optional wall-clock cutoff (simulated seconds); unfinished requests
    /// are reported, not an error.
    pub horizon_s: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_batch_size: 64,
            max_seq_len: 2048,
            prefill_slo_s: 0.25,
            decode_slo_s: 0.15,
            layers: 2,
            seed: 0,
            horizon_s: None,
        }
    }
}

/// Toy model geometry; ignored (except consistency checks) when a layer
/// file supplies the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub h: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub activation: Activation,
    /// Optional path to a layer JSON document; overrides the seeded layer.
    pub layer_file: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 8,
            h: 8,
            num_experts: 8,
            top_k: 2,
            n_shared: 0,
            activation: Activation::Relu,
            layer_file: None,
        }
    }
}

/// Brownout knobs held fixed for a run (the threshold itself may move).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimBrownoutConfig {
    /// Experts merged per united group.
    pub way: usize,
    /// Drop uncovered pairs instead of delegating them.
    pub use_full_brownout: bool,
    pub initial_threshold: f64,
}

impl Default for SimBrownoutConfig {
    fn default() -> Self {
        Self {
            way: 8,
            use_full_brownout: false,
            initial_threshold: 1.0,
        }
    }
}

/// Controller tuning for one stage; the stage SLO comes from [`EngineConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalcTuning {
    pub warning_factor: f64,
    pub shrink_ratio: f64,
    pub increment: f64,
    pub window_s: f64,
    pub floor: f64,
    pub cap: f64,
}

impl Default for SalcTuning {
    fn default() -> Self {
        Self {
            warning_factor: 0.8,
            shrink_ratio: 0.8,
            increment: 0.1,
            window_s: 0.5,
            floor: 0.0,
            cap: 1.0,
        }
    }
}

impl SalcTuning {
    pub fn to_params(self, slo_s: f64) -> SalcParams {
        SalcParams {
            slo_s,
            warning_factor: self.warning_factor,
            shrink_ratio: self.shrink_ratio,
            increment: self.increment,
            window_s: self.window_s,
            floor: self.floor,
            cap: self.cap,
        }
    }
}

/// Threshold policy for a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ControllerMode {
    /// Thresholds pinned at `brownout.initial_threshold`.
    #[default]
    Off,
    /// Thresholds pinned at an explicit value.
    Static { threshold: f64 },
    /// Per-stage latency feedback.
    Salc {
        #[serde(default)]
        prefill: SalcTuning,
        #[serde(default)]
        decode: SalcTuning,
    },
}

/// Arrival-trace source: either a replay file or a generated Poisson trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub segments: Vec<RateSegment>,
    pub input: LengthDistribution,
    pub output: LengthDistribution,
    /// Optional CSV replay; when set, the generator fields are ignored.
    pub trace_file: Option<String>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            segments: vec![
                RateSegment { start_s: 0.0, end_s: 75.0, rps: 1.0 },
                RateSegment { start_s: 75.0, end_s: 250.0, rps: 2.0 },
            ],
            input: LengthDistribution::LogNormal { median: 6.0, sigma: 0.3 },
            output: LengthDistribution::LogNormal { median: 60.0, sigma: 0.5 },
            trace_file: None,
        }
    }
}

/// Full simulation configuration (the JSON document the CLI consumes).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub engine: EngineConfig,
    pub cost: CostModel,
    pub controller: ControllerMode,
    pub brownout: SimBrownoutConfig,
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String, SimError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        let e = &self.engine;
        if e.max_batch_size == 0 {
            return bad("engine.max_batch_size must be at least 1".into());
        }
        if e.max_seq_len < 2 {
            return bad("engine.max_seq_len must be at least 2".into());
        }
        if !(e.prefill_slo_s.is_finite() && e.prefill_slo_s > 0.0)
            || !(e.decode_slo_s.is_finite() && e.decode_slo_s > 0.0)
        {
            return bad("engine SLOs must be positive".into());
        }
        if e.layers == 0 {
            return bad("engine.layers must be at least 1".into());
        }
        if let Some(h) = e.horizon_s {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("engine.horizon_s {h} must be positive"));
            }
        }
        self.cost.validate()?;
        if self.brownout.way == 0 {
            return bad("brownout.way must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.brownout.initial_threshold) {
            return bad(format!(
                "brownout.initial_threshold {} must lie in [0, 1]",
                self.brownout.initial_threshold
            ));
        }
        let m = &self.model;
        if m.layer_file.is_none() {
            if m.d == 0 || m.h == 0 || m.num_experts == 0 {
                return bad("model dimensions must be positive".into());
            }
            if m.top_k == 0 || m.top_k > m.num_experts {
                return bad(format!(
                    "model.top_k {} must lie in [1, {}]",
                    m.top_k, m.num_experts
                ));
            }
        }
        match &self.controller {
            ControllerMode::Off => {}
            ControllerMode::Static { threshold } => {
                if !(0.0..=1.0).contains(threshold) {
                    return bad(format!("static threshold {threshold} must lie in [0, 1]"));
                }
            }
            ControllerMode::Salc { prefill, decode } => {
                prefill
                    .to_params(e.prefill_slo_s)
                    .validate()
                    .map_err(|err| SimError::Config(format!("controller.prefill: {err}")))?;
                decode
                    .to_params(e.decode_slo_s)
                    .validate()
                    .map_err(|err| SimError::Config(format!("controller.decode: {err}")))?;
            }
        }
        if self.workload.trace_file.is_none() {
            RateSchedule::new(self.workload.segments.clone()).map_err(|err| {
                SimError::Config(format!("workload.segments: {err}"))
            })?;
            self.workload
                .input
                .validate()
                .map_err(|err| SimError::Config(format!("workload.input: {err}")))?;
            self.workload
                .output
                .validate()
                .map_err(|err| SimError::Config(format!("workload.output: {err}")))?;
        }
        Ok(())
    }

    /// Builds the layer used for every MoE layer of the toy model: either
    /// loaded from `model.layer_file` or generated from the seed.
    pub fn build_layer(&self) -> Result<MoeLayer, SimError> {
        match &self.model.layer_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    SimError::Config(format!("model.layer_file {path}: {e}"))
                })?;
                let layer = MoeLayer::from_json(&text)?;
                if layer.group_size != self.brownout.way {
                    return Err(SimError::Config(format!(
                        "layer file groups experts {} per united expert but brownout.way is {}",
                        layer.group_size, self.brownout.way
                    )));
                }
                Ok(layer)
            }
            None => Ok(MoeLayer::random(
                self.model.d,
                self.model.h,
                self.model.num_experts,
                self.brownout.way,
                self.model.n_shared,
                self.model.top_k,
                self.model.activation,
                self.engine.seed,
            )?),
        }
    }

    /// Materializes the arrival trace: replayed from CSV or generated.
    pub fn load_trace(&self) -> Result<Vec<Request>, SimError> {
        match &self.workload.trace_file {
            Some(path) => Ok(read_trace_csv(Path::new(path))?),
            None => {
                let schedule = RateSchedule::new(self.workload.segments.clone())?;
                Ok(generate_trace(
                    &schedule,
                    &self.workload.input,
                    &self.workload.output,
                    self.engine.max_seq_len,
                    self.engine.seed,
                )?)
            }
        }
    }
}

/// One emitted token: TTFT for token 0 (prefill), inter-token time otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLatencyRecord {
    pub stage: Stage,
    pub request_id: u64,
    pub token_index: usize,
    pub emit_time_s: f64,
    pub latency_s: f64,
    pub threshold_at_emit: f64,
}

/// Controller threshold after the update at the end of an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub time_s: f64,
    pub stage: Stage,
    pub threshold: f64,
}

/// Per-iteration accounting, including the counterfactual MoE cost the same
/// batch would have paid with every active expert run as-is (no brownout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub index: usize,
    pub end_time_s: f64,
    pub batch_tokens: usize,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
    pub latency_s: f64,
    pub moe_latency_s: f64,
    pub zero_brownout_moe_latency_s: f64,
}

/// Latency distribution summary for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub tokens: usize,
    pub p50_s: Option<f64>,
    pub p90_s: Option<f64>,
    pub p99_s: Option<f64>,
    /// Fraction of tokens with latency strictly above the stage SLO.
    pub violation_rate: f64,
    /// Mean of the per-iteration controller threshold trace.
    pub mean_threshold: Option<f64>,
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub duration_s: f64,
    pub iterations: usize,
    pub requests_completed: usize,
    pub requests_unfinished: usize,
    pub tokens_emitted: usize,
    pub throughput_tokens_per_s: f64,
    pub prefill: StageSummary,
    pub decode: StageSummary,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub report: SimReport,
    pub records: Vec<TokenLatencyRecord>,
    pub thresholds: Vec<ThresholdRecord>,
    pub iterations: Vec<IterationStats>,
}

/// Per-stage SLO violation fractions (empty stage counts as 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationRates {
    pub prefill: f64,
    pub decode: f64,
}

/// Fraction of each stage's records with latency strictly above its SLO.
pub fn violation_rate(
    records: &[TokenLatencyRecord],
    prefill_slo_s: f64,
    decode_slo_s: f64,
) -> ViolationRates {
    ViolationRates {
        prefill: stage_violation_rate(records, Stage::Prefill, prefill_slo_s),
        decode: stage_violation_rate(records, Stage::Decode, decode_slo_s),
    }
}

/// Violation fraction for one stage.
pub fn stage_violation_rate(records: &[TokenLatencyRecord], stage: Stage, slo_s: f64) -> f64 {
    let mut total = 0usize;
    let mut over = 0usize;
    for r in records {
        if r.stage == stage {
            total += 1;
            if r.latency_s > slo_s {
                over += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        over as f64 / total as f64
    }
}

struct ActiveRequest {
    id: u64,
    arrival_time: f64,
    input_len: usize,
    output_len: usize,
    /// Tokens emitted so far; 0 means the request still needs prefill.
    emitted: usize,
    last_emit_s: f64,
}

enum Controller {
    Fixed,
    Salc {
        prefill: SalcParams,
        decode: SalcParams,
        prefill_window: LatencyWindow,
        decode_window: LatencyWindow,
    },
}

/// The serving loop: owns the clock, queue, running batch, controller
/// state, and accumulated traces.
pub struct Engine {
    cost: CostModel,
    layers: usize,
    max_batch_size: usize,
    seed: u64,
    way: usize,
    use_full_brownout: bool,
    layer: MoeLayer,
    prefill_slo_s: f64,
    decode_slo_s: f64,

    trace: Vec<Request>,
    next_arrival: usize,
    waiting: VecDeque<Request>,
    running: Vec<ActiveRequest>,
    clock: f64,
    prefill_threshold: f64,
    decode_threshold: f64,
    controller: Controller,
    completed: usize,
    tokens_emitted: usize,
    thresholds: Vec<ThresholdRecord>,
    iteration_stats: Vec<IterationStats>,
}

impl Engine {
    /// `trace` must be time-ordered with lengths inside the engine limit.
    pub fn new(cfg: &SimConfig, layer: MoeLayer, trace: Vec<Request>) -> Result<Self, SimError> {
        cfg.validate()?;
        validate_trace(&trace, cfg.engine.max_seq_len)?;
        if layer.group_size != cfg.brownout.way {
            return Err(SimError::Config(format!(
                "layer group size {} does not match brownout.way {}",
                layer.group_size, cfg.brownout.way
            )));
        }
        let initial_threshold = match cfg.controller {
            ControllerMode::Off => cfg.brownout.initial_threshold,
            ControllerMode::Static { threshold } => threshold,
            ControllerMode::Salc { .. } => cfg.brownout.initial_threshold,
        };
        let controller = match cfg.controller {
            ControllerMode::Off | ControllerMode::Static { .. } => Controller::Fixed,
            ControllerMode::Salc { prefill, decode } => {
                let prefill = prefill.to_params(cfg.engine.prefill_slo_s);
                let decode = decode.to_params(cfg.engine.decode_slo_s);
                let prefill_window = LatencyWindow::new(prefill.window_s);
                let decode_window = LatencyWindow::new(decode.window_s);
                Controller::Salc { prefill, decode, prefill_window, decode_window }
            }
        };
        Ok(Self {
            cost: cfg.cost,
            layers: cfg.engine.layers,
            max_batch_size: cfg.engine.max_batch_size,
            seed: cfg.engine.seed,
            way: cfg.brownout.way,
            use_full_brownout: cfg.brownout.use_full_brownout,
            layer,
            prefill_slo_s: cfg.engine.prefill_slo_s,
            decode_slo_s: cfg.engine.decode_slo_s,
            trace,
            next_arrival: 0,
            waiting: VecDeque::new(),
            running: Vec::new(),
            clock: 0.0,
            prefill_threshold: initial_threshold,
            decode_threshold: initial_threshold,
            controller,
            completed: 0,
            tokens_emitted: 0,
            thresholds: Vec::new(),
            iteration_stats: Vec::new(),
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Current (prefill, decode) thresholds.
    pub fn thresholds_now(&self) -> (f64, f64) {
        (self.prefill_threshold, self.decode_threshold)
    }

    pub fn is_done(&self) -> bool {
        self.next_arrival == self.trace.len()
            && self.waiting.is_empty()
            && self.running.is_empty()
    }

    fn ingest_arrivals(&mut self) {
        while let Some(req) = self.trace.get(self.next_arrival) {
            if req.arrival_time <= self.clock {
                self.waiting.push_back(req.clone());
                self.next_arrival += 1;
            } else {
                break;
            }
        }
    }

    fn admit(&mut self) {
        while self.running.len() < self.max_batch_size {
            match self.waiting.pop_front() {
                Some(req) => self.running.push(ActiveRequest {
                    id: req.id,
                    arrival_time: req.arrival_time,
                    input_len: req.input_len,
                    output_len: req.output_len,
                    emitted: 0,
                    last_emit_s: req.arrival_time,
                }),
                None => break,
            }
        }
    }

    /// Runs one batched iteration: admits waiting requests (FCFS), prefills
    /// newly admitted ones and decodes one token for the rest, advances the
    /// clock by the modeled iteration latency, emits one record per active
    /// request, retires finished requests, and lets the controller react.
    /// On a drained engine this is a no-op returning no records.
    pub fn step(&mut self) -> Result<Vec<TokenLatencyRecord>, SimError> {
        self.ingest_arrivals();
        self.admit();
        if self.running.is_empty() {
            // Idle: jump to the next arrival if there is one.
            if let Some(req) = self.trace.get(self.next_arrival) {
                self.clock = self.clock.max(req.arrival_time);
                self.ingest_arrivals();
                self.admit();
            }
        }
        if self.running.is_empty() {
            return Ok(Vec::new());
        }

        // Assemble per-stage token streams. Prefill covers the full prompt of
        // newly admitted requests; every other running request decodes one
        // token, fed by its most recently emitted token.
        let d = self.layer.d;
        let mut prefill_tokens: Vec<HiddenVector> = Vec::new();
        let mut decode_tokens: Vec<HiddenVector> = Vec::new();
        for req in &self.running {
            if req.emitted == 0 {
                for pos in 0..req.input_len {
                    prefill_tokens.push(synth_token(self.seed, req.id, pos as u64, d));
                }
            } else {
                let pos = (req.input_len + req.emitted - 1) as u64;
                decode_tokens.push(synth_token(self.seed, req.id, pos, d));
            }
        }
        let n_prefill = prefill_tokens.len();
        let n_decode = decode_tokens.len();
        let batch_tokens = n_prefill + n_decode;
        let thresholds_used = [self.prefill_threshold, self.decode_threshold];

        // Per layer: gate each stage's tokens, plan brownout at that stage's
        // threshold, run the forward pass, and merge the two plans' stats
        // (executor sets union — an expert launched for both stages is
        // launched once). Layer l+1 consumes layer l's outputs.
        let m = self.layer.num_experts();
        let mut stage_tokens = [prefill_tokens, decode_tokens];
        let mut merged_stats: Vec<PlanStats> = Vec::with_capacity(self.layers);
        let mut zero_brownout_stats: Vec<PlanStats> = Vec::with_capacity(self.layers);
        for _ in 0..self.layers {
            let mut executors: BTreeSet<GroupExecutor> = BTreeSet::new();
            let mut via_originals = 0usize;
            let mut via_united = 0usize;
            let mut dropped = 0usize;
            let mut active_experts: BTreeSet<usize> = BTreeSet::new();
            let mut total_pairs = 0usize;
            for (si, tokens) in stage_tokens.iter_mut().enumerate() {
                if tokens.is_empty() {
                    continue;
                }
                let batch = TokenBatch::gate(&self.layer, std::mem::take(tokens))?;
                let assignments = batch_assignments(&batch, m);
                for a in &assignments {
                    if a.token_count > 0 {
                        active_experts.insert(a.expert_id);
                        total_pairs += a.token_count;
                    }
                }
                let plan = plan_brownout(
                    &assignments,
                    &BrownoutConfig {
                        way: self.way,
                        threshold: thresholds_used[si],
                        use_full_brownout: self.use_full_brownout,
                    },
                )?;
                let stats = plan_stats(&plan);
                via_originals += stats.tokens_via_originals;
                via_united += stats.tokens_via_united;
                dropped += stats.tokens_dropped;
                for a in &plan.s1 {
                    executors.insert(GroupExecutor::Original(a.expert_id));
                }
                for g in &plan.s2_groups {
                    executors.insert(g.executor);
                }
                *tokens = moe_forward(&self.layer, &batch, &plan)?;
            }
            merged_stats.push(PlanStats {
                experts_accessed: executors.len(),
                tokens_via_originals: via_originals,
                tokens_via_united: via_united,
                tokens_dropped: dropped,
                access_fraction: executors.len() as f64 / m as f64,
            });
            zero_brownout_stats.push(PlanStats {
                experts_accessed: active_experts.len(),
                tokens_via_originals: total_pairs,
                tokens_via_united: 0,
                tokens_dropped: 0,
                access_fraction: active_experts.len() as f64 / m as f64,
            });
        }

        let latency = iteration_latency(&self.cost, batch_tokens, &merged_stats);
        let moe_latency: f64 = merged_stats
            .iter()
            .map(|s| layer_moe_cost(&self.cost, s))
            .sum();
        let zero_brownout_moe_latency: f64 = zero_brownout_stats
            .iter()
            .map(|s| layer_moe_cost(&self.cost, s))
            .sum();
        self.clock += latency;

        // Emit one token per active request: token 0 (TTFT, measured from
        // arrival — queue wait included) for the newly prefilled, the next
        // decode token (inter-token gap) for the rest.
        let mut records = Vec::with_capacity(self.running.len());
        for req in &mut self.running {
            let record = if req.emitted == 0 {
                TokenLatencyRecord {
                    stage: Stage::Prefill,
                    request_id: req.id,
                    token_index: 0,
                    emit_time_s: self.clock,
                    latency_s: self.clock - req.arrival_time,
                    threshold_at_emit: thresholds_used[0],
                }
            } else {
                TokenLatencyRecord {
                    stage: Stage::Decode,
                    request_id: req.id,
                    token_index: req.emitted,
                    emit_time_s: self.clock,
                    latency_s: self.clock - req.last_emit_s,
                    threshold_at_emit: thresholds_used[1],
                }
            };
            req.emitted += 1;
            req.last_emit_s = self.clock;
            records.push(record);
        }
        self.tokens_emitted += records.len();

        let before = self.running.len();
        self.running.retain(|r| r.emitted < r.output_len);
        self.completed += before - self.running.len();

        // Controller pass: feed this iteration's records to the stage
        // windows, then update each stage threshold once.
        if let Controller::Salc { prefill, decode, prefill_window, decode_window } =
            &mut self.controller
        {
            for r in &records {
                match r.stage {
                    Stage::Prefill => prefill_window.record_latency(self.clock, r.latency_s)?,
                    Stage::Decode => decode_window.record_latency(self.clock, r.latency_s)?,
                }
            }
            self.prefill_threshold =
                salc_update(self.prefill_threshold, prefill, prefill_window, self.clock);
            self.decode_threshold =
                salc_update(self.decode_threshold, decode, decode_window, self.clock);
        }
        self.thresholds.push(ThresholdRecord {
            time_s: self.clock,
            stage: Stage::Prefill,
            threshold: self.prefill_threshold,
        });
        self.thresholds.push(ThresholdRecord {
            time_s: self.clock,
            stage: Stage::Decode,
            threshold: self.decode_threshold,
        });
        self.iteration_stats.push(IterationStats {
            index: self.iteration_stats.len(),
            end_time_s: self.clock,
            batch_tokens,
            prefill_tokens: n_prefill,
            decode_tokens: n_decode,
            latency_s: latency,
            moe_latency_s: moe_latency,
            zero_brownout_moe_latency_s: zero_brownout_moe_latency,
        });
        Ok(records)
    }

    fn finish(self, records: Vec<TokenLatencyRecord>) -> SimOutput {
        let unfinished =
            self.trace.len() - self.completed;
        let report = build_report(
            &records,
            &self.thresholds,
            self.clock,
            self.iteration_stats.len(),
            self.completed,
            unfinished,
            self.tokens_emitted,
            self.prefill_slo_s,
            self.decode_slo_s,
        );
        SimOutput {
            report,
            records,
            thresholds: self.thresholds,
            iterations: self.iteration_stats,
        }
    }
}

/// Deterministic per-(request, position) token features.
fn synth_token(seed: u64, request_id: u64, position: u64, d: usize) -> HiddenVector {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&request_id.to_le_bytes());
    key[16..24].copy_from_slice(&position.to_le_bytes());
    key[24..32].copy_from_slice(&0x746f_6b65_6e76_6563u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn validate_trace(trace: &[Request], max_seq_len: usize) -> Result<(), SimError> {
    for (i, req) in trace.iter().enumerate() {
        if !(req.arrival_time.is_finite() && req.arrival_time >= 0.0) {
            return Err(SimError::Trace(format!(
                "request {} arrival {} must be nonnegative",
                req.id, req.arrival_time
            )));
        }
        if req.input_len == 0 || req.output_len == 0 {
            return Err(SimError::Trace(format!(
                "request {} needs at least one input and one output token",
                req.id
            )));
        }
        if req.input_len + req.output_len > max_seq_len {
            return Err(SimError::Trace(format!(
                "request {} length {}+{} exceeds max_seq_len {}",
                req.id, req.input_len, req.output_len, max_seq_len
            )));
        }
        if i > 0 && req.arrival_time < trace[i - 1].arrival_time {
            return Err(SimError::Trace(format!(
                "trace not time-ordered at request {}",
                req.id
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    records: &[TokenLatencyRecord],
    thresholds: &[ThresholdRecord],
    duration_s: f64,
    iterations: usize,
    completed: usize,
    unfinished: usize,
    tokens_emitted: usize,
    prefill_slo_s: f64,
    decode_slo_s: f64,
) -> SimReport {
    let throughput = if duration_s > 0.0 {
        tokens_emitted as f64 / duration_s
    } else {
        0.0
    };
    SimReport {
        duration_s,
        iterations,
        requests_completed: completed,
        requests_unfinished: unfinished,
        tokens_emitted,
        throughput_tokens_per_s: throughput,
        prefill: stage_summary(records, thresholds, Stage::Prefill, prefill_slo_s),
        decode: stage_summary(records, thresholds, Stage::Decode, decode_slo_s),
    }
}

fn stage_summary(
    records: &[TokenLatencyRecord],
    thresholds: &[ThresholdRecord],
    stage: Stage,
    slo_s: f64,
) -> StageSummary {
    let mut latencies: Vec<f64> = records
        .iter()
        .filter(|r| r.stage == stage)
        .map(|r| r.latency_s)
        .collect();
    latencies.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let mut threshold_sum = 0.0;
    let mut threshold_count = 0usize;
    for t in thresholds {
        if t.stage == stage {
            threshold_sum += t.threshold;
            threshold_count += 1;
        }
    }
    StageSummary {
        tokens: latencies.len(),
        p50_s: percentile_nearest_rank(&latencies, 50),
        p90_s: percentile_nearest_rank(&latencies, 90),
        p99_s: percentile_nearest_rank(&latencies, 99),
        violation_rate: stage_violation_rate(records, stage, slo_s),
        mean_threshold: if threshold_count > 0 {
            Some(threshold_sum / threshold_count as f64)
        } else {
            None
        },
    }
}

/// Runs a trace to completion (or to `engine.horizon_s` if set).
/// Deterministic: the same trace and config produce identical output.
pub fn run_simulation(trace: &[Request], cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let layer = cfg.build_layer()?;
    let mut engine = Engine::new(cfg, layer, trace.to_vec())?;
    let mut records = Vec::new();
    while !engine.is_done() {
        if let Some(h) = cfg.engine.horizon_s {
            if engine.clock() >= h {
                break;
            }
        }
        let step_records = engine.step()?;
        records.extend(step_records);
    }
    Ok(engine.finish(records))
}

/// Writes token latency records; the header is present even with no rows.
pub fn write_records_csv(path: &Path, records: &[TokenLatencyRecord]) -> Result<(), SimError> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| SimError::Csv(e.to_string()))?;
    writer
        .write_record(RECORDS_HEADER)
        .map_err(|e| SimError::Csv(e.to_string()))?;
    for r in records {
        writer.serialize(r).map_err(|e| SimError::Csv(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the per-iteration threshold trace; header always present.
pub fn write_thresholds_csv(path: &Path, rows: &[ThresholdRecord]) -> Result<(), SimError> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| SimError::Csv(e.to_string()))?;
    writer
        .write_record(["time_s", "stage", "threshold"])
        .map_err(|e| SimError::Csv(e.to_string()))?;
    for r in rows {
        writer.serialize(r).map_err(|e| SimError::Csv(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// A row the lenient records reader could not parse.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordIssue {
    pub line: u64,
    pub message: String,
}

const RECORDS_HEADER: [&str; 6] = [
    "stage",
    "request_id",
    "token_index",
    "emit_time_s",
    "latency_s",
    "threshold_at_emit",
];

/// Reads a records CSV leniently: well-formed rows are returned, malformed
/// rows are reported with their line numbers so callers can warn and move on.
pub fn read_records_csv(path: &Path) -> Result<(Vec<TokenLatencyRecord>, Vec<RecordIssue>), SimError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| SimError::Csv(e.to_string()))?;
    let header = reader.headers().map_err(|e| SimError::Csv(e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    // A zero-byte file has no header at all; read it as "no records" rather
    // than as a malformed one.
    if got.is_empty() || got == [""] {
        return Ok((Vec::new(), Vec::new()));
    }
    if got != RECORDS_HEADER {
        return Err(SimError::Csv(format!(
            "unexpected header {got:?}; expected {RECORDS_HEADER:?}"
        )));
    }
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                issues.push(RecordIssue { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_record_row(&row) {
            Ok(rec) => records.push(rec),
            Err(message) => issues.push(RecordIssue { line, message }),
        }
    }
    Ok((records, issues))
}

fn parse_record_row(row: &csv::StringRecord) -> Result<TokenLatencyRecord, String> {
    if row.len() != RECORDS_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            RECORDS_HEADER.len(),
            row.len()
        ));
    }
    let stage: Stage = row[0].parse()?;
    let request_id: u64 = row[1]
        .parse()
        .map_err(|_| format!("bad request_id {:?}", &row[1]))?;
    let token_index: usize = row[2]
        .parse()
        .map_err(|_| format!("bad token_index {:?}", &row[2]))?;
    let emit_time_s: f64 = row[3]
        .parse()
        .map_err(|_| format!("bad emit_time_s {:?}", &row[3]))?;
    let latency_s: f64 = row[4]
        .parse()
        .map_err(|_| format!("bad latency_s {:?}", &row[4]))?;
    let threshold_at_emit: f64 = row[5]
        .parse()
        .map_err(|_| format!("bad threshold_at_emit {:?}", &row[5]))?;
    if !emit_time_s.is_finite() || !latency_s.is_finite() || latency_s < 0.0 {
        return Err(format!(
            "non-finite or negative timing ({emit_time_s}, {latency_s})"
        ));
    }
    Ok(TokenLatencyRecord {
        stage,
        request_id,
        token_index,
        emit_time_s,
        latency_s,
        threshold_at_emit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::md1_response_time;

    fn zeroed_stats(accessed: usize, via_originals: usize, via_united: usize) -> PlanStats {
        PlanStats {
            experts_accessed: accessed,
            tokens_via_originals: via_originals,
            tokens_via_united: via_united,
            tokens_dropped: 0,
            access_fraction: 0.0,
        }
    }

    #[test]
    fn iteration_latency_matches_hand_computation() {
        let cost = CostModel {
            iteration_overhead_s: 0.0,
            attn_per_token_s: 0.0,
            moe_fixed_s: 0.0,
            expert_access_cost_s: 1e-3,
            per_token_compute_s: 1e-4,
        };
        let full = zeroed_stats(8, 20, 0);
        assert!((iteration_latency(&cost, 10, &[full]) - 0.010).abs() < 1e-15);
        let partial = zeroed_stats(5, 12, 8);
        assert!((iteration_latency(&cost, 10, &[partial]) - 0.007).abs() < 1e-15);

        let zero = CostModel {
            iteration_overhead_s: 0.0,
            attn_per_token_s: 0.0,
            moe_fixed_s: 0.0,
            expert_access_cost_s: 0.0,
            per_token_compute_s: 0.0,
        };
        assert_eq!(iteration_latency(&zero, 99, &[full, partial]), 0.0);
    }

    #[test]
    fn iteration_latency_ignores_dropped_pairs() {
        let cost = CostModel {
            iteration_overhead_s: 0.0,
            attn_per_token_s: 0.0,
            moe_fixed_s: 0.0,
            expert_access_cost_s: 0.0,
            per_token_compute_s: 1e-3,
        };
        let mut stats = zeroed_stats(3, 12, 0);
        stats.tokens_dropped = 8;
        assert!((iteration_latency(&cost, 20, &[stats]) - 0.012).abs() < 1e-15);
    }

    fn small_config() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.engine.max_batch_size = 4;
        cfg.engine.max_seq_len = 128;
        cfg.engine.layers = 1;
        cfg.engine.seed = 5;
        cfg.model = ModelConfig {
            d: 4,
            h: 4,
            num_experts: 4,
            top_k: 2,
            n_shared: 0,
            activation: Activation::Relu,
            layer_file: None,
        };
        cfg.brownout = SimBrownoutConfig {
            way: 2,
            use_full_brownout: false,
            initial_threshold: 1.0,
        };
        cfg.cost = CostModel {
            iteration_overhead_s: 1e-3,
            attn_per_token_s: 1e-4,
            moe_fixed_s: 2e-3,
            expert_access_cost_s: 1e-3,
            per_token_compute_s: 1e-4,
        };
        cfg.controller = ControllerMode::Off;
        cfg
    }

    fn req(id: u64, at: f64, input: usize, output: usize) -> Request {
        Request { id, arrival_time: at, input_len: input, output_len: output }
    }

    #[test]
    fn single_request_ttft_follows_cost_model_directly() {
        let cfg = small_config();
        let trace = vec![req(0, 0.0, 3, 2)];
        let out = run_simulation(&trace, &cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.iterations.len(), 2);

        let ttft = &out.records[0];
        assert_eq!(ttft.stage, Stage::Prefill);
        assert_eq!(ttft.token_index, 0);
        let it0 = &out.iterations[0];
        assert_eq!(it0.batch_tokens, 3);
        // Arrival at t=0, so TTFT is exactly the first iteration's latency.
        assert_eq!(ttft.latency_s, it0.latency_s);
        let expected = cfg.cost.iteration_overhead_s
            + 3.0 * cfg.cost.attn_per_token_s
            + it0.moe_latency_s;
        assert!((it0.latency_s - expected).abs() < 1e-15);

        let tpot = &out.records[1];
        assert_eq!(tpot.stage, Stage::Decode);
        assert_eq!(tpot.token_index, 1);
        // Inter-token time is a clock difference, so compare up to rounding.
        assert!((tpot.latency_s - out.iterations[1].latency_s).abs() < 1e-12);

        assert_eq!(out.report.requests_completed, 1);
        assert_eq!(out.report.tokens_emitted, 2);
        let dur = out.iterations[0].latency_s + out.iterations[1].latency_s;
        assert!((out.report.duration_s - dur).abs() < 1e-15);
    }

    #[test]
    fn fcfs_with_batch_cap_one_serializes_requests() {
        let mut cfg = small_config();
        cfg.engine.max_batch_size = 1;
        let trace = vec![req(0, 0.0, 2, 2), req(1, 0.0, 2, 2)];
        let out = run_simulation(&trace, &cfg).unwrap();
        assert_eq!(out.records.len(), 4);
        let order: Vec<(Stage, u64)> = out.records.iter().map(|r| (r.stage, r.request_id)).collect();
        assert_eq!(
            order,
            vec![
                (Stage::Prefill, 0),
                (Stage::Decode, 0),
                (Stage::Prefill, 1),
                (Stage::Decode, 1),
            ]
        );
        // The second request's TTFT covers the first's full service plus its
        // own prefill iteration.
        let first_three: f64 = out.iterations[..3].iter().map(|i| i.latency_s).sum();
        assert!((out.records[2].latency_s - first_three).abs() < 1e-12);
    }

    #[test]
    fn tokens_are_conserved_when_everything_completes() {
        let cfg = small_config();
        let trace = vec![
            req(0, 0.0, 3, 4),
            req(1, 0.1, 2, 3),
            req(2, 0.2, 5, 2),
            req(3, 5.0, 1, 6),
        ];
        let out = run_simulation(&trace, &cfg).unwrap();
        let expected: usize = trace.iter().map(|r| r.output_len).sum();
        assert_eq!(out.report.tokens_emitted, expected);
        assert_eq!(out.records.len(), expected);
        assert_eq!(out.report.requests_completed, 4);
        assert_eq!(out.report.requests_unfinished, 0);
        let prefills = out.records.iter().filter(|r| r.stage == Stage::Prefill).count();
        assert_eq!(prefills, 4);
    }

    #[test]
    fn empty_trace_produces_zero_report() {
        let cfg = small_config();
        let out = run_simulation(&[], &cfg).unwrap();
        assert_eq!(out.report.duration_s, 0.0);
        assert_eq!(out.report.tokens_emitted, 0);
        assert_eq!(out.report.throughput_tokens_per_s, 0.0);
        assert_eq!(out.report.prefill.p90_s, None);
        assert_eq!(out.report.decode.p99_s, None);
        assert!(out.records.is_empty());
    }

    #[test]
    fn drained_engine_step_is_a_no_op() {
        let cfg = small_config();
        let layer = cfg.build_layer().unwrap();
        let mut engine = Engine::new(&cfg, layer, vec![]).unwrap();
        let records = engine.step().unwrap();
        assert!(records.is_empty());
        assert_eq!(engine.clock(), 0.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let mut cfg = small_config();
        cfg.controller = ControllerMode::Salc {
            prefill: SalcTuning::default(),
            decode: SalcTuning::default(),
        };
        let trace = vec![
            req(0, 0.0, 3, 5),
            req(1, 0.05, 4, 6),
            req(2, 0.6, 2, 4),
            req(3, 0.9, 6, 3),
            req(4, 1.4, 3, 7),
        ];
        let a = run_simulation(&trace, &cfg).unwrap();
        let b = run_simulation(&trace, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.thresholds, b.thresholds);
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }

    #[test]
    fn lower_threshold_never_costs_more_per_iteration() {
        let mut cfg = small_config();
        cfg.controller = ControllerMode::Static { threshold: 0.4 };
        let trace: Vec<Request> = (0..12)
            .map(|i| req(i, 0.08 * i as f64, 3, 8))
            .collect();
        let low = run_simulation(&trace, &cfg).unwrap();
        for it in &low.iterations {
            assert!(
                it.moe_latency_s <= it.zero_brownout_moe_latency_s + 1e-15,
                "iteration {} browned-out cost {} exceeds zero-brownout {}",
                it.index,
                it.moe_latency_s,
                it.zero_brownout_moe_latency_s
            );
        }
        cfg.controller = ControllerMode::Static { threshold: 1.0 };
        let high = run_simulation(&trace, &cfg).unwrap();
        assert!(
            low.report.throughput_tokens_per_s >= high.report.throughput_tokens_per_s - 1e-12,
            "throughput {} at threshold 0.4 vs {} at 1.0",
            low.report.throughput_tokens_per_s,
            high.report.throughput_tokens_per_s
        );
    }

    #[test]
    fn overloaded_salc_run_shrinks_decode_threshold() {
        let mut cfg = small_config();
        // Make every iteration blow the decode SLO so the controller must
        // shrink, whatever the batch composition.
        cfg.cost.iteration_overhead_s = 0.3;
        cfg.engine.decode_slo_s = 0.15;
        cfg.controller = ControllerMode::Salc {
            prefill: SalcTuning::default(),
            decode: SalcTuning { window_s: 1.0, ..SalcTuning::default() },
        };
        let trace: Vec<Request> = (0..6).map(|i| req(i, 0.0, 2, 10)).collect();
        let out = run_simulation(&trace, &cfg).unwrap();
        let final_decode = out
            .thresholds
            .iter()
            .rev()
            .find(|t| t.stage == Stage::Decode)
            .unwrap();
        assert!(
            final_decode.threshold < 1.0,
            "decode threshold never shrank: {}",
            final_decode.threshold
        );
        assert!(out.report.decode.mean_threshold.unwrap() < 1.0);
        assert!(out.report.decode.violation_rate > 0.5);
    }

    #[test]
    fn horizon_cuts_the_run_short() {
        let mut cfg = small_config();
        cfg.engine.horizon_s = Some(0.05);
        let trace: Vec<Request> = (0..10).map(|i| req(i, 0.0, 4, 50)).collect();
        let out = run_simulation(&trace, &cfg).unwrap();
        assert!(out.report.requests_unfinished > 0);
        // The loop stops at the first iteration boundary past the horizon.
        let max_iter = out.iterations.iter().map(|i| i.latency_s).fold(0.0, f64::max);
        assert!(out.report.duration_s < 0.05 + max_iter + 1e-12);
    }

    #[test]
    fn trace_validation_rejects_bad_inputs() {
        let cfg = small_config();
        let unsorted = vec![req(0, 1.0, 2, 2), req(1, 0.5, 2, 2)];
        assert!(matches!(
            run_simulation(&unsorted, &cfg),
            Err(SimError::Trace(_))
        ));
        let too_long = vec![req(0, 0.0, 100, 100)];
        assert!(matches!(
            run_simulation(&too_long, &cfg),
            Err(SimError::Trace(_))
        ));
        let empty_output = vec![req(0, 0.0, 4, 0)];
        assert!(matches!(
            run_simulation(&empty_output, &cfg),
            Err(SimError::Trace(_))
        ));
    }

    #[test]
    fn config_json_round_trips_and_fills_defaults() {
        let text = r#"{
            "engine": { "max_batch_size": 16, "seed": 42 },
            "controller": { "mode": "salc", "decode": { "window_s": 0.5 } },
            "brownout": { "way": 8, "initial_threshold": 1.0 }
        }"#;
        let cfg = SimConfig::from_json(text).unwrap();
        assert_eq!(cfg.engine.max_batch_size, 16);
        assert_eq!(cfg.engine.max_seq_len, 2048);
        assert_eq!(cfg.engine.prefill_slo_s, 0.25);
        match cfg.controller {
            ControllerMode::Salc { prefill, decode } => {
                assert_eq!(prefill.warning_factor, 0.8);
                assert_eq!(decode.window_s, 0.5);
            }
            other => panic!("unexpected controller {other:?}"),
        }
        let back = SimConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = small_config();
        cfg.engine.max_batch_size = 0;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));

        let mut cfg = small_config();
        cfg.cost.expert_access_cost_s = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        cfg.brownout.initial_threshold = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        cfg.controller = ControllerMode::Static { threshold: -0.2 };
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        cfg.controller = ControllerMode::Salc {
            prefill: SalcTuning { warning_factor: 1.2, ..SalcTuning::default() },
            decode: SalcTuning::default(),
        };
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        cfg.model.top_k = 9;
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        cfg.workload.segments = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn records_csv_round_trips_and_reports_bad_lines() {
        let cfg = small_config();
        let trace = vec![req(0, 0.0, 3, 3), req(1, 0.2, 2, 4)];
        let out = run_simulation(&trace, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        write_records_csv(&path, &out.records).unwrap();
        let (rows, issues) = read_records_csv(&path).unwrap();
        assert!(issues.is_empty(), "unexpected issues: {issues:?}");
        assert_eq!(rows, out.records);

        // Corrupt one line; the rest must still parse, and the issue must
        // name the right line.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let corrupted = "decode,7,not_a_number,1.0,0.1,0.5";
        lines[2] = corrupted;
        let joined = lines.join("\n");
        std::fs::write(&path, joined).unwrap();
        let (rows, issues) = read_records_csv(&path).unwrap();
        assert_eq!(rows.len(), out.records.len() - 1);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 3);

        // A wrong header is a hard error, not an issue list.
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(read_records_csv(&path), Err(SimError::Csv(_))));
    }

    #[test]
    fn thresholds_csv_has_rows_for_both_stages() {
        let cfg = small_config();
        let trace = vec![req(0, 0.0, 2, 3)];
        let out = run_simulation(&trace, &cfg).unwrap();
        assert_eq!(out.thresholds.len(), 2 * out.iterations.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thresholds.csv");
        write_thresholds_csv(&path, &out.thresholds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("time_s,stage,threshold"));
        assert!(text.contains("prefill"));
        assert!(text.contains("decode"));
    }

    #[test]
    fn violation_rates_count_strict_exceedance() {
        let mk = |stage: Stage, latency: f64| TokenLatencyRecord {
            stage,
            request_id: 0,
            token_index: 0,
            emit_time_s: 0.0,
            latency_s: latency,
            threshold_at_emit: 1.0,
        };
        let records = vec![
            mk(Stage::Prefill, 0.30),
            mk(Stage::Prefill, 0.25),
            mk(Stage::Decode, 0.10),
            mk(Stage::Decode, 0.20),
            mk(Stage::Decode, 0.15),
        ];
        let rates = violation_rate(&records, 0.25, 0.15);
        assert!((rates.prefill - 0.5).abs() < 1e-15);
        assert!((rates.decode - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(violation_rate(&[], 0.25, 0.15).prefill, 0.0);
    }

    /// With batch cap 1 and token-count-only costs, every request has the
    /// same deterministic service time, so the engine IS an M/D/1 queue and
    /// its mean response time must match the closed form.
    #[test]
    fn batch_of_one_reproduces_md1_response_time() {
        let mut cfg = small_config();
        cfg.engine.max_batch_size = 1;
        // Expert-count-dependent costs off so service time is constant.
        cfg.cost = CostModel {
            iteration_overhead_s: 1e-3,
            attn_per_token_s: 1e-3,
            moe_fixed_s: 1e-3,
            expert_access_cost_s: 0.0,
            per_token_compute_s: 0.0,
        };
        let layers = 1.0;
        let input_len = 4usize;
        let output_len = 5usize;
        let prefill_iter = 1e-3 + input_len as f64 * 1e-3 + layers * 1e-3;
        let decode_iter = 1e-3 + 1e-3 + layers * 1e-3;
        let tau = prefill_iter + (output_len - 1) as f64 * decode_iter;

        let lambda = 0.5 / tau; // utilization 0.5
        let horizon = 18_000.0 * tau / 0.5; // ~18k arrivals
        let schedule = RateSchedule::new(vec![RateSegment {
            start_s: 0.0,
            end_s: horizon,
            rps: lambda,
        }])
        .unwrap();
        let trace = generate_trace(
            &schedule,
            &LengthDistribution::Constant { value: input_len },
            &LengthDistribution::Constant { value: output_len },
            cfg.engine.max_seq_len,
            91,
        )
        .unwrap();
        assert!(trace.len() > 10_000);

        let out = run_simulation(&trace, &cfg).unwrap();
        assert_eq!(out.report.requests_unfinished, 0);

        // Response time per request: last emit minus arrival.
        let mut last_emit: std::collections::BTreeMap<u64, f64> = std::collections::BTreeMap::new();
        for r in &out.records {
            let e = last_emit.entry(r.request_id).or_insert(0.0);
            if r.emit_time_s > *e {
                *e = r.emit_time_s;
            }
        }
        let mean_response: f64 = trace
            .iter()
            .map(|r| last_emit[&r.id] - r.arrival_time)
            .sum::<f64>()
            / trace.len() as f64;

        let analytic = md1_response_time(lambda, tau).unwrap();
        let rel = (mean_response - analytic).abs() / analytic;
        assert!(
            rel < 0.05,
            "mean response {mean_response:.5} vs analytic {analytic:.5} (rel {rel:.4})"
        );
    }
}
