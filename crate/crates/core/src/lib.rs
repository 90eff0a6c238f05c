//! Desk-scale simulation library for SLO-aware Mixture-of-Experts serving.
//!
//! The crate models an MoE inference engine that can *degrade gracefully*
//! under load: instead of routing every token to its top-K experts, the
//! router keeps only enough "hot" experts to cover a configurable fraction
//! of the routed token mass and delegates the long tail either to merged
//! ("united") experts distilled from groups of originals, or drops it
//! entirely. A feedback controller watches recent tail latency and moves the
//! coverage threshold to keep the engine inside its latency SLOs.
//!
//! Module map:
//!
//! - [`moe`] — toy MoE layer: expert FFNs, gating, forward pass.
//! - [`brownout`] — coverage-threshold routing plans over gated batches.
//! - [`distill`] — trains united experts to mimic groups of originals.
//! - [`salc`] — windowed-P90 threshold controller (one per serving stage).
//! - [`queueing`] — M/D/1 and speedup closed forms plus a queue simulator.
//! - [`workload`] — seeded bursty request traces with length distributions.
//! - [`sim`] — discrete-time continuous-batching serving simulator.
//!
//! Everything is deterministic given explicit seeds, CPU-only, and sized so
//! whole experiments run in seconds.

pub mod brownout;
pub mod distill;
pub mod moe;
pub mod queueing;
pub mod salc;
pub mod sim;
pub mod workload;

pub use brownout::{
    batch_assignments, minimal_cover_oracle, plan_brownout, plan_stats, BrownoutConfig,
    BrownoutError, ExpertAssignment, GroupExecutor, PlanStats, RoutingPlan, S2Group,
};
pub use distill::{
    distill_group, distill_layer, group_loss, group_loss_gradient, group_loss_lower_bound,
    synthetic_tokens, DistillConfig, DistillError, DistillReport,
};
pub use moe::{
    expert_forward, gate_scores, gate_weights, moe_forward, standard_moe_forward, Activation,
    ExpertFfn, GateUnit, HiddenVector, MoeError, MoeLayer, TokenBatch, TokenRoute,
};
pub use queueing::{amdahl_speedup, md1_response_time, simulate_md1, QueueError};
pub use salc::{
    percentile_nearest_rank, salc_update, LatencyWindow, SalcError, SalcParams, SalcState, Stage,
};
pub use sim::{
    iteration_latency, read_records_csv, run_simulation, stage_violation_rate, violation_rate,
    write_records_csv, write_thresholds_csv, ControllerMode, CostModel, Engine, EngineConfig,
    IterationStats, ModelConfig, RecordIssue, SalcTuning, SimBrownoutConfig, SimConfig, SimError,
    SimOutput, SimReport, StageSummary, ThresholdRecord, TokenLatencyRecord, ViolationRates,
    WorkloadConfig,
};
pub use workload::{
    alpaca_like, empirical_from_file, generate_trace, read_trace_csv, sharegpt_like,
    write_trace_csv, LengthDistribution, RateSchedule, RateSegment, Request, WorkloadError,
};
