//! Coverage-threshold ("brownout") routing plans.
//!
//! Given per-expert routed token counts for one batch, the planner keeps the
//! smallest set of busiest experts whose combined count reaches a coverage
//! target `T = S * threshold` (S = total routed pairs). Those experts run as
//! usual. Every other busy expert is either delegated to its group's united
//! expert (partial brownout) or dropped outright (full brownout). A group
//! whose delegated set is a single expert skips the united expert and runs
//! the original — merging one expert with itself would only lose accuracy.
//!
//! Counts here are (token, expert) assignment pairs: with top-K gating a
//! token contributes K pairs, each following its own expert's fate.

use serde::{Deserialize, Serialize};

use crate::moe::TokenBatch;

/// Comparisons against the real-valued coverage target tolerate this much
/// rounding slack so integer counts that exactly meet the target always pass.
const COVERAGE_EPS: f64 = 1e-9;

/// Largest expert count [`minimal_cover_oracle`] will search exhaustively.
pub const ORACLE_MAX_EXPERTS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum BrownoutError {
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("group way must be at least 1")]
    InvalidWay,
    #[error("invalid expert assignments: {0}")]
    InvalidAssignments(String),
    #[error("oracle limited to {max} experts, got {m}")]
    OracleTooLarge { m: usize, max: usize },
    #[error("cover target {target} outside [0, {total}]")]
    TargetOutOfRange { target: f64, total: f64 },
}

/// Routed pairs for one expert in one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAssignment {
    pub expert_id: usize,
    pub token_count: usize,
    pub token_indices: Vec<usize>,
}

impl ExpertAssignment {
    pub fn new(expert_id: usize, token_indices: Vec<usize>) -> Self {
        Self {
            expert_id,
            token_count: token_indices.len(),
            token_indices,
        }
    }
}

/// Planner knobs: united-group width, coverage threshold, and whether the
/// uncovered tail is dropped (full brownout) instead of delegated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrownoutConfig {
    pub way: usize,
    pub threshold: f64,
    #[serde(default)]
    pub use_full_brownout: bool,
}

/// Who actually runs a delegated group's tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupExecutor {
    /// The united expert with this bank index.
    United(usize),
    /// A singleton group falls back to its original expert.
    Original(usize),
}

/// Delegated experts sharing one united group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct S2Group {
    pub group_id: usize,
    pub executor: GroupExecutor,
    pub members: Vec<ExpertAssignment>,
    /// Member token lists concatenated in member order.
    pub merged_token_indices: Vec<usize>,
}

/// Output of [`plan_brownout`]: covered experts, delegated groups, dropped
/// experts, plus the batch geometry the plan was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub num_experts: usize,
    /// Real-valued pair-coverage target `S * threshold`.
    pub coverage_target: f64,
    /// Covered experts in planning order (count descending, id ascending).
    pub s1: Vec<ExpertAssignment>,
    pub s2_groups: Vec<S2Group>,
    pub dropped: Vec<ExpertAssignment>,
}

impl RoutingPlan {
    /// Token indices of dropped pairs, flattened in expert-id order.
    pub fn dropped_token_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for a in &self.dropped {
            out.extend_from_slice(&a.token_indices);
        }
        out
    }
}

/// Aggregate counts for one plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    /// Distinct executors touched: covered originals plus one per group.
    pub experts_accessed: usize,
    pub tokens_via_originals: usize,
    pub tokens_via_united: usize,
    pub tokens_dropped: usize,
    /// `experts_accessed / num_experts`.
    pub access_fraction: f64,
}

fn covers(cum: usize, target: f64) -> bool {
    cum as f64 >= target - COVERAGE_EPS
}

/// Builds a brownout routing plan for one batch of expert assignments.
///
/// `assignments` must cover expert ids `0..m` exactly once each; zero-count
/// experts are allowed and end up in no set.
pub fn plan_brownout(
    assignments: &[ExpertAssignment],
    cfg: &BrownoutConfig,
) -> Result<RoutingPlan, BrownoutError> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(BrownoutError::ThresholdOutOfRange(cfg.threshold));
    }
    if cfg.way == 0 {
        return Err(BrownoutError::InvalidWay);
    }
    let m = assignments.len();
    let mut seen = vec![false; m];
    for a in assignments {
        if a.expert_id >= m {
            return Err(BrownoutError::InvalidAssignments(format!(
                "expert id {} out of range for {} assignments",
                a.expert_id, m
            )));
        }
        if seen[a.expert_id] {
            return Err(BrownoutError::InvalidAssignments(format!(
                "expert id {} listed twice",
                a.expert_id
            )));
        }
        seen[a.expert_id] = true;
        if a.token_count != a.token_indices.len() {
            return Err(BrownoutError::InvalidAssignments(format!(
                "expert {}: count {} != {} token indices",
                a.expert_id,
                a.token_count,
                a.token_indices.len()
            )));
        }
    }

    let total: usize = assignments.iter().map(|a| a.token_count).sum();
    let target = total as f64 * cfg.threshold;

    // Busiest first; ties keep the lower expert id.
    let mut order: Vec<&ExpertAssignment> =
        assignments.iter().filter(|a| a.token_count > 0).collect();
    order.sort_by(|a, b| {
        b.token_count
            .cmp(&a.token_count)
            .then(a.expert_id.cmp(&b.expert_id))
    });

    let mut s1 = Vec::new();
    let mut cum = 0usize;
    let mut rest = Vec::new();
    for a in order {
        if covers(cum, target) {
            rest.push(a);
        } else {
            cum += a.token_count;
            s1.push(a.clone());
        }
    }

    let mut s2_groups: Vec<S2Group> = Vec::new();
    let mut dropped = Vec::new();
    if cfg.use_full_brownout {
        rest.sort_by_key(|a| a.expert_id);
        dropped = rest.into_iter().cloned().collect();
    } else {
        rest.sort_by_key(|a| a.expert_id);
        let mut current: Option<S2Group> = None;
        for a in rest {
            let gid = a.expert_id / cfg.way;
            if current.as_ref().map(|g| g.group_id) != Some(gid) {
                if let Some(g) = current.take() {
                    s2_groups.push(g);
                }
                current = Some(S2Group {
                    group_id: gid,
                    executor: GroupExecutor::United(gid),
                    members: Vec::new(),
                    merged_token_indices: Vec::new(),
                });
            }
            let g = current.as_mut().expect("group opened above");
            g.members.push(a.clone());
            g.merged_token_indices.extend_from_slice(&a.token_indices);
        }
        if let Some(g) = current.take() {
            s2_groups.push(g);
        }
        for g in &mut s2_groups {
            if g.members.len() == 1 {
                g.executor = GroupExecutor::Original(g.members[0].expert_id);
            }
        }
    }

    Ok(RoutingPlan {
        num_experts: m,
        coverage_target: target,
        s1,
        s2_groups,
        dropped,
    })
}

/// Aggregates a plan into counts used for reporting and cost accounting.
pub fn plan_stats(plan: &RoutingPlan) -> PlanStats {
    let mut stats = PlanStats {
        experts_accessed: plan.s1.len() + plan.s2_groups.len(),
        tokens_via_originals: plan.s1.iter().map(|a| a.token_count).sum(),
        tokens_via_united: 0,
        tokens_dropped: plan.dropped.iter().map(|a| a.token_count).sum(),
        access_fraction: 0.0,
    };
    for g in &plan.s2_groups {
        let count = g.merged_token_indices.len();
        match g.executor {
            GroupExecutor::United(_) => stats.tokens_via_united += count,
            GroupExecutor::Original(_) => stats.tokens_via_originals += count,
        }
    }
    stats.access_fraction = if plan.num_experts == 0 {
        0.0
    } else {
        stats.experts_accessed as f64 / plan.num_experts as f64
    };
    stats
}

/// Exhaustively finds the size of the smallest expert subset whose counts
/// reach `target`. Exponential in the expert count, hence the hard cap — this
/// exists to check the greedy planner, not to be fast.
pub fn minimal_cover_oracle(counts: &[usize], target: f64) -> Result<usize, BrownoutError> {
    let m = counts.len();
    if m > ORACLE_MAX_EXPERTS {
        return Err(BrownoutError::OracleTooLarge {
            m,
            max: ORACLE_MAX_EXPERTS,
        });
    }
    let total: usize = counts.iter().sum();
    if target < 0.0 || target > total as f64 + COVERAGE_EPS {
        return Err(BrownoutError::TargetOutOfRange {
            target,
            total: total as f64,
        });
    }
    let mut best: Option<u32> = None;
    for mask in 0u32..(1u32 << m) {
        let size = mask.count_ones();
        if best.is_some_and(|b| size >= b) {
            continue;
        }
        let mut sum = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            if mask & (1 << i) != 0 {
                sum += c;
            }
        }
        if sum as f64 >= target - COVERAGE_EPS {
            best = Some(size);
        }
    }
    Ok(best.expect("full set reaches any valid target") as usize)
}

/// Collects per-expert assignment pairs from a gated batch.
pub fn batch_assignments(batch: &TokenBatch, num_experts: usize) -> Vec<ExpertAssignment> {
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
    for (t, route) in batch.routes.iter().enumerate() {
        for &id in &route.expert_ids {
            per_expert[id].push(t);
        }
    }
    per_expert
        .into_iter()
        .enumerate()
        .map(|(id, tokens)| ExpertAssignment::new(id, tokens))
        .collect()
}
