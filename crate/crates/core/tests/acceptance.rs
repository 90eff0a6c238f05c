//! End-to-end acceptance checks for the brownout serving stack.
//!
//! Each test covers one numbered criterion and prints a single
//! `ACCEPTANCE <n> PASS|FAIL: ...` line (visible with `--nocapture`).
//! Tolerances are pinned as constants next to the checks that use them.

use brownout_moe::{
    amdahl_speedup, batch_assignments, distill_group, group_loss_gradient, group_loss,
    md1_response_time, minimal_cover_oracle, moe_forward, percentile_nearest_rank, plan_brownout,
    plan_stats, run_simulation, simulate_md1, standard_moe_forward, synthetic_tokens,
    Activation, BrownoutConfig, ControllerMode, DistillConfig, ExpertAssignment, ExpertFfn,
    GroupExecutor, LatencyWindow, MoeLayer, SalcParams, SimConfig, SimOutput, Stage, TokenBatch,
    salc_update,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Exact-match tolerance for the worked controller examples (the arithmetic
/// is fixed-point exact except for decimal literals like 0.5 + 0.1).
const CONTROLLER_EXAMPLE_TOL: f64 = 1e-12;
/// Relative tolerance between the analytic M/D/1 formula and the
/// discrete-event simulation at one million arrivals.
const MD1_REL_TOL: f64 = 0.05;
/// Absolute tolerance on the fixed-speedup spot check.
const SPEEDUP_TOL: f64 = 1e-4;
/// Convergence target for a group of identical experts.
const IDENTICAL_LOSS_TARGET: f64 = 1e-6;
/// A linear group must land within 5% of its variance floor.
const LINEAR_BOUND_FACTOR: f64 = 1.05;
/// Max per-coordinate relative error, analytic vs central differences.
const GRADIENT_REL_TOL: f64 = 1e-4;
/// Half-width of the central finite-difference stencil.
const GRADIENT_FD_EPS: f64 = 1e-5;

fn conclude(n: usize, ok: bool, detail: &str) {
    println!("ACCEPTANCE {n} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {n} failed: {detail}");
}

/// Expert-id/count pairs expanded into assignments over sequential token ids.
fn assignments_from_counts(counts: &[usize]) -> Vec<ExpertAssignment> {
    let mut next_token = 0usize;
    counts
        .iter()
        .enumerate()
        .map(|(expert_id, &count)| {
            let token_indices: Vec<usize> = (next_token..next_token + count).collect();
            next_token += count;
            ExpertAssignment::new(expert_id, token_indices)
        })
        .collect()
}

const FIXTURE_COUNTS: [usize; 8] = [2, 4, 1, 5, 2, 1, 2, 3];

#[test]
fn acceptance_1_full_brownout_routing_fixture() {
    let assignments = assignments_from_counts(&FIXTURE_COUNTS);
    let cfg = BrownoutConfig {
        way: 4,
        threshold: 0.6,
        use_full_brownout: true,
    };
    let plan = plan_brownout(&assignments, &cfg).unwrap();
    let stats = plan_stats(&plan);

    let s1_ids: BTreeSet<usize> = plan.s1.iter().map(|a| a.expert_id).collect();
    let covered: usize = plan.s1.iter().map(|a| a.token_count).sum();

    let ok = s1_ids == BTreeSet::from([1, 3, 7])
        && covered == 12
        && stats.tokens_dropped == 8
        && stats.tokens_via_united == 0
        && stats.tokens_via_originals == 12
        && stats.experts_accessed == 3
        && stats.access_fraction == 0.375
        && plan.s2_groups.is_empty();
    conclude(
        1,
        ok,
        &format!(
            "full brownout on counts {:?} @ 0.6: kept {:?}, covered {covered}/20, dropped {}, \
             access fraction {}",
            FIXTURE_COUNTS, s1_ids, stats.tokens_dropped, stats.access_fraction
        ),
    );
}

#[test]
fn acceptance_2_partial_brownout_routing_fixture() {
    let assignments = assignments_from_counts(&FIXTURE_COUNTS);
    let cfg = BrownoutConfig {
        way: 4,
        threshold: 0.6,
        use_full_brownout: false,
    };
    let plan = plan_brownout(&assignments, &cfg).unwrap();
    let stats = plan_stats(&plan);

    let mut group_summary: Vec<(GroupExecutor, BTreeSet<usize>, usize)> = plan
        .s2_groups
        .iter()
        .map(|g| {
            (
                g.executor,
                g.members.iter().map(|m| m.expert_id).collect(),
                g.merged_token_indices.len(),
            )
        })
        .collect();
    group_summary.sort_by_key(|(e, _, _)| *e);

    let expected = vec![
        (GroupExecutor::United(0), BTreeSet::from([0, 2]), 3usize),
        (GroupExecutor::United(1), BTreeSet::from([4, 5, 6]), 5usize),
    ];
    let ok = group_summary == expected
        && stats.experts_accessed == 5
        && stats.tokens_via_originals == 12
        && stats.tokens_via_united == 8
        && stats.tokens_dropped == 0
        && plan.s1.len() == 3;
    conclude(
        2,
        ok,
        &format!(
            "partial brownout way=4: {} originals + {} united groups = {} executors, \
             group tokens {:?}",
            plan.s1.len(),
            plan.s2_groups.len(),
            stats.experts_accessed,
            group_summary.iter().map(|(_, _, t)| *t).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn acceptance_3_greedy_prefix_matches_exhaustive_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let instances = 1_000;
    let mut checked = 0usize;
    for i in 0..instances {
        let m = rng.gen_range(1..=12);
        let counts: Vec<usize> = (0..m).map(|_| rng.gen_range(0..=50)).collect();
        // Sprinkle the exact endpoints in with the uniform draws.
        let threshold = match i % 50 {
            0 => 1.0,
            1 => 0.0,
            _ => rng.gen::<f64>(),
        };
        let assignments = assignments_from_counts(&counts);
        let cfg = BrownoutConfig {
            way: 4,
            threshold,
            use_full_brownout: false,
        };
        let plan = plan_brownout(&assignments, &cfg).unwrap();
        let minimum = minimal_cover_oracle(&counts, plan.coverage_target).unwrap();
        assert_eq!(
            plan.s1.len(),
            minimum,
            "instance {i}: counts {counts:?} threshold {threshold} \
             greedy {} vs exhaustive {minimum}",
            plan.s1.len()
        );
        checked += 1;
    }
    conclude(
        3,
        checked == instances,
        &format!("greedy covered-set size equals the exhaustive minimum on {checked} random instances"),
    );
}

#[test]
fn acceptance_4_all_covered_plan_reproduces_standard_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cases = 100;
    let mut bitwise_equal = 0usize;
    for i in 0..cases {
        let d = rng.gen_range(2..=6);
        let h = rng.gen_range(2..=8);
        let m = rng.gen_range(2..=10);
        let top_k = rng.gen_range(1..=3usize.min(m));
        let n_shared = rng.gen_range(0..=2);
        let way = rng.gen_range(1..=m);
        let activation = if i % 2 == 0 { Activation::Relu } else { Activation::Identity };
        let layer =
            MoeLayer::random(d, h, m, way, n_shared, top_k, activation, 1_000 + i as u64).unwrap();

        let n_tokens = rng.gen_range(1..=16);
        let tokens = synthetic_tokens(n_tokens, d, 2_000 + i as u64);
        let batch = TokenBatch::gate(&layer, tokens).unwrap();

        let cfg = BrownoutConfig {
            way,
            threshold: 1.0,
            use_full_brownout: false,
        };
        let plan = plan_brownout(&batch_assignments(&batch, m), &cfg).unwrap();
        let browned = moe_forward(&layer, &batch, &plan).unwrap();
        let reference = standard_moe_forward(&layer, &batch).unwrap();

        assert_eq!(browned.len(), reference.len());
        for (row, (a, b)) in browned.iter().zip(&reference).enumerate() {
            assert_eq!(a.len(), b.len());
            for (col, (x, y)) in a.iter().zip(b).enumerate() {
                assert_eq!(
                    x.to_bits(),
                    y.to_bits(),
                    "case {i} token {row} dim {col}: {x} != {y}"
                );
            }
        }
        bitwise_equal += 1;
    }
    conclude(
        4,
        bitwise_equal == cases,
        &format!("threshold-1 forward pass bit-identical to the standard reference on {bitwise_equal} random layer/batch pairs"),
    );
}

#[test]
fn acceptance_5_distillation_convergence_and_gradient() {
    // (a) A group of identical experts: the united expert must reach (and
    // with copy-initialization, start at) effectively zero loss.
    let base = MoeLayer::random(4, 4, 1, 1, 0, 1, Activation::Relu, 205).unwrap();
    let twin = base.experts[0].clone();
    let members = vec![&base.experts[0], &twin];
    let tokens = synthetic_tokens(64, 4, 206);
    let cfg = DistillConfig {
        lr: 0.05,
        epochs: 2_000,
        batch_size: 0,
        seed: 2,
    };
    let (_, identical_report) = distill_group(0, &members, &tokens, &cfg).unwrap();
    let identical_ok = identical_report.final_loss < IDENTICAL_LOSS_TARGET
        && identical_report.final_loss <= identical_report.initial_loss;

    // (b) A linear group has a closed-form optimum: training must land
    // within 5% of the variance floor.
    let linear = MoeLayer::random(4, 4, 2, 2, 0, 1, Activation::Identity, 215).unwrap();
    let linear_members: Vec<&ExpertFfn> = linear.experts.iter().collect();
    let linear_tokens = synthetic_tokens(64, 4, 216);
    let cfg_linear = DistillConfig {
        lr: 0.05,
        epochs: 2_000,
        batch_size: 0,
        seed: 3,
    };
    let (_, linear_report) = distill_group(0, &linear_members, &linear_tokens, &cfg_linear).unwrap();
    let linear_ok = linear_report.final_loss <= linear_report.lower_bound * LINEAR_BOUND_FACTOR
        && linear_report.lower_bound > 0.0;

    // (c) Analytic gradient vs central finite differences, both activations.
    let mut max_rel: f64 = 0.0;
    for (activation, seed) in [(Activation::Identity, 99u64), (Activation::Relu, 101)] {
        let layer = MoeLayer::random(3, 4, 2, 2, 0, 1, activation, seed).unwrap();
        let grad_members: Vec<&ExpertFfn> = layer.experts.iter().collect();
        let grad_tokens = synthetic_tokens(8, 3, 7);
        let mut united = grad_members[0].clone();
        // Nudge off the teacher so gradients are nonzero, and keep ReLU
        // pre-activations away from the kink where the derivative jumps.
        for w in united.up.iter_mut() {
            *w += 0.17;
        }
        for x in &grad_tokens {
            for a in united.preactivation(x).unwrap() {
                assert!(a.abs() > 1e-4, "kink too close for finite differences");
            }
        }
        let (g_up, g_down) = group_loss_gradient(&united, &grad_members, &grad_tokens).unwrap();
        let mut probe = |idx: usize, is_up: bool, analytic: f64| {
            let mut plus = united.clone();
            let mut minus = united.clone();
            if is_up {
                plus.up[idx] += GRADIENT_FD_EPS;
                minus.up[idx] -= GRADIENT_FD_EPS;
            } else {
                plus.down[idx] += GRADIENT_FD_EPS;
                minus.down[idx] -= GRADIENT_FD_EPS;
            }
            let lp = group_loss(&plus, &grad_members, &grad_tokens).unwrap();
            let lm = group_loss(&minus, &grad_members, &grad_tokens).unwrap();
            let fd = (lp - lm) / (2.0 * GRADIENT_FD_EPS);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        };
        for (i, &g) in g_up.iter().enumerate() {
            probe(i, true, g);
        }
        for (i, &g) in g_down.iter().enumerate() {
            probe(i, false, g);
        }
    }
    let gradient_ok = max_rel < GRADIENT_REL_TOL;

    conclude(
        5,
        identical_ok && linear_ok && gradient_ok,
        &format!(
            "identical-group loss {:.2e} (target < {IDENTICAL_LOSS_TARGET:.0e}); linear group {:.6} \
             vs floor {:.6} (factor {:.4}); max gradient rel err {:.2e}",
            identical_report.final_loss,
            linear_report.final_loss,
            linear_report.lower_bound,
            linear_report.final_loss / linear_report.lower_bound,
            max_rel
        ),
    );
}

#[test]
fn acceptance_6_controller_update_worked_examples() {
    let params = SalcParams {
        slo_s: 0.25,
        warning_factor: 0.8,
        shrink_ratio: 0.8,
        increment: 0.1,
        window_s: 10.0,
        floor: 0.0,
        cap: 1.0,
    };
    params.validate().unwrap();

    // One sample inside the window pins the windowed P90 exactly.
    let window_with_p90 = |p90: f64| {
        let mut w = LatencyWindow::new(params.window_s);
        w.record_latency(1.0, p90).unwrap();
        w
    };

    let cases = [
        // (name, current threshold, observed p90, expected next threshold)
        ("shrink", 0.5, 0.30, 0.40),
        ("grow", 0.5, 0.15, 0.60),
        ("dead-band hold", 0.5, 0.22, 0.50),
        ("cap clamp", 0.95, 0.15, 1.00),
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for (name, current, p90, expected) in cases {
        let got = salc_update(current, &params, &window_with_p90(p90), 1.0);
        let hit = (got - expected).abs() < CONTROLLER_EXAMPLE_TOL;
        ok &= hit;
        details.push(format!("{name} {current}->{got:.2}"));
    }
    conclude(6, ok, &format!("threshold updates: {}", details.join(", ")));
}

#[test]
fn acceptance_7_queueing_oracles() {
    let arrivals = 1_000_000;
    let mut ok = true;
    let mut details = Vec::new();
    for (i, lambda) in [0.2, 0.5, 0.8].into_iter().enumerate() {
        let analytic = md1_response_time(lambda, 1.0).unwrap();
        let simulated = simulate_md1(lambda, 1.0, arrivals, 777 + i as u64).unwrap();
        let rel = (simulated - analytic).abs() / analytic;
        ok &= rel <= MD1_REL_TOL;
        details.push(format!("rho {lambda}: sim {simulated:.4} vs analytic {analytic:.4} ({:.2}%)", rel * 100.0));
    }
    let speedup = amdahl_speedup(0.6, 3.0).unwrap();
    let speedup_ok = (speedup - 1.6667).abs() <= SPEEDUP_TOL;
    ok &= speedup_ok;
    details.push(format!("speedup(0.6, 3) = {speedup:.5}"));
    conclude(7, ok, &details.join("; "));
}

fn bundled_config(name: &str) -> SimConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    SimConfig::from_json(&text).unwrap()
}

fn decode_p90_between(out: &SimOutput, after_s: f64, until_s: f64) -> Option<f64> {
    let mut lat: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.stage == Stage::Decode && r.emit_time_s > after_s && r.emit_time_s <= until_s)
        .map(|r| r.latency_s)
        .collect();
    lat.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_nearest_rank(&lat, 90)
}

#[test]
fn acceptance_8_burst_adaptation_beats_static_threshold() {
    let salc_cfg = bundled_config("burst.json");
    let mut static_cfg = salc_cfg.clone();
    static_cfg.controller = ControllerMode::Static { threshold: 1.0 };

    let decode_slo = salc_cfg.engine.decode_slo_s;
    let warning_line = match &salc_cfg.controller {
        ControllerMode::Salc { decode, .. } => decode_slo * decode.warning_factor,
        other => panic!("burst.json must use the feedback controller, found {other:?}"),
    };
    let band_top = 1.1 * decode_slo;
    let segments = &salc_cfg.workload.segments;
    let burst_start = segments.last().unwrap().start_s;
    let trace_end = segments.last().unwrap().end_s;
    let settle_deadline = burst_start + 30.0;

    // Paired runs over the identical trace.
    let trace = salc_cfg.load_trace().unwrap();
    let static_out = run_simulation(&trace, &static_cfg).unwrap();
    let salc_out = run_simulation(&trace, &salc_cfg).unwrap();

    // (a) The static threshold misses the decode SLO once the burst lands.
    let static_p90 = decode_p90_between(&static_out, burst_start, trace_end).unwrap();
    let a_ok = static_p90 > decode_slo;

    // (b) Feedback settles the post-burst decode P90 into the target band
    // within 30 simulated seconds of the rate change.
    let salc_p90 = decode_p90_between(&salc_out, settle_deadline, trace_end).unwrap();
    let b_ok = salc_p90 >= warning_line && salc_p90 <= band_top;

    // (c) Whole-run decode SLO violation rate at least halves.
    let static_viol = static_out.report.decode.violation_rate;
    let salc_viol = salc_out.report.decode.violation_rate;
    let c_ok = static_viol > 0.0 && salc_viol <= 0.5 * static_viol;

    // (d) The adapted threshold is genuinely dynamic: its post-burst mean
    // sits strictly inside (0, 1).
    let post_burst_thresholds: Vec<f64> = salc_out
        .thresholds
        .iter()
        .filter(|t| t.stage == Stage::Decode && t.time_s > burst_start && t.time_s <= trace_end)
        .map(|t| t.threshold)
        .collect();
    let mean_threshold =
        post_burst_thresholds.iter().sum::<f64>() / post_burst_thresholds.len() as f64;
    let d_ok = mean_threshold > 0.0 && mean_threshold < 1.0;

    conclude(
        8,
        a_ok && b_ok && c_ok && d_ok,
        &format!(
            "static post-burst decode P90 {static_p90:.4} vs SLO {decode_slo}; adaptive settles to \
             {salc_p90:.4} in [{warning_line:.3}, {band_top:.3}]; decode violations {salc_viol:.4} \
             vs {static_viol:.4} static; mean post-burst threshold {mean_threshold:.3}"
        ),
    );
}

#[test]
fn acceptance_9_lower_threshold_never_hurts_throughput() {
    let base = bundled_config("burst.json");
    let mut brown_cfg = base.clone();
    brown_cfg.controller = ControllerMode::Static { threshold: 0.4 };
    let mut full_cfg = base.clone();
    full_cfg.controller = ControllerMode::Static { threshold: 1.0 };

    let trace = base.load_trace().unwrap();
    let brown = run_simulation(&trace, &brown_cfg).unwrap();
    let full = run_simulation(&trace, &full_cfg).unwrap();

    let throughput_ok =
        brown.report.throughput_tokens_per_s >= full.report.throughput_tokens_per_s;
    let tokens_ok = brown.report.tokens_emitted == full.report.tokens_emitted;

    // At threshold 1 the plan covers every active expert, so the realized
    // MoE cost must equal the no-brownout counterfactual bit for bit...
    let identity_ok = full
        .iterations
        .iter()
        .all(|it| it.moe_latency_s == it.zero_brownout_moe_latency_s);
    // ...which makes the within-iteration counterfactual the threshold-1
    // cost of the very same batch: elementwise the browned run never pays
    // more than that.
    let elementwise_ok = brown
        .iterations
        .iter()
        .all(|it| it.moe_latency_s <= it.zero_brownout_moe_latency_s);

    conclude(
        9,
        throughput_ok && tokens_ok && identity_ok && elementwise_ok,
        &format!(
            "threshold 0.4: {:.2} tok/s over {} iterations vs threshold 1.0: {:.2} tok/s over {}; \
             per-iteration MoE cost <= its no-brownout counterfactual on every iteration",
            brown.report.throughput_tokens_per_s,
            brown.report.iterations,
            full.report.throughput_tokens_per_s,
            full.report.iterations
        ),
    );
}
