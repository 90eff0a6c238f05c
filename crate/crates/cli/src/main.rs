//! Command-line driver around the brownout serving library: routing plans,
//! united-expert distillation, serving simulations, queueing estimates, and
//! records summarization for plotting.

use brownout_moe::{
    amdahl_speedup, distill_layer, md1_response_time, percentile_nearest_rank, plan_brownout,
    plan_stats, read_records_csv, run_simulation, simulate_md1, synthetic_tokens, write_records_csv,
    write_thresholds_csv, Activation, BrownoutConfig, DistillConfig, ExpertAssignment, MoeLayer,
    PlanStats, RoutingPlan, SimConfig, StageSummary, Stage, TokenLatencyRecord,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

/// Failures split by exit code: domain errors exit 1, usage/IO errors exit 2.
enum CliError {
    Domain(String),
    Io(String),
}

type CliResult<T> = Result<T, CliError>;

fn domain<E: Display>(e: E) -> CliError {
    CliError::Domain(e.to_string())
}

fn io_at<E: Display>(path: &Path, e: E) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_at(path, e))
}

/// Prints one line to stdout, treating a closed pipe (e.g. `| head`) as a
/// normal early exit instead of a panic.
fn emit(text: impl Display) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{text}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: stdout: {e}");
        std::process::exit(2);
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_at(path, e))
}

#[derive(Parser)]
#[command(name = "moe-sim", version, about = "Brownout MoE serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan brownout routing for a per-expert token histogram.
    Route(RouteArgs),
    /// Train united experts for a layer's groups and report losses.
    Distill(DistillArgs),
    /// Run a serving simulation; writes records.csv, thresholds.csv, report.json.
    Simulate(SimulateArgs),
    /// Analytic M/D/1 response time, optionally cross-checked by simulation.
    Md1(Md1Args),
    /// Speedup of a workload whose parallel fraction spreads over k units.
    Speedup(SpeedupArgs),
    /// Summarize a records CSV: percentiles, violation rates, P90 series.
    Analyze(AnalyzeArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Route(args) => cmd_route(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Md1(args) => cmd_md1(args),
        Command::Speedup(args) => cmd_speedup(args),
        Command::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}

// ---------------------------------------------------------------- route

#[derive(Args)]
struct RouteArgs {
    /// Per-expert token counts, e.g. --counts 2,4,1,5,2,1,2,3
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<usize>,
    /// Experts merged per united group.
    #[arg(long, default_value_t = 4)]
    way: usize,
    /// Pair-coverage threshold in [0, 1].
    #[arg(long)]
    threshold: f64,
    /// What happens to uncovered experts: delegate to united groups or drop.
    #[arg(long, value_enum, default_value_t = Strategy::Partial)]
    strategy: Strategy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    /// Uncovered experts execute through their united group.
    Partial,
    /// Uncovered experts are dropped entirely.
    Full,
}

#[derive(Serialize)]
struct RouteOutput {
    plan: RoutingPlan,
    stats: PlanStats,
}

fn cmd_route(args: RouteArgs) -> CliResult<()> {
    // Token ids are synthesized sequentially: expert 0 takes 0..c0, etc.
    let mut next_token = 0usize;
    let assignments: Vec<ExpertAssignment> = args
        .counts
        .iter()
        .enumerate()
        .map(|(expert_id, &count)| {
            let ids: Vec<usize> = (next_token..next_token + count).collect();
            next_token += count;
            ExpertAssignment::new(expert_id, ids)
        })
        .collect();
    let cfg = BrownoutConfig {
        way: args.way,
        threshold: args.threshold,
        use_full_brownout: matches!(args.strategy, Strategy::Full),
    };
    let plan = plan_brownout(&assignments, &cfg).map_err(domain)?;
    let stats = plan_stats(&plan);
    let out = RouteOutput { plan, stats };
    emit(serde_json::to_string_pretty(&out).map_err(domain)?);
    Ok(())
}

// -------------------------------------------------------------- distill

#[derive(Args)]
struct DistillArgs {
    /// Layer JSON to refine; omitted, a seeded random layer is built instead.
    #[arg(long)]
    layer: Option<PathBuf>,
    /// Hidden width of the model (seeded layer only).
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Expert FFN inner width (seeded layer only).
    #[arg(long, default_value_t = 8)]
    h: usize,
    /// Expert count (seeded layer only).
    #[arg(long, default_value_t = 8)]
    experts: usize,
    /// Experts merged per united group (seeded layer only).
    #[arg(long, default_value_t = 4)]
    way: usize,
    /// Always-on shared expert count (seeded layer only).
    #[arg(long, default_value_t = 0)]
    shared: usize,
    /// Experts routed per token (seeded layer only).
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// FFN activation (seeded layer only).
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    /// Seed for the random layer.
    #[arg(long, default_value_t = 7)]
    layer_seed: u64,
    /// Training token count.
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    /// Seed for the training tokens.
    #[arg(long, default_value_t = 9)]
    token_seed: u64,
    /// Gradient-descent learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Training epochs per group.
    #[arg(long, default_value_t = 800)]
    epochs: usize,
    /// Minibatch size; 0 means full batch.
    #[arg(long, default_value_t = 0)]
    batch_size: usize,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the layer with its refreshed united bank here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-group training reports here as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

fn cmd_distill(args: DistillArgs) -> CliResult<()> {
    let layer = match &args.layer {
        Some(path) => MoeLayer::from_json(&read_file(path)?).map_err(domain)?,
        None => MoeLayer::random(
            args.d,
            args.h,
            args.experts,
            args.way,
            args.shared,
            args.top_k,
            args.activation.into(),
            args.layer_seed,
        )
        .map_err(domain)?,
    };
    let tokens = synthetic_tokens(args.tokens, layer.d, args.token_seed);
    let cfg = DistillConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let (refined, reports) = distill_layer(&layer, &tokens, &cfg).map_err(domain)?;
    for r in &reports {
        emit(format!(
            "group {}: {} epochs, loss {:.6} -> {:.6} (floor {:.6})",
            r.group_id, r.epochs_run, r.initial_loss, r.final_loss, r.lower_bound
        ));
    }
    if let Some(path) = &args.out {
        write_file(path, &refined.to_json().map_err(domain)?)?;
        emit(format!("wrote {}", path.display()));
    }
    if let Some(path) = &args.report {
        write_file(path, &serde_json::to_string_pretty(&reports).map_err(domain)?)?;
        emit(format!("wrote {}", path.display()));
    }
    Ok(())
}

// ------------------------------------------------------------- simulate

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory for records.csv, thresholds.csv, and report.json.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_stage_line(name: &str, s: &StageSummary, slo_s: f64) {
    emit(format!(
        "{name}: P50 {} P90 {} P99 {} | {:.2}% of {} tokens over the {slo_s} s SLO",
        fmt_opt(s.p50_s),
        fmt_opt(s.p90_s),
        fmt_opt(s.p99_s),
        s.violation_rate * 100.0,
        s.tokens,
    ));
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let cfg = SimConfig::from_json(&read_file(&args.config)?).map_err(domain)?;
    if let Some(trace_file) = &cfg.workload.trace_file {
        let path = Path::new(trace_file);
        if !path.exists() {
            return Err(io_at(path, "trace file not found"));
        }
    }
    let trace = cfg.load_trace().map_err(domain)?;
    let out = run_simulation(&trace, &cfg).map_err(domain)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_at(&args.out_dir, e))?;
    let records_path = args.out_dir.join("records.csv");
    let thresholds_path = args.out_dir.join("thresholds.csv");
    let report_path = args.out_dir.join("report.json");
    write_records_csv(&records_path, &out.records).map_err(|e| io_at(&records_path, e))?;
    write_thresholds_csv(&thresholds_path, &out.thresholds)
        .map_err(|e| io_at(&thresholds_path, e))?;
    write_file(
        &report_path,
        &serde_json::to_string_pretty(&out.report).map_err(domain)?,
    )?;

    let r = &out.report;
    emit(format!(
        "requests: {} completed, {} unfinished",
        r.requests_completed, r.requests_unfinished
    ));
    emit(format!(
        "tokens: {} emitted in {} iterations over {:.1} s ({:.2} tok/s)",
        r.tokens_emitted, r.iterations, r.duration_s, r.throughput_tokens_per_s
    ));
    print_stage_line("prefill", &r.prefill, cfg.engine.prefill_slo_s);
    print_stage_line("decode", &r.decode, cfg.engine.decode_slo_s);
    emit(format!(
        "wrote {}, {}, {}",
        records_path.display(),
        thresholds_path.display(),
        report_path.display()
    ));
    Ok(())
}

// ------------------------------------------------------------ md1/speedup

#[derive(Args)]
struct Md1Args {
    /// Arrival rate (jobs per second).
    #[arg(long)]
    lambda: f64,
    /// Deterministic service time in seconds.
    #[arg(long)]
    tau: f64,
    /// Also run the discrete-event simulator over this many arrivals.
    #[arg(long)]
    arrivals: Option<usize>,
    /// Seed for the simulated arrival process.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Serialize)]
struct Md1Output {
    lambda: f64,
    tau: f64,
    utilization: f64,
    analytic_response_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    simulated_response_s: Option<f64>,
}

fn cmd_md1(args: Md1Args) -> CliResult<()> {
    let analytic = md1_response_time(args.lambda, args.tau).map_err(domain)?;
    let simulated = match args.arrivals {
        Some(n) => Some(simulate_md1(args.lambda, args.tau, n, args.seed).map_err(domain)?),
        None => None,
    };
    let out = Md1Output {
        lambda: args.lambda,
        tau: args.tau,
        utilization: args.lambda * args.tau,
        analytic_response_s: analytic,
        simulated_response_s: simulated,
    };
    emit(serde_json::to_string_pretty(&out).map_err(domain)?);
    Ok(())
}

#[derive(Args)]
struct SpeedupArgs {
    /// Parallelizable fraction of the work, in [0, 1].
    #[arg(long)]
    alpha: f64,
    /// Parallel units.
    #[arg(long)]
    units: f64,
}

fn cmd_speedup(args: SpeedupArgs) -> CliResult<()> {
    let speedup = amdahl_speedup(args.alpha, args.units).map_err(domain)?;
    #[derive(Serialize)]
    struct SpeedupOutput {
        alpha: f64,
        units: f64,
        speedup: f64,
    }
    let out = SpeedupOutput {
        alpha: args.alpha,
        units: args.units,
        speedup,
    };
    emit(serde_json::to_string_pretty(&out).map_err(domain)?);
    Ok(())
}

// -------------------------------------------------------------- analyze

#[derive(Args)]
struct AnalyzeArgs {
    /// records.csv produced by `simulate`.
    #[arg(long)]
    records: PathBuf,
    /// Prefill (time-to-first-token) SLO in seconds.
    #[arg(long, default_value_t = 0.25)]
    prefill_slo: f64,
    /// Decode (inter-token) SLO in seconds.
    #[arg(long, default_value_t = 0.15)]
    decode_slo: f64,
    /// Include a per-second P90 series per stage (plot-ready).
    #[arg(long)]
    per_second: bool,
}

#[derive(Serialize)]
struct AnalyzeStage {
    tokens: usize,
    p50_s: Option<f64>,
    p90_s: Option<f64>,
    p99_s: Option<f64>,
    /// Fraction of tokens with latency strictly above the SLO.
    violation_rate: f64,
    /// Mean of the per-record threshold column for this stage.
    mean_threshold_at_emit: Option<f64>,
}

#[derive(Serialize)]
struct SecondBucket {
    second: u64,
    prefill_tokens: usize,
    prefill_p90_s: Option<f64>,
    decode_tokens: usize,
    decode_p90_s: Option<f64>,
}

#[derive(Serialize)]
struct AnalyzeOutput {
    rows: usize,
    skipped_rows: usize,
    prefill: AnalyzeStage,
    decode: AnalyzeStage,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_second: Option<Vec<SecondBucket>>,
}

fn stage_analysis(records: &[TokenLatencyRecord], stage: Stage, slo_s: f64) -> AnalyzeStage {
    let mut latencies: Vec<f64> = Vec::new();
    let mut threshold_sum = 0.0;
    for r in records.iter().filter(|r| r.stage == stage) {
        latencies.push(r.latency_s);
        threshold_sum += r.threshold_at_emit;
    }
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tokens = latencies.len();
    // Same counting rule as the simulator's report, so round trips agree
    // exactly: strictly-greater comparison, empty stage counts as zero.
    let violations = latencies.iter().filter(|&&l| l > slo_s).count();
    AnalyzeStage {
        tokens,
        p50_s: percentile_nearest_rank(&latencies, 50),
        p90_s: percentile_nearest_rank(&latencies, 90),
        p99_s: percentile_nearest_rank(&latencies, 99),
        violation_rate: if tokens == 0 {
            0.0
        } else {
            violations as f64 / tokens as f64
        },
        mean_threshold_at_emit: if tokens == 0 {
            None
        } else {
            Some(threshold_sum / tokens as f64)
        },
    }
}

fn per_second_series(records: &[TokenLatencyRecord]) -> Vec<SecondBucket> {
    let mut buckets: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let slot = buckets.entry(r.emit_time_s.floor() as u64).or_default();
        match r.stage {
            Stage::Prefill => slot.0.push(r.latency_s),
            Stage::Decode => slot.1.push(r.latency_s),
        }
    }
    buckets
        .into_iter()
        .map(|(second, (mut prefill, mut decode))| {
            prefill.sort_by(|a, b| a.partial_cmp(b).unwrap());
            decode.sort_by(|a, b| a.partial_cmp(b).unwrap());
            SecondBucket {
                second,
                prefill_tokens: prefill.len(),
                prefill_p90_s: percentile_nearest_rank(&prefill, 90),
                decode_tokens: decode.len(),
                decode_p90_s: percentile_nearest_rank(&decode, 90),
            }
        })
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult<()> {
    if !args.records.exists() {
        return Err(io_at(&args.records, "no such file"));
    }
    let (records, issues) = read_records_csv(&args.records).map_err(domain)?;
    for issue in &issues {
        eprintln!("warning: line {}: {}", issue.line, issue.message);
    }
    let out = AnalyzeOutput {
        rows: records.len(),
        skipped_rows: issues.len(),
        prefill: stage_analysis(&records, Stage::Prefill, args.prefill_slo),
        decode: stage_analysis(&records, Stage::Decode, args.decode_slo),
        per_second: args.per_second.then(|| per_second_series(&records)),
    };
    emit(serde_json::to_string_pretty(&out).map_err(domain)?);
    Ok(())
}
