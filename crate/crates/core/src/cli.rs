//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on runtime failures (I/O, bad files), 2 on invalid arguments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::decision::{threshold_from_costs, RoutingPolicy, REFERENCE_THRESHOLD};
use crate::estimator::{
    evaluate, train_boosted, train_forest, train_logistic, BoostedParams, FailureEstimator, ForestParams,
    LogisticParams,
};
use crate::gateway::GatewayConfig;
use crate::ledger::{CostModel, LedgerSummary, REFERENCE_ROUTER_OVERHEAD};
use crate::trace::{
    baseline_confidence_cascade, empirical_accuracies, generate_synthetic, labeled_examples, load_traces, replay,
    save_traces, split_train_test, sweep_thresholds, write_atomic, write_pareto_csv, ParetoPoint,
    SyntheticTraceParams, TraceRecord,
};

#[derive(Debug, Parser)]
#[command(name = "cascade-router", version, about = "Cost-aware two-tier cascade router")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic labeled traces as JSONL.
    GenTraces(GenTracesArgs),
    /// Train a failure estimator on the training split of a trace file.
    Train(TrainArgs),
    /// Replay traces over a grid of thresholds and write the operating points as CSV.
    Sweep(SweepArgs),
    /// Replay traces at a single threshold and print the cost ledger summary.
    Simulate(SimulateArgs),
    /// Replay the single-model confidence cascade baseline.
    Baseline(BaselineArgs),
    /// Run the HTTP gateway.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenTracesArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Target Layer-1 accuracy (reference default 0.791).
    #[arg(long = "l1-acc", default_value_t = crate::trace::REFERENCE_L1_ACCURACY)]
    pub l1_accuracy: f64,
    /// Target Layer-2 accuracy (reference default 0.98).
    #[arg(long = "l2-acc", default_value_t = crate::trace::REFERENCE_L2_ACCURACY)]
    pub l2_accuracy: f64,
    /// How strongly the observable features separate failures; 0 makes them uninformative.
    #[arg(long, default_value_t = crate::trace::DEFAULT_FEATURE_SEPARATION)]
    pub separation: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Boosted,
    Forest,
    Logistic,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Boosted)]
    pub model: ModelArg,
    /// Boosting rounds.
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    /// Defaults to 3 for boosted, 6 for forest.
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Forest size.
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    /// Ridge penalty for the logistic model.
    #[arg(long, default_value_t = 1.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score cut-off for the held-out precision/recall report.
    #[arg(long, default_value_t = 0.5)]
    pub decision_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Cost per 1k output tokens for each Layer-1 model.
    #[arg(long, default_value_t = 0.2)]
    pub l1_unit_cost: f64,
    /// Cost per 1k output tokens for the Oracle.
    #[arg(long, default_value_t = 8.0)]
    pub l2_unit_cost: f64,
    /// Count Layer-1 spend in the total (excluded by default).
    #[arg(long)]
    pub count_l1_in_total: bool,
    /// Seconds (reference default 0.82).
    #[arg(long, default_value_t = REFERENCE_ROUTER_OVERHEAD)]
    pub router_overhead: f64,
}

impl CostArgs {
    fn cost_model(&self) -> Result<CostModel, CliError> {
        let cm = CostModel {
            l1_default_unit_cost: Some(self.l1_unit_cost),
            l2_unit_cost: self.l2_unit_cost,
            count_l1_in_total: self.count_l1_in_total,
            router_overhead_latency: self.router_overhead,
            ..CostModel::default()
        };
        cm.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cm)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub estimator: PathBuf,
    /// Inclusive `start:stop:step`.
    #[arg(long, default_value = "0:1:0.01")]
    pub grid: String,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Escalation cost, used to report the cost-derived threshold.
    #[arg(long, default_value_t = 0.3)]
    pub c_esc: f64,
    #[arg(long, default_value_t = 1.0)]
    pub u_correct: f64,
    #[arg(long, default_value_t = 1.0)]
    pub oracle_success_prob: f64,
    #[command(flatten)]
    pub costs: CostArgs,
    /// Every grid point, as CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Non-dominated points only, as CSV.
    #[arg(long)]
    pub frontier_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub estimator: PathBuf,
    /// Escalation threshold (reference default 0.70). Ignored with --from-costs.
    #[arg(long, default_value_t = REFERENCE_THRESHOLD)]
    pub threshold: f64,
    /// Derive the threshold from --c-esc, --u-correct and --oracle-success-prob.
    #[arg(long)]
    pub from_costs: bool,
    #[arg(long, default_value_t = 0.3)]
    pub c_esc: f64,
    #[arg(long, default_value_t = 1.0)]
    pub u_correct: f64,
    #[arg(long, default_value_t = 1.0)]
    pub oracle_success_prob: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[command(flatten)]
    pub costs: CostArgs,
    /// Write the summary as JSON (or CSV when the path ends in .csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub traces: PathBuf,
    /// Escalate when the first model's confidence is below this.
    #[arg(long, default_value_t = 0.7)]
    pub confidence_threshold: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[command(flatten)]
    pub costs: CostArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    /// Invalid arguments; exit code 2.
    Usage(String),
    /// Runtime failure; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `start:stop:step` into an inclusive grid. Points are computed as
/// `start + i * step` so error does not accumulate.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let usage = |m: &str| CliError::Usage(format!("grid {spec:?}: {m}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(usage("expected start:stop:step"));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| usage("bounds and step must be numbers"));
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 {
        return Err(usage("step must be positive and all values finite"));
    }
    if stop < start {
        return Err(usage("grid is empty"));
    }
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) {
        return Err(usage("thresholds must lie in [0, 1]"));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 1_000_000 {
        return Err(usage("more than 1e6 points"));
    }
    Ok((0..count).map(|i| (start + i as f64 * step).min(stop)).collect())
}

fn select_split(traces: Vec<TraceRecord>, split: SplitArg) -> Vec<TraceRecord> {
    match split {
        SplitArg::All => traces,
        SplitArg::Train => split_train_test(&traces).0,
        SplitArg::Test => split_train_test(&traces).1,
    }
}

fn load_split(path: &Path, split: SplitArg) -> Result<Vec<TraceRecord>, CliError> {
    let traces = select_split(load_traces(path).map_err(runtime)?, split);
    if traces.is_empty() {
        return Err(CliError::Runtime(format!("{}: no traces in the selected split", path.display())));
    }
    Ok(traces)
}

fn annotate(value: f64, default: f64) -> &'static str {
    if value == default {
        " (reference default)"
    } else {
        ""
    }
}

fn format_summary(s: &LedgerSummary) -> String {
    let mut out = String::new();
    let factor = s
        .cost_reduction_factor
        .map_or_else(|| "unbounded".to_string(), |f| format!("{f:.3}x"));
    let _ = writeln!(out, "queries             {}", s.n_queries);
    let _ = writeln!(out, "escalation rate     {:.4}", s.escalation_rate);
    if let Some(a) = s.accuracy {
        let _ = writeln!(out, "accuracy            {a:.4}");
    }
    let _ = writeln!(out, "total cost          {:.4}", s.total_cost);
    let _ = writeln!(out, "oracle-only cost    {:.4}", s.oracle_only_cost);
    let _ = writeln!(
        out,
        "relative cost       {:.4} (layer-1 {})",
        s.relative_cost,
        if s.count_l1_in_total { "included" } else { "excluded" }
    );
    let _ = writeln!(
        out,
        "relative cost alt   {:.4} (layer-1 {})",
        s.relative_cost_alternate,
        if s.count_l1_in_total { "excluded" } else { "included" }
    );
    let _ = writeln!(out, "cost savings        {:.4}", s.cost_savings);
    let _ = writeln!(out, "cost reduction      {factor}");
    let _ = writeln!(out, "latency overhead    {:.3} s", s.mean_latency_overhead);
    let _ = writeln!(out, "mean latency        {:.3} s", s.mean_latency);
    out
}

fn write_summary(s: &LedgerSummary, path: &Path) -> Result<(), CliError> {
    let bytes = if path.extension().is_some_and(|e| e == "csv") {
        s.to_csv().into_bytes()
    } else {
        let mut v = serde_json::to_vec_pretty(s).map_err(runtime)?;
        v.push(b'\n');
        v
    };
    write_atomic(path, &bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn gen_traces(a: &GenTracesArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let params = SyntheticTraceParams {
        n: a.n,
        l1_accuracy: a.l1_accuracy,
        l2_accuracy: a.l2_accuracy,
        feature_separation: a.separation,
        seed: a.seed,
        ..SyntheticTraceParams::default()
    };
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let traces = generate_synthetic(&params).map_err(runtime)?;
    save_traces(&a.out, &traces).map_err(runtime)?;
    let (l1, l2) = empirical_accuracies(&traces);
    println!("wrote {} traces to {}", traces.len(), a.out.display());
    println!(
        "layer-1 accuracy {l1:.4}; target {:.3}{}",
        a.l1_accuracy,
        annotate(a.l1_accuracy, crate::trace::REFERENCE_L1_ACCURACY)
    );
    println!(
        "layer-2 accuracy {l2:.4}; target {:.3}{}",
        a.l2_accuracy,
        annotate(a.l2_accuracy, crate::trace::REFERENCE_L2_ACCURACY)
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let traces = load_traces(&a.traces).map_err(runtime)?;
    let (train, test) = split_train_test(&traces);
    let train_ex = labeled_examples(&train).map_err(runtime)?;
    let test_ex = labeled_examples(&test).map_err(runtime)?;
    let usage = |e: crate::estimator::EstimatorError| match e {
        crate::estimator::EstimatorError::InvalidParams(m) => CliError::Usage(m),
        other => runtime(other),
    };
    let est = match a.model {
        ModelArg::Boosted => train_boosted(
            &train_ex,
            &BoostedParams {
                rounds: a.rounds,
                learning_rate: a.learning_rate,
                max_depth: a.max_depth.unwrap_or(3),
                seed: a.seed,
                ..BoostedParams::default()
            },
        ),
        ModelArg::Forest => train_forest(
            &train_ex,
            &ForestParams {
                trees: a.trees,
                max_depth: a.max_depth.unwrap_or(6),
                seed: a.seed,
                ..ForestParams::default()
            },
        ),
        ModelArg::Logistic => train_logistic(
            &train_ex,
            &LogisticParams {
                l2: a.l2,
                seed: a.seed,
                ..LogisticParams::default()
            },
        ),
    }
    .map_err(usage)?;
    let mut json = est.to_json();
    json.push('\n');
    write_atomic(&a.out, json.as_bytes()).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    println!(
        "trained {} on {} examples; estimator {} written to {}",
        est.kind(),
        train_ex.len(),
        est.fingerprint(),
        a.out.display()
    );
    if test_ex.is_empty() {
        println!("held-out split is empty; no evaluation");
    } else {
        println!("held-out evaluation:\n{}", evaluate(&est, &test_ex, a.decision_threshold));
    }
    Ok(())
}

fn load_estimator(path: &Path) -> Result<FailureEstimator, CliError> {
    FailureEstimator::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn print_points(title: &str, points: &[ParetoPoint]) {
    println!("{title}");
    println!("threshold  escalation  accuracy  rel_cost  latency");
    for p in points {
        println!(
            "{:>9.4}  {:>10.4}  {:>8.4}  {:>8.4}  {:>7.3}",
            p.threshold, p.escalation_rate, p.accuracy, p.relative_cost, p.mean_latency
        );
    }
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let grid = parse_grid(&a.grid)?;
    let t_star =
        threshold_from_costs(a.u_correct, a.c_esc, a.oracle_success_prob).map_err(|e| CliError::Usage(e.to_string()))?;
    let cm = a.costs.cost_model()?;
    let traces = load_split(&a.traces, a.split)?;
    let est = load_estimator(&a.estimator)?;
    let result = sweep_thresholds(&traces, &est, &grid, &cm).map_err(runtime)?;
    write_pareto_csv(&result.points, &a.out).map_err(runtime)?;
    if let Some(p) = &a.frontier_out {
        write_pareto_csv(&result.frontier, p).map_err(runtime)?;
    }
    println!(
        "cost-derived threshold {t_star:.4} (u_correct {}, c_esc {}, oracle success {}); reference default {REFERENCE_THRESHOLD:.2}",
        a.u_correct, a.c_esc, a.oracle_success_prob
    );
    println!("{} grid points written to {}", result.points.len(), a.out.display());
    print_points("frontier:", &result.frontier);
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let policy = if a.from_costs {
        RoutingPolicy::from_costs(a.u_correct, a.c_esc, a.oracle_success_prob)
    } else {
        let p = RoutingPolicy {
            threshold_t: a.threshold,
            u_correct: a.u_correct,
            c_esc: a.c_esc,
            oracle_success_prob: a.oracle_success_prob,
        };
        p.validate().map(|_| p)
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let cm = a.costs.cost_model()?;
    let traces = load_split(&a.traces, a.split)?;
    let est = load_estimator(&a.estimator)?;
    let result = replay(&traces, &est, &policy, &cm).map_err(runtime)?;
    println!(
        "threshold {:.4}{}",
        policy.threshold_t,
        annotate(policy.threshold_t, REFERENCE_THRESHOLD)
    );
    print!("{}", format_summary(&result.summary));
    if let Some(out) = &a.out {
        write_summary(&result.summary, out)?;
    }
    Ok(())
}

fn baseline(a: &BaselineArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.confidence_threshold) {
        return Err(CliError::Usage("--confidence-threshold must lie in [0, 1]".into()));
    }
    let cm = a.costs.cost_model()?;
    let traces = load_split(&a.traces, a.split)?;
    let result = baseline_confidence_cascade(&traces, a.confidence_threshold, &cm).map_err(runtime)?;
    println!("confidence cascade at {:.4}", a.confidence_threshold);
    print!("{}", format_summary(&result.summary));
    if let Some(out) = &a.out {
        write_summary(&result.summary, out)?;
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let config = GatewayConfig::load(&a.config).map_err(runtime)?;
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(crate::gateway::serve(config)).map_err(runtime)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenTraces(a) => gen_traces(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Simulate(a) => simulate(a),
        Command::Baseline(a) => baseline(a),
        Command::Serve(a) => serve(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
