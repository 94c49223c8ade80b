//! File-based pipeline: `gen-tables` -> `plan` -> `apply` -> `verify`,
//! plus `oracle` for cross-checking the solver against brute force.
//!
//! Exit codes: 0 ok, 1 input/validation error, 2 infeasible budget,
//! 3 verification failure.

use crate::cost::{
    discretize, feasible_importance_blocks, feasible_latency_blocks, synthesize_latency,
    synthetic_importance_base, synthetic_importance_ext, BaseImportance, CostError, CostTable,
    ExtImportance, LatencyModelParams,
};
use crate::dp::{
    brute_force_base, brute_force_extended, solve_base, solve_extended, DpError,
};
use crate::merge::{
    apply_plan, random_weights, verify_equivalence, MergeError, NetworkWeights,
};
use crate::net::{validate_network, NetError, NetworkSpec, Plan};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Infeasible(String),
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::VerifyFailed(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Infeasible(m) | CliError::VerifyFailed(m) => m,
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> Self {
        match e {
            DpError::InfeasibleBudget { .. } | DpError::NoFeasiblePlan => {
                CliError::Infeasible(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Base,
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ElementType {
    F32,
    F64,
}

/// One planning run, resolved from command-line flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub network_path: PathBuf,
    pub latency_path: PathBuf,
    pub importance_path: PathBuf,
    pub budget_ms: f64,
    pub scale: u64,
    pub mode: Mode,
    pub alpha: f64,
}

#[derive(Parser)]
#[command(name = "netfold", about = "Latency-aware CNN depth compression")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate latency and importance tables for a network
    GenTables(GenTablesArgs),
    /// Solve for a plan under a latency budget
    Plan(PlanArgs),
    /// Apply a plan: fold, merge, and write the compressed network
    Apply(ApplyArgs),
    /// Check two networks compute the same function
    Verify(VerifyArgs),
    /// Cross-check the solver against exhaustive enumeration
    Oracle(PlanArgs),
}

#[derive(Args)]
struct GenTablesArgs {
    /// Network description (JSON)
    #[arg(long)]
    network: PathBuf,
    /// Output latency CSV
    #[arg(long)]
    out_latency: PathBuf,
    /// Output importance CSV
    #[arg(long)]
    out_importance: PathBuf,
    #[arg(long, value_enum, default_value = "base")]
    mode: Mode,
    /// Seed for the synthetic importance values
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic latency: milliseconds per multiply-accumulate
    #[arg(long, default_value_t = 1e-9)]
    mac_cost: f64,
    /// Synthetic latency: milliseconds of per-layer overhead
    #[arg(long, default_value_t = 0.05)]
    overhead: f64,
    /// Allow wide kernels after strided layers inside one block
    #[arg(long)]
    allow_wide_after_stride: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    network: PathBuf,
    /// Latency table CSV (header i,j,ms)
    #[arg(long)]
    latency: PathBuf,
    /// Importance table CSV (i,j,score or i,j,a,b,score)
    #[arg(long)]
    importance: PathBuf,
    #[arg(long)]
    budget_ms: f64,
    /// Ticks per millisecond for discretization
    #[arg(long, default_value_t = 100)]
    scale: u64,
    #[arg(long, value_enum, default_value = "base")]
    mode: Mode,
    /// Importance normalization coefficient (0 = off); the reference set
    /// is the table's own size-one blocks
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Write the plan here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run the exhaustive oracle and require agreement
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Weights JSON; omit to generate random weights from --seed
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for generated weights when --weights is omitted
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the (possibly generated) source weights here
    #[arg(long)]
    out_original_weights: Option<PathBuf>,
    #[arg(long)]
    out_network: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    /// Also write the prepared network (activations replaced, padding
    /// reordered, weights untouched)
    #[arg(long)]
    out_prepared_network: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    original_weights: PathBuf,
    #[arg(long)]
    merged: PathBuf,
    #[arg(long)]
    merged_weights: PathBuf,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f64")]
    element_type: ElementType,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTables(args) => cmd_gen_tables(&args),
        Command::Plan(args) => cmd_plan(&args, false),
        Command::Oracle(args) => cmd_plan(&args, true),
        Command::Apply(args) => cmd_apply(&args),
        Command::Verify(args) => cmd_verify(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn load_network(path: &PathBuf) -> Result<NetworkSpec, CliError> {
    let net = NetworkSpec::from_path(path)?;
    validate_network(&net)?;
    Ok(net)
}

fn cmd_gen_tables(args: &GenTablesArgs) -> Result<(), CliError> {
    let net = load_network(&args.network)?;
    let blocks = feasible_latency_blocks(&net, !args.allow_wide_after_stride);
    let params = LatencyModelParams {
        mac_cost: args.mac_cost,
        layer_overhead: args.overhead,
    };
    let latency = synthesize_latency(&net, &blocks, &params)?;
    latency.to_path(&args.out_latency)?;
    let importance_count = match args.mode {
        Mode::Base => {
            let imp = synthetic_importance_base(&blocks, net.len(), args.seed);
            imp.to_path(&args.out_importance)?;
            imp.entries.len()
        }
        Mode::Extended => {
            let imp = synthetic_importance_ext(&net, &blocks, args.seed);
            imp.to_path(&args.out_importance)?;
            imp.entries.len()
        }
    };
    println!(
        "L={} latency_blocks={} importance_blocks={}",
        net.len(),
        blocks.len(),
        importance_count
    );
    let ext_count = feasible_importance_blocks(&net, &blocks).len();
    eprintln!("extended importance entries available: {ext_count}");
    Ok(())
}

fn cmd_plan(args: &PlanArgs, force_oracle: bool) -> Result<(), CliError> {
    let net = load_network(&args.network)?;
    let l = net.len();
    if args.budget_ms <= 0.0 || args.scale < 1 {
        return Err(CliError::Input(
            "budget must be positive and scale >= 1".into(),
        ));
    }
    let cost = CostTable::from_path(&args.latency, l)?;
    let (ticks, budget) = discretize(&cost, args.budget_ms, args.scale)?;
    let run_oracle = force_oracle || args.oracle;

    let plan = match args.mode {
        Mode::Base => {
            let mut imp = BaseImportance::from_path(&args.importance, l)?;
            if args.alpha != 0.0 {
                let drops = singleton_drops_base(&imp);
                imp = imp.normalized(args.alpha, &drops)?;
            }
            let plan = solve_base(&ticks, &imp, budget)?;
            if run_oracle {
                let oracle = brute_force_base(&ticks, &imp, budget)?;
                check_agreement(&plan, &oracle)?;
            }
            plan
        }
        Mode::Extended => {
            let mut imp = ExtImportance::from_path(&args.importance, l, &net)?;
            if args.alpha != 0.0 {
                let drops = singleton_drops_ext(&imp);
                imp = imp.normalized(args.alpha, &drops)?;
            }
            let plan = solve_extended(&ticks, &imp, budget)?;
            if run_oracle {
                let oracle = brute_force_extended(&ticks, &imp, budget)?;
                check_agreement(&plan, &oracle)?;
            }
            plan
        }
    };
    eprintln!(
        "plan: |A|={} |S|={} |B|={} latency {:.4} ms of {:.4} ms budget, importance {:.6}",
        plan.a.len(),
        plan.s.len(),
        plan.b.len(),
        plan.predicted_latency_ms,
        plan.budget_ms,
        plan.predicted_importance
    );
    let json = serde_json::to_string_pretty(&plan)
        .map_err(|e| CliError::Input(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &args.out {
        plan.to_path(out)?;
    }
    Ok(())
}

fn singleton_drops_base(imp: &BaseImportance) -> Vec<f64> {
    imp.entries
        .iter()
        .filter(|(&(i, j), _)| j == i + 1)
        .map(|(_, &v)| v)
        .collect()
}

fn singleton_drops_ext(imp: &ExtImportance) -> Vec<f64> {
    imp.entries
        .iter()
        .filter(|(&(i, j, _, _), _)| j == i + 1)
        .map(|(_, &v)| v)
        .collect()
}

fn check_agreement(plan: &Plan, oracle: &Plan) -> Result<(), CliError> {
    if (plan.predicted_importance - oracle.predicted_importance).abs() > 1e-9 {
        return Err(CliError::Input(format!(
            "solver/oracle disagree: {} vs {} (oracle A={:?} S={:?})",
            plan.predicted_importance, oracle.predicted_importance, oracle.a, oracle.s
        )));
    }
    eprintln!(
        "oracle agrees: objective {:.6} (oracle A={:?})",
        oracle.predicted_importance, oracle.a
    );
    Ok(())
}

fn cmd_apply(args: &ApplyArgs) -> Result<(), CliError> {
    let net = load_network(&args.network)?;
    let plan = Plan::from_path(&args.plan)?;
    let weights: NetworkWeights<f64> = match &args.weights {
        Some(path) => NetworkWeights::from_path(path)?,
        None => random_weights(&net, args.seed),
    };
    if let Some(out) = &args.out_original_weights {
        weights.to_path(out)?;
    }
    let applied = apply_plan(&net, &weights, &plan)?;
    applied.merged_net.to_path(&args.out_network)?;
    applied.merged_weights.to_path(&args.out_weights)?;
    if let Some(out) = &args.out_prepared_network {
        applied.prepared_net.to_path(out)?;
    }
    println!("layers: {}", applied.merged_net.len());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    // No structural validation here: a prepared network can carry skips
    // whose endpoint shapes differ after padding reordering (the forward
    // pass center-aligns the residual), which validate_network rejects.
    let net_a = NetworkSpec::from_path(&args.original)?;
    let net_b = NetworkSpec::from_path(&args.merged)?;
    let (report, is_f64) = match args.element_type {
        ElementType::F64 => {
            let wa: NetworkWeights<f64> = NetworkWeights::from_path(&args.original_weights)?;
            let wb: NetworkWeights<f64> = NetworkWeights::from_path(&args.merged_weights)?;
            (
                verify_equivalence(&net_a, &wa, &net_b, &wb, args.trials, args.seed)?,
                true,
            )
        }
        ElementType::F32 => {
            let wa: NetworkWeights<f32> = NetworkWeights::from_path(&args.original_weights)?;
            let wb: NetworkWeights<f32> = NetworkWeights::from_path(&args.merged_weights)?;
            (
                verify_equivalence(&net_a, &wa, &net_b, &wb, args.trials, args.seed)?,
                false,
            )
        }
    };
    let json = serde_json::to_string(&report).map_err(|e| CliError::Input(e.to_string()))?;
    println!("{json}");
    if report.passes(is_f64) {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(format!(
            "max_abs_diff={} max_rel_diff={} over {} trials",
            report.max_abs_diff, report.max_rel_diff, report.trials
        )))
    }
}
