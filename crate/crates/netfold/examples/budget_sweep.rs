//! Sweeps the latency budget and prints how the plan trades importance
//! for speed. Also shows why S matters: merging only at the kept
//! activations A would often be slower than merging at the full cut set.
//!
//! Run with: cargo run --example budget_sweep

use netfold::cost::{
    discretize, feasible_latency_blocks, synthesize_latency, synthetic_importance_base,
    LatencyModelParams,
};
use netfold::dp::{merge_latency_of, optimal_latency};
use netfold::{solve_base, BaseImportance, CostTable, NetworkSpec};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny_irb.json");
    let net = NetworkSpec::from_path(&path)?;
    let l = net.len();

    let blocks = feasible_latency_blocks(&net, true);
    let params = LatencyModelParams {
        mac_cost: 1e-9,
        layer_overhead: 0.05,
    };
    let cost = synthesize_latency(&net, &blocks, &params)?;
    let imp = synthetic_importance_base(&blocks, l, 7);

    let unmerged_ms: f64 = (1..=l).map(|x| cost.get(x - 1, x).unwrap()).sum();
    let (ticks, _) = discretize(&cost, unmerged_ms, 100)?;
    let floor = optimal_latency(&ticks)?.t_opt(0, l).unwrap() as f64 / 100.0;
    println!("unmerged: {unmerged_ms:.3} ms, floor: {floor:.3} ms\n");
    println!("{:>10}  {:>4}  {:>10}  {:>12}  {:>12}", "budget", "|A|", "importance", "lat(S) ms", "lat(A) ms");

    let mut budget_ms = floor + 0.01;
    while budget_ms <= unmerged_ms + 0.01 {
        let (ticks, budget) = discretize(&cost, budget_ms, 100)?;
        let plan = solve_base(&ticks, &imp, budget)?;
        let lat_s = merge_latency_of(&ticks, &plan.s, 0, l).unwrap() as f64 / 100.0;
        let lat_a = merge_latency_of(&ticks, &plan.a, 0, l)
            .map(|t| format!("{:.3}", t as f64 / 100.0))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{:>10.3}  {:>4}  {:>10.4}  {:>12.3}  {:>12}",
            budget_ms,
            plan.a.len(),
            plan.predicted_importance,
            lat_s,
            lat_a
        );
        budget_ms += (unmerged_ms - floor) / 8.0;
    }

    // A fixture where the gap is strict: the importance table wants no
    // activations at all (A empty), yet the best cut set still merges at
    // the midpoint because the two halves sum to 2 ticks while the single
    // full merge costs 10.
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let cost = CostTable::from_path(&data.join("gap_toy.latency.csv"), 2)?;
    let imp = BaseImportance::from_path(&data.join("gap_toy.importance.csv"), 2)?;
    let (ticks, budget) = discretize(&cost, 11.0, 1)?;
    let plan = solve_base(&ticks, &imp, budget)?;
    let lat_s = merge_latency_of(&ticks, &plan.s, 0, 2).unwrap();
    let lat_a = merge_latency_of(&ticks, &plan.a, 0, 2).unwrap();
    println!(
        "\ngap fixture: A={:?} S={:?}; merging by S takes {lat_s} ticks, merging by A alone {lat_a}",
        plan.a, plan.s
    );
    Ok(())
}
