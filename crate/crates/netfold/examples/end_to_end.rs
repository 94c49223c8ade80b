//! Full pipeline in library form on the small inverted-residual network:
//! synthesize cost tables, plan under a budget, apply the plan to random
//! weights, and verify the merged network computes the same function.
//!
//! Run with: cargo run --example end_to_end

use netfold::cost::{
    discretize, feasible_latency_blocks, synthesize_latency, synthetic_importance_base,
    LatencyModelParams,
};
use netfold::merge::{apply_plan, random_weights, verify_equivalence};
use netfold::net::validate_network;
use netfold::{solve_base, NetworkSpec};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny_irb.json");
    let net = NetworkSpec::from_path(&path)?;
    validate_network(&net)?;
    println!("network: {} layers, {} skips", net.len(), net.skips.len());

    // analytic latency model + seeded synthetic importances
    let blocks = feasible_latency_blocks(&net, true);
    let params = LatencyModelParams {
        mac_cost: 1e-9,
        layer_overhead: 0.05,
    };
    let cost = synthesize_latency(&net, &blocks, &params)?;
    let imp = synthetic_importance_base(&blocks, net.len(), 7);

    let budget_ms = 0.9 * (1..=net.len()).map(|l| cost.get(l - 1, l).unwrap()).sum::<f64>();
    let (ticks, budget) = discretize(&cost, budget_ms, 100)?;
    let plan = solve_base(&ticks, &imp, budget)?;
    println!(
        "plan under {budget_ms:.3} ms: A={:?} S={:?}, predicted {:.4} ms",
        plan.a, plan.s, plan.predicted_latency_ms
    );

    let weights = random_weights::<f64>(&net, 11);
    let applied = apply_plan(&net, &weights, &plan)?;
    println!(
        "merged network: {} layers (down from {})",
        applied.merged_net.len(),
        net.len()
    );

    let report = verify_equivalence(
        &applied.prepared_net,
        &applied.prepared_weights,
        &applied.merged_net,
        &applied.merged_weights,
        5,
        0,
    )?;
    println!(
        "verification over {} trials: max abs diff {:.3e}",
        report.trials, report.max_abs_diff
    );
    assert!(report.passes(true));
    Ok(())
}
