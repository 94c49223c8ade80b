//! Extended planning: when the network already contains identity
//! activations (as inverted-residual blocks do around their projection
//! layers), importances carry per-edge activation bits and the solver
//! additionally returns B, the set of positions whose original
//! activation survives into the importance measurement.
//!
//! Run with: cargo run --example extended_plan

use netfold::cost::{
    discretize, feasible_latency_blocks, synthesize_latency, synthetic_importance_ext,
    LatencyModelParams,
};
use netfold::{solve_extended, NetworkSpec};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny_irb.json");
    let net = NetworkSpec::from_path(&path)?;
    let l = net.len();

    let identity_at: Vec<usize> = (1..l)
        .filter(|&b| net.activation_at(b) == netfold::net::ActivationKind::Identity)
        .collect();
    println!("identity activations at interior boundaries: {identity_at:?}");

    let blocks = feasible_latency_blocks(&net, true);
    let params = LatencyModelParams {
        mac_cost: 1e-9,
        layer_overhead: 0.05,
    };
    let cost = synthesize_latency(&net, &blocks, &params)?;
    let imp = synthetic_importance_ext(&net, &blocks, 3);
    println!("importance entries with edge bits: {}", imp.entries.len());

    let total: f64 = (1..=l).map(|x| cost.get(x - 1, x).unwrap()).sum();
    let (ticks, budget) = discretize(&cost, 0.8 * total, 100)?;
    let plan = solve_extended(&ticks, &imp, budget)?;
    println!("A = {:?}", plan.a);
    println!("B = {:?}  (positions evaluated with their original activation)", plan.b);
    println!("S = {:?}", plan.s);
    println!(
        "importance {:.4}, latency {:.4} ms under {:.4} ms",
        plan.predicted_importance, plan.predicted_latency_ms, plan.budget_ms
    );
    Ok(())
}
