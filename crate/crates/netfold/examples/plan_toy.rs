//! Solves the three-layer toy planning instance step by step: loads the
//! latency and importance tables, discretizes the budget, and prints the
//! chosen activation set A and merge-cut set S.
//!
//! Run with: cargo run --example plan_toy

use netfold::cost::discretize;
use netfold::dp::{merge_latency_of, optimal_latency};
use netfold::{solve_base, BaseImportance, CostTable};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let l = 3;
    let cost = CostTable::from_path(&data.join("dp_toy.latency.csv"), l)?;
    let imp = BaseImportance::from_path(&data.join("dp_toy.importance.csv"), l)?;

    // 1 tick per ms keeps the numbers readable
    let (ticks, budget) = discretize(&cost, 21.0, 1)?;
    println!("budget: {budget} ticks");

    let lat_dp = optimal_latency(&ticks)?;
    println!(
        "fastest possible: {} ticks via cuts {:?}",
        lat_dp.t_opt(0, l).unwrap(),
        lat_dp.s_opt(0, l)
    );

    let plan = solve_base(&ticks, &imp, budget)?;
    println!("A = {:?}  (activations kept)", plan.a);
    println!("S = {:?}  (merge cuts; a superset of A)", plan.s);
    println!("importance: {:.3}", plan.predicted_importance);
    println!(
        "latency:    {} ticks (recomputed: {})",
        plan.predicted_latency_ms,
        merge_latency_of(&ticks, &plan.s, 0, l).unwrap()
    );
    Ok(())
}
