//! Loads the shipped MobileNetV2-1.0 description, validates it, and
//! prints the shape trace plus the feasible-block counts that bound the
//! planner's search space.
//!
//! Run with: cargo run --example describe_network

use netfold::cost::{feasible_importance_blocks, feasible_latency_blocks};
use netfold::net::{shape_trace, validate_network};
use netfold::NetworkSpec;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mobilenetv2_1_0.json");
    let net = NetworkSpec::from_path(&path)?;
    validate_network(&net)?;

    println!("layers: {}", net.len());
    println!("skips:  {:?}", net.skips.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>());

    let trace = shape_trace(&net)?;
    for (l, (c, h, w)) in trace.iter().enumerate() {
        let act = if l == 0 {
            "input".to_string()
        } else {
            format!("{:?}", net.activation_at(l)).to_lowercase()
        };
        println!("  boundary {l:2}: {c:4} x {h:3} x {w:3}  ({act})");
    }

    let blocks = feasible_latency_blocks(&net, true);
    let ext = feasible_importance_blocks(&net, &blocks);
    println!("feasible latency blocks:            {}", blocks.len());
    println!("extended importance table entries:  {}", ext.len());
    Ok(())
}
