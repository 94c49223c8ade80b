//! Merges two stride-1 3x3 convolutions into one 5x5 and checks the
//! result against the naive forward pass, including the padding
//! reordering that makes the merge exact at the boundary.
//!
//! Run with: cargo run --example merge_two_convs

use netfold::merge::{forward_conv, forward_network, random_weights, reorder_padding};
use netfold::net::{ActivationKind, ConvLayer, InputShape};
use netfold::{NetworkSpec, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layer = ConvLayer {
        in_channels: 3,
        out_channels: 3,
        kernel_size: 3,
        stride: 1,
        padding: 1,
        groups: 1,
        has_bias: true,
        bn: None,
        activation: ActivationKind::Identity,
    };
    let net = NetworkSpec {
        input: InputShape {
            channels: 3,
            height: 8,
            width: 8,
        },
        layers: vec![layer.clone(), layer],
        skips: vec![],
    };
    let weights = random_weights::<f64>(&net, 1);

    let merged = netfold::merge::merge_segment(&net, &weights, 0, 2)?;
    println!(
        "merged kernel: {}x{} stride {} padding {}",
        merged.kernel.kh, merged.kernel.kw, merged.stride, merged.padding
    );

    // padding moves to the front: (1,1) becomes (2,0)
    let mut reordered = net.clone();
    let pads = reorder_padding(&reordered.layers);
    println!("reordered padding: {pads:?}");
    for (l, p) in reordered.layers.iter_mut().zip(pads) {
        l.padding = p;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = Tensor4::<f64>::zeros(1, 3, 8, 8);
    for v in &mut x.data {
        *v = StandardNormal.sample(&mut rng);
    }

    let sequential = forward_network(&reordered, &weights, &x)?;
    let one_shot = forward_conv(&x, &merged.kernel, merged.stride, merged.padding)?;
    let max_diff = sequential
        .data
        .iter()
        .zip(&one_shot.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max |sequential - merged| = {max_diff:.3e}");
    assert!(max_diff <= 1e-12);
    Ok(())
}
