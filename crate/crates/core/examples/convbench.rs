//! Times one 256 -> 256 channel 3x3 convolution on a 64x64 map.
//!
//! `cargo run --release -p panoflow-core --example convbench`

use std::time::Instant;

use panoflow_core::tensor::{conv2d, ConvParams, Dims, Tensor};

fn main() {
    let x = Tensor::from_fn(Dims::new(1, 256, 64, 64), |_, c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 * 0.1);
    let w = Tensor::from_fn(Dims::new(256, 256, 3, 3), |o, i, y, x| ((o + i * 3 + y + x) % 5) as f32 * 0.01);
    let params = ConvParams::new(w, vec![0.0; 256]).unwrap();
    let start = Instant::now();
    let y = conv2d(&x, &params, 1, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let macs = 64.0 * 64.0 * 256.0 * 256.0 * 9.0;
    println!("mean {:.6} in {secs:.3} s, {:.2} GMAC/s", y.mean(), macs / secs / 1e9);
}
