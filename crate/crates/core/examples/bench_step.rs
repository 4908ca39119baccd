// SPDX-License-Identifier: Apache-2.0

//! Times one forward and backward pass of the small network.
//!
//! `cargo run --release --example bench_step -- <height> <width> <channel divisor>`

use std::time::Instant;

use hdseg_core::model::{Mode, Model, ModelConfig};
use hdseg_core::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let [h, w, div] = args[..] else {
        eprintln!("usage: bench_step <height> <width> <channel divisor>");
        std::process::exit(2);
    };
    let mut cfg = ModelConfig::scaled(div, 5);
    for (s, d) in cfg.encoder.iter_mut().zip([2, 2, 3, 3, 4]) {
        s.depth = d;
    }
    let m = Model::new(cfg, 0).expect("valid config");
    println!("parameters {}", m.params.trainable_count());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[1, 5, h, w], -1.0, 1.0, &mut rng);
    for _ in 0..3 {
        let t = Instant::now();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, xv, Mode::Train, &mut rng).expect("forward");
        let fwd = t.elapsed();
        let l = g.mean(out.logits);
        g.backward(l).expect("backward");
        println!("forward {fwd:?}, forward + backward {:?}", t.elapsed());
    }
}
