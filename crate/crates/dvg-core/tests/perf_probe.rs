//! Throughput probe for the kernels behind a training step. Ignored by
//! default; run with `cargo test -p dvg-core --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use dvg_core::nn::{Activation, LayerSpec, Mlp};
use dvg_core::rng::RandomSource;
use dvg_core::tape::Tape;
use dvg_core::tensor::Tensor;

#[test]
#[ignore]
fn forward_backward_throughput() {
    let mut rng = RandomSource::from_master(1).derive("probe");
    let enc = Mlp::new(
        1024,
        &[
            LayerSpec::plain(256, Activation::LeakyRelu(0.2)),
            LayerSpec::plain(128, Activation::LeakyRelu(0.2)),
            LayerSpec::plain(64, Activation::Linear),
        ],
        &mut rng,
    );
    let dec = Mlp::new(
        64,
        &[
            LayerSpec::plain(128, Activation::LeakyRelu(0.2)),
            LayerSpec::plain(256, Activation::LeakyRelu(0.2)),
            LayerSpec::plain(2048, Activation::Sigmoid),
        ],
        &mut rng,
    );
    let batch = 32;
    let x = Tensor::new(
        &[batch, 1024],
        (0..batch * 1024).map(|i| (i % 97) as f64 / 97.0).collect(),
    );

    // MACs per forward+backward of this stack, assuming backward costs twice
    // the forward for every layer that needs both input and weight grads.
    let fwd_macs = (batch * (1024 * 256 + 256 * 128 + 128 * 64)
        + batch * (64 * 128 + 128 * 256 + 256 * 2048)) as f64;
    let total_macs = fwd_macs * 3.0;

    let iters = 30;
    let start = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let tape = Tape::new();
        let be = enc.bind(&tape, true);
        let bd = dec.bind(&tape, true);
        let h = be.forward(tape.constant(x.clone()));
        let out = bd.forward(h.slice(1, 0, 64));
        let loss = out.square().mean_all();
        sink += loss.item();
        let grads = tape.backward(loss).unwrap();
        sink += grads.wrt(be.param_vars()[0]).data()[0];
    }
    let dt = start.elapsed().as_secs_f64();
    let gflops = total_macs * 2.0 * iters as f64 / dt / 1e9;
    println!("sink {sink:.3}: {iters} iters in {dt:.3}s -> {gflops:.2} GFLOP/s");
}
