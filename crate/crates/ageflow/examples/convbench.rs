use ageflow::numerics::{ops, Rng, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(1);
    // scale-0 coupling conv2: 64ch -> 64ch, 16x16 spatial, 3x3
    let x: Tensor<f32> = rng.normal_tensor(&[64, 16, 16], 1.0);
    let k: Tensor<f32> = rng.normal_tensor(&[64, 64, 3, 3], 0.1);
    let b: Tensor<f32> = rng.normal_tensor(&[64], 0.1);
    let iters = 2000;
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let y = ops::conv2d(&x, &k, &b, 1).unwrap();
        sink += y.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (64 * 64 * 9 * 256) as f64 * iters as f64;
    println!("fwd: {:.3}s  {:.2} GFLOP/s (sink {sink})", dt, 2.0 * macs / dt / 1e9);

    let dy: Tensor<f32> = rng.normal_tensor(&[64, 16, 16], 1.0);
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let (dx, dw, db) = ops::conv2d_backward(&x, &k, 1, &dy);
        sink += dx.data()[0] + dw.data()[0] + db.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("bwd: {:.3}s  {:.2} GFLOP/s (sink {sink})", dt, 2.0 * 2.0 * macs / dt / 1e9);
}
