use std::time::Instant;
use invrender::tensor::Tensor;

fn main() {
    let m = 6144; let k = 64; let n = 64;
    let a = Tensor::full(m, k, 1.000001f64);
    let b = Tensor::full(k, n, 0.999999f64);
    // warmup
    let _ = a.matmul(&b);
    let t = Instant::now();
    let iters = 20;
    for _ in 0..iters { std::hint::black_box(a.matmul(&b)); }
    let el = t.elapsed().as_secs_f64() / iters as f64;
    let flops = 2.0 * m as f64 * k as f64 * n as f64;
    println!("matmul {}x{}x{}: {:.2} ms, {:.2} GFLOP/s", m, k, n, el * 1e3, flops / el / 1e9);

    let mut out = Tensor::zeros(k, n);
    let b2 = Tensor::full(m, n, 0.5f64);
    let t = Instant::now();
    for _ in 0..iters { Tensor::matmul_at_b_into(&a, &b2, &mut out); }
    let el = t.elapsed().as_secs_f64() / iters as f64;
    println!("at_b: {:.2} ms, {:.2} GFLOP/s", el * 1e3, flops / el / 1e9);

    let b3 = Tensor::full(n, k, 0.5f64);
    let mut out2 = Tensor::zeros(m, n);
    let t = Instant::now();
    for _ in 0..iters { Tensor::matmul_a_bt_into(&a, &b3, &mut out2); }
    let el = t.elapsed().as_secs_f64() / iters as f64;
    println!("a_bt: {:.2} ms, {:.2} GFLOP/s", el * 1e3, flops / el / 1e9);
}
