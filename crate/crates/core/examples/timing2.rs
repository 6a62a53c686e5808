use std::time::Instant;
use invrender::autodiff::Tape;
use invrender::field::{FieldConfig, FieldNetwork};
use invrender::params::ParamStore;
use invrender::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut store = ParamStore::new();
    let field = FieldNetwork::new(FieldConfig::small(24), 7, &mut store);
    let n = 6144; // one patch worth of samples
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = Tensor::zeros(n, 3);
    for r in 0..n { for c in 0..3 { x.set(r, c, rng.gen_range(0.3..0.7)); } }

    // density eval without spatial grad
    let t = Instant::now();
    let mut tape = Tape::<f64>::new();
    let b = store.bind(&mut tape);
    let xn = tape.constant(x.clone());
    let ev = field.eval_density(&mut tape, &b, xn, false);
    println!("density fwd (no grad): {} ms, {} nodes", t.elapsed().as_millis(), tape.len());
    let t = Instant::now();
    let s = tape.sum_all(ev.sigma);
    let _g = tape.backward(s);
    println!("density bwd: {} ms", t.elapsed().as_millis());

    // with spatial grad (second-order path)
    let t = Instant::now();
    let mut tape = Tape::<f64>::new();
    let b = store.bind(&mut tape);
    let xn = tape.constant(x.clone());
    let ev = field.eval_density(&mut tape, &b, xn, true);
    println!("density fwd (with dsigma/dx): {} ms, {} nodes", t.elapsed().as_millis(), tape.len());
    let t = Instant::now();
    let s = tape.sum_all(ev.dsigma_dx.unwrap());
    let _g = tape.backward(s);
    println!("second-order bwd: {} ms", t.elapsed().as_millis());

    // radiance head
    let t = Instant::now();
    let mut tape = Tape::<f64>::new();
    let b = store.bind(&mut tape);
    let xn = tape.constant(x.clone());
    let ev = field.eval_density(&mut tape, &b, xn, false);
    let dirs = tape.constant(Tensor::full(n, 3, 0.57735));
    let rad = field.eval_radiance(&mut tape, &b, ev.trunk, dirs);
    let s = tape.sum_all(rad);
    let _ = tape.backward(s);
    println!("density+radiance fwd+bwd: {} ms, {} nodes", t.elapsed().as_millis(), tape.len());

    // store binding cost
    let t = Instant::now();
    for _ in 0..10 { let mut tape = Tape::<f64>::new(); let _b = store.bind(&mut tape); }
    println!("bind only: {} ms per bind", t.elapsed().as_millis() as f64 / 10.0);
}
