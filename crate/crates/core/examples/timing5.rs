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
    let n = 6144;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = Tensor::zeros(n, 3);
    for r in 0..n { for c in 0..3 { x.set(r, c, rng.gen_range(0.3..0.7)); } }

    let mut tape = Tape::<f64>::new();
    let b = store.bind(&mut tape);
    let xn = tape.constant(x.clone());
    let t = Instant::now();
    let ev = field.eval_density(&mut tape, &b, xn, false);
    println!("density fwd: {} ms", t.elapsed().as_millis());
    let dirs = tape.constant(Tensor::full(n, 3, 0.57735));
    let t = Instant::now();
    let rad = field.eval_radiance(&mut tape, &b, ev.trunk, dirs);
    println!("radiance fwd: {} ms ({} nodes)", t.elapsed().as_millis(), tape.len());
    let t = Instant::now();
    let brdf = field.eval_brdf(&mut tape, &b, ev.trunk, &vec![0usize; n]);
    println!("brdf fwd: {} ms ({} nodes)", t.elapsed().as_millis(), tape.len());
    let t = Instant::now();
    let s1 = tape.sum_all(rad);
    let s2 = tape.sum_all(brdf.basecolor);
    let s = tape.add(s1, s2);
    let _g = tape.backward(s);
    println!("bwd (radiance+brdf): {} ms", t.elapsed().as_millis());
}
