use std::time::Instant;
use invrender::encoding::{HashGrid, HashGridConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = HashGridConfig::new(8, 15, 2, 8, 128);
    let mut grid = HashGrid::<f64>::new(cfg, 3);
    grid.set_alpha(8.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 6144;
    let xs: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let _ = grid.spans(&xs);
    let t = Instant::now();
    let iters = 10;
    for _ in 0..iters { std::hint::black_box(grid.spans(&xs)); }
    println!("spans {} samples x 8 levels: {:.2} ms", n, t.elapsed().as_secs_f64() * 1e3 / iters as f64);
}
