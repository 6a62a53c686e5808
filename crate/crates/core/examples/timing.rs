use std::time::Instant;
use invrender::scenegen::load_dataset;
use invrender::trainer::{TrainConfig, TrainState, FieldScale};

fn main() {
    let ds = load_dataset(std::path::Path::new("/tmp/bench/data")).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.total_steps = 5000;
    cfg.field_scale = FieldScale::Small;
    cfg.freeze_poses = true;
    cfg.holdout = 4;
    cfg.res_start = 64;
    cfg.res_end = 64;
    cfg.seed = 7;
    let mut st = TrainState::new(ds, cfg).unwrap();
    // phase 1: radiance-only scattered rays
    let t = Instant::now();
    for _ in 0..10 { st.train_step().unwrap(); }
    println!("early (radiance, scattered): {:.0} ms/step", t.elapsed().as_millis() as f64 / 10.0);
    // jump to full shading + patches
    st.step = 2000;
    let t = Instant::now();
    for _ in 0..10 { st.train_step().unwrap(); }
    println!("late (shaded, patches): {:.0} ms/step", t.elapsed().as_millis() as f64 / 10.0);
    // full-image render cost
    let t = Instant::now();
    let _ = st.render_image(0, 64, 0.0).unwrap();
    println!("render_image 64x64 shaded: {:.0} ms", t.elapsed().as_millis());
}
