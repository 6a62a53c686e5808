use std::time::Instant;
use invrender::autodiff::Tape;
use invrender::cameras::generate_rays;
use invrender::render::{render_rays, RenderSettings, SCENE_RADIUS};
use invrender::scenegen::load_dataset;
use invrender::trainer::{FieldScale, TrainConfig, TrainState};
use invrender::tensor::Tensor;
use invrender::losses;

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
    let st = TrainState::new(ds, cfg).unwrap();

    let side = 16usize;
    let n_rays = side * side;
    let pixels: Vec<(f64, f64)> = (0..n_rays)
        .map(|i| ((i % side) as f64 + 10.5, (i / side) as f64 + 10.5))
        .collect();
    let pose = st.pose_of(0);

    for round in 0..2 {
        let t0 = Instant::now();
        let mut tape = Tape::<f64>::new();
        let binding = st.store.bind(&mut tape);
        let nodes = invrender::cameras::PoseNodes {
            delta_eye: tape.constant(Tensor::new(1, 3, pose.delta_eye.to_vec())),
            delta_dir: tape.constant(Tensor::new(1, 2, pose.delta_dir.to_vec())),
            roll: tape.constant(Tensor::scalar(pose.roll)),
            focal: tape.constant(Tensor::scalar(pose.focal)),
        };
        let frame = invrender::cameras::frame_nodes(&mut tape, &pose, &nodes).unwrap();
        let rays = generate_rays(&mut tape, &pose, &frame, &pixels).unwrap();
        let t1 = Instant::now();
        let settings = RenderSettings { samples_per_ray: 24, radius: SCENE_RADIUS, lambda_blend: 1.0, jitter: true };
        let render = render_rays(&mut tape, &st.field, &binding, None, &rays, 0, &settings, 123).unwrap();
        let t2 = Instant::now();
        let gt_img = Tensor::full(n_rays, 3, 0.3);
        let gt_mask = Tensor::full(n_rays, 1, 0.6);
        let (im, _f) = losses::multiscale_patch_loss(&mut tape, render.rgb, &gt_img, side);
        let parts = losses::mask_loss(&mut tape, render.alpha, render.rgb, &gt_mask, side);
        let t3 = Instant::now();
        let l1 = tape.add(im, parts.bce);
        let l2 = tape.add(l1, parts.silhouette);
        let loss = tape.add(l2, parts.background);
        let g = tape.backward(loss);
        std::hint::black_box(&g);
        if round == 1 {
            let prof = tape.backward_profiled(loss);
            for (k, t, n) in prof.iter().take(12) {
                println!("  {k}: {:.1} ms over {n} nodes", t * 1e3);
            }
        }
        let t4 = Instant::now();
        if round == 1 {
            println!("rays: {:.1} ms", (t1 - t0).as_secs_f64() * 1e3);
            println!("render fwd: {:.1} ms ({} nodes)", (t2 - t1).as_secs_f64() * 1e3, tape.len());
            println!("losses fwd: {:.1} ms", (t3 - t2).as_secs_f64() * 1e3);
            println!("backward: {:.1} ms", (t4 - t3).as_secs_f64() * 1e3);
        }
    }
}
