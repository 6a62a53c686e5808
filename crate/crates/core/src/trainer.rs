//! The optimization loop: three Adam optimizers, schedules, the multiplex
//! lifecycle, importance weighting, checkpointing, and the held-out-view
//! protocol.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::cameras::{
    frame_nodes, generate_rays, project_points, quadrant_init, spawn_multiplex, CameraPose,
    LossBuffer, PoseNodes, MULTIPLEX_BUFFER_CAPACITY,
};
use crate::error::{InvrenderError, Result};
use crate::field::{FieldConfig, FieldNetwork};
use crate::losses::{
    self, ConsistencyPair, LossReport, GRID_DECAY_WEIGHT, IMPORTANCE_LAMBDA_P, MULTIPLEX_WEIGHT,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::render::{
    illum_nodes, register_illumination, render_rays, IlluminationParams, RenderSettings,
    ILLUM_LOBES, SCENE_RADIUS,
};
use crate::scenegen::{eye_of_pose, resize_bilinear, Dataset, PlainIllum};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Ground-truth poses from `poses_gt.txt`.
    Gt,
    /// Jittered poses from `poses_init.txt`.
    File,
    /// Quadrant-center initialization from the labels alone.
    Quadrant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldScale {
    Tiny,
    Small,
    Desk,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub lr_network: f64,
    pub lr_grid: f64,
    pub lr_camera: f64,
    /// Global-norm clip for camera gradients.
    pub camera_clip: f64,
    /// Network gradients are rescaled to this global norm.
    pub network_grad_scale: f64,
    pub grid_decay: f64,
    /// Initial multiplex size m.
    pub multiplex: usize,
    pub multiplex_jitter_deg: f64,
    pub seed: u64,
    /// Supervision resolution ramp, long image side.
    pub res_start: usize,
    pub res_end: usize,
    /// Phase fractions: must satisfy 0 < focal < anneal < ramp <= 1.
    pub frac_anneal: f64,
    pub frac_ramp: f64,
    pub frac_focal: f64,
    pub patch_side: usize,
    pub patches_per_step: usize,
    /// Steps of scattered random-ray sampling before patches start.
    pub random_ray_steps: usize,
    pub samples_per_ray: usize,
    /// Negate the tanh argument in the camera importance update (see the
    /// sign discussion in the importance-scale docs).
    pub camera_importance_sign: bool,
    pub lambda_ndir: f64,
    pub lambda_smooth: f64,
    pub lambda_lookat: f64,
    pub lambda_bounds: f64,
    pub lambda_offset: f64,
    pub camera_lr_decay_steps: usize,
    /// Eye-distance shell for the bounds regularizer.
    pub r_min: f64,
    pub r_max: f64,
    pub init_mode: InitMode,
    /// Eye distance used by quadrant initialization.
    pub init_radius: f64,
    /// Number of trailing views held out from training.
    pub holdout: usize,
    pub field_scale: FieldScale,
    /// Keep all camera parameters frozen (ground-truth pose training).
    pub freeze_poses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 5000,
            lr_network: 1e-3,
            lr_grid: 1e-3,
            lr_camera: 1e-3,
            camera_clip: 2.5,
            network_grad_scale: 0.1,
            grid_decay: GRID_DECAY_WEIGHT,
            multiplex: 1,
            multiplex_jitter_deg: 20.0,
            seed: 0,
            res_start: 100,
            res_end: 400,
            frac_anneal: 1.0 / 3.0,
            frac_ramp: 0.5,
            frac_focal: 0.25,
            patch_side: 16,
            patches_per_step: 4,
            random_ray_steps: 1000,
            samples_per_ray: 24,
            camera_importance_sign: false,
            lambda_ndir: 3e-4,
            lambda_smooth: 1e-3,
            lambda_lookat: 0.1,
            lambda_bounds: 1.0,
            lambda_offset: 0.01,
            camera_lr_decay_steps: 40_000,
            r_min: 1.5,
            r_max: 4.5,
            init_mode: InitMode::Gt,
            init_radius: 2.8,
            holdout: 0,
            field_scale: FieldScale::Small,
            freeze_poses: false,
        }
    }
}

fn bad_config(msg: impl Into<String>) -> InvrenderError {
    InvrenderError::Config(msg.into())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(bad_config("total_steps must be positive"));
        }
        if !(self.frac_focal > 0.0
            && self.frac_focal < self.frac_anneal
            && self.frac_anneal < self.frac_ramp
            && self.frac_ramp <= 1.0)
        {
            return Err(bad_config(
                "phase fractions must satisfy 0 < frac_focal < frac_anneal < frac_ramp <= 1",
            ));
        }
        if self.patch_side < 4 {
            return Err(bad_config("patch_side must be at least 4"));
        }
        if self.multiplex == 0 {
            return Err(bad_config("multiplex size must be at least 1"));
        }
        if self.samples_per_ray < 2 {
            return Err(bad_config("samples_per_ray must be at least 2"));
        }
        if self.res_start > self.res_end {
            return Err(bad_config("res_start must not exceed res_end"));
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let err = |what: &str| bad_config(format!("bad value `{v}` for `{what}`"));
        macro_rules! num {
            ($field:ident) => {
                self.$field = v.parse().map_err(|_| err(stringify!($field)))?
            };
        }
        match key.trim() {
            "total_steps" => num!(total_steps),
            "lr_network" => num!(lr_network),
            "lr_grid" => num!(lr_grid),
            "lr_camera" => num!(lr_camera),
            "camera_clip" => num!(camera_clip),
            "network_grad_scale" => num!(network_grad_scale),
            "grid_decay" => num!(grid_decay),
            "multiplex" => num!(multiplex),
            "multiplex_jitter_deg" => num!(multiplex_jitter_deg),
            "seed" => num!(seed),
            "res_start" => num!(res_start),
            "res_end" => num!(res_end),
            "frac_anneal" => num!(frac_anneal),
            "frac_ramp" => num!(frac_ramp),
            "frac_focal" => num!(frac_focal),
            "patch_side" => num!(patch_side),
            "patches_per_step" => num!(patches_per_step),
            "random_ray_steps" => num!(random_ray_steps),
            "samples_per_ray" => num!(samples_per_ray),
            "camera_importance_sign" => num!(camera_importance_sign),
            "lambda_ndir" => num!(lambda_ndir),
            "lambda_smooth" => num!(lambda_smooth),
            "lambda_lookat" => num!(lambda_lookat),
            "lambda_bounds" => num!(lambda_bounds),
            "lambda_offset" => num!(lambda_offset),
            "camera_lr_decay_steps" => num!(camera_lr_decay_steps),
            "r_min" => num!(r_min),
            "r_max" => num!(r_max),
            "init_radius" => num!(init_radius),
            "holdout" => num!(holdout),
            "freeze_poses" => num!(freeze_poses),
            "init_mode" => {
                self.init_mode = match v {
                    "gt" => InitMode::Gt,
                    "file" => InitMode::File,
                    "quadrant" => InitMode::Quadrant,
                    _ => return Err(err("init_mode (gt|file|quadrant)")),
                }
            }
            "field_scale" => {
                self.field_scale = match v {
                    "tiny" => FieldScale::Tiny,
                    "small" => FieldScale::Small,
                    "desk" => FieldScale::Desk,
                    _ => return Err(err("field_scale (tiny|small|desk)")),
                }
            }
            k => return Err(bad_config(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Parse a plain-text `key = value` config (`#` comments allowed).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                bad_config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let init = match self.init_mode {
            InitMode::Gt => "gt",
            InitMode::File => "file",
            InitMode::Quadrant => "quadrant",
        };
        let scale = match self.field_scale {
            FieldScale::Tiny => "tiny",
            FieldScale::Small => "small",
            FieldScale::Desk => "desk",
        };
        let mut s = String::new();
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "lr_network = {:e}", self.lr_network);
        let _ = writeln!(s, "lr_grid = {:e}", self.lr_grid);
        let _ = writeln!(s, "lr_camera = {:e}", self.lr_camera);
        let _ = writeln!(s, "camera_clip = {:e}", self.camera_clip);
        let _ = writeln!(s, "network_grad_scale = {:e}", self.network_grad_scale);
        let _ = writeln!(s, "grid_decay = {:e}", self.grid_decay);
        let _ = writeln!(s, "multiplex = {}", self.multiplex);
        let _ = writeln!(s, "multiplex_jitter_deg = {:e}", self.multiplex_jitter_deg);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "res_start = {}", self.res_start);
        let _ = writeln!(s, "res_end = {}", self.res_end);
        let _ = writeln!(s, "frac_anneal = {:.17e}", self.frac_anneal);
        let _ = writeln!(s, "frac_ramp = {:.17e}", self.frac_ramp);
        let _ = writeln!(s, "frac_focal = {:.17e}", self.frac_focal);
        let _ = writeln!(s, "patch_side = {}", self.patch_side);
        let _ = writeln!(s, "patches_per_step = {}", self.patches_per_step);
        let _ = writeln!(s, "random_ray_steps = {}", self.random_ray_steps);
        let _ = writeln!(s, "samples_per_ray = {}", self.samples_per_ray);
        let _ = writeln!(s, "camera_importance_sign = {}", self.camera_importance_sign);
        let _ = writeln!(s, "lambda_ndir = {:e}", self.lambda_ndir);
        let _ = writeln!(s, "lambda_smooth = {:e}", self.lambda_smooth);
        let _ = writeln!(s, "lambda_lookat = {:e}", self.lambda_lookat);
        let _ = writeln!(s, "lambda_bounds = {:e}", self.lambda_bounds);
        let _ = writeln!(s, "lambda_offset = {:e}", self.lambda_offset);
        let _ = writeln!(s, "camera_lr_decay_steps = {}", self.camera_lr_decay_steps);
        let _ = writeln!(s, "r_min = {:e}", self.r_min);
        let _ = writeln!(s, "r_max = {:e}", self.r_max);
        let _ = writeln!(s, "init_mode = {init}");
        let _ = writeln!(s, "init_radius = {:e}", self.init_radius);
        let _ = writeln!(s, "holdout = {}", self.holdout);
        let _ = writeln!(s, "field_scale = {scale}");
        let _ = writeln!(s, "freeze_poses = {}", self.freeze_poses);
        s
    }

    fn field_config(&self, num_images: usize) -> FieldConfig {
        match self.field_scale {
            FieldScale::Tiny => FieldConfig::tiny(num_images),
            FieldScale::Small => FieldConfig::small(num_images),
            FieldScale::Desk => FieldConfig::desk(num_images),
        }
    }
}

// ---------------------------------------------------------------------------
// Schedule

#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    /// Non-linear loss-scaling fade (drives the BRDF-init loss), 1 → 0 over
    /// the annealing phase as a smoothstep (shape read from a figure).
    pub lambda_a: f64,
    /// Radiance→BRDF blend, 1 → 0 linearly over the annealing phase.
    pub lambda_b: f64,
    /// Coarse-to-fine clock over the first half (resolution & multiplex).
    pub lambda_c: f64,
    /// Encoding annealing progress in [0, 1].
    pub alpha_progress: f64,
    /// Supervision resolution (long image side).
    pub resolution: usize,
    /// Active multiplex size.
    pub multiplex_size: usize,
    pub focal_unlocked: bool,
    pub importance_active: bool,
    /// Patch sampling after the initial random-ray phase.
    pub patch_phase: bool,
}

pub fn schedule_at(step: usize, cfg: &TrainConfig) -> Schedule {
    let t = (step as f64 / cfg.total_steps as f64).clamp(0.0, 1.0);
    let u = (t / cfg.frac_anneal).min(1.0);
    let smooth = u * u * (3.0 - 2.0 * u);
    let lambda_c = (t / cfg.frac_ramp).min(1.0);
    let m = cfg.multiplex;
    let multiplex_size = (m - (((m - 1) as f64) * lambda_c).floor() as usize).max(1);
    let resolution =
        cfg.res_start + (((cfg.res_end - cfg.res_start) as f64) * lambda_c).round() as usize;
    Schedule {
        lambda_a: 1.0 - smooth,
        lambda_b: 1.0 - u,
        lambda_c,
        alpha_progress: u,
        resolution,
        multiplex_size,
        focal_unlocked: t >= cfg.frac_focal,
        importance_active: t >= cfg.frac_anneal / 2.0,
        patch_phase: step >= cfg.random_ray_steps,
    }
}

// ---------------------------------------------------------------------------
// State

#[derive(Clone, Copy, Debug)]
pub struct CamParamIds {
    pub delta_eye: ParamId,
    pub delta_dir: ParamId,
    pub roll: ParamId,
}

#[derive(Clone, Debug)]
pub struct MemberState {
    /// Index the member was spawned with (stable across fades; keys the
    /// parameter names).
    pub orig: usize,
    pub pose: CameraPose<f64>,
    pub losses: LossBuffer,
    pub ids: CamParamIds,
}

#[derive(Clone, Debug)]
pub struct ViewState {
    pub members: Vec<MemberState>,
    pub focal: ParamId,
    pub illum: IlluminationParams,
    pub s_q: f64,
    pub native_w: usize,
    pub native_h: usize,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub store: ParamStore<f64>,
    pub field: FieldNetwork<f64>,
    pub views: Vec<ViewState>,
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
    pub adam_network: Adam<f64>,
    pub adam_grid: Adam<f64>,
    pub adam_camera: Adam<f64>,
    pub step: usize,
    resize_cache: HashMap<(usize, usize), (Vec<f64>, Vec<f64>)>,
}

impl TrainState {
    pub fn new(dataset: Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = dataset.views.len();
        if config.holdout >= n {
            return Err(bad_config("holdout must leave at least one training view"));
        }
        let mut store = ParamStore::new();
        let field = FieldNetwork::new(config.field_config(n), config.seed, &mut store);

        let mut views = Vec::with_capacity(n);
        for (vi, dv) in dataset.views.iter().enumerate() {
            let base: CameraPose<f64> = match config.init_mode {
                InitMode::Gt => {
                    let m = dv.gt_pose.ok_or_else(|| {
                        bad_config(format!("view `{}` has no ground-truth pose", dv.name))
                    })?;
                    CameraPose::new(eye_of_pose(&m), dv.width, dv.height)
                }
                InitMode::File => {
                    let m = dv.init_pose.ok_or_else(|| {
                        bad_config(format!("view `{}` has no initial pose", dv.name))
                    })?;
                    CameraPose::new(eye_of_pose(&m), dv.width, dv.height)
                }
                InitMode::Quadrant => quadrant_init(
                    dv.quadrant,
                    config.init_radius,
                    0.0,
                    config.seed ^ vi as u64,
                    dv.width,
                    dv.height,
                ),
            };
            let mplex = spawn_multiplex(
                &base,
                config.multiplex,
                config.multiplex_jitter_deg,
                config.seed ^ (vi as u64).wrapping_mul(0x517c_c1b7_2722_0a95),
            );

            let focal = store.add(
                &format!("cam.{vi}.focal"),
                Tensor::scalar(base.focal),
                ParamGroup::Camera,
            );
            let mut members = Vec::new();
            for (k, m) in mplex.members.into_iter().enumerate() {
                let ids = CamParamIds {
                    delta_eye: store.add(
                        &format!("cam.{vi}.{k}.delta_eye"),
                        Tensor::zeros(1, 3),
                        ParamGroup::Camera,
                    ),
                    delta_dir: store.add(
                        &format!("cam.{vi}.{k}.delta_dir"),
                        Tensor::zeros(1, 2),
                        ParamGroup::Camera,
                    ),
                    roll: store.add(
                        &format!("cam.{vi}.{k}.roll"),
                        Tensor::scalar(0.0),
                        ParamGroup::Camera,
                    ),
                };
                members.push(MemberState {
                    orig: k,
                    pose: m.pose,
                    losses: LossBuffer::new(MULTIPLEX_BUFFER_CAPACITY),
                    ids,
                });
            }
            let illum = register_illumination(&mut store, vi, ILLUM_LOBES, config.seed);
            views.push(ViewState {
                members,
                focal,
                illum,
                s_q: 1.0,
                native_w: dv.width,
                native_h: dv.height,
            });
        }

        if config.freeze_poses {
            for id in store.ids() {
                if store.group(id) == ParamGroup::Camera {
                    store.set_frozen(id, true);
                }
            }
        }

        let train_views: Vec<usize> = (0..n - config.holdout).collect();
        let test_views: Vec<usize> = (n - config.holdout..n).collect();
        let adam_network = Adam::new(AdamConfig::network(config.lr_network), ParamGroup::Network, &store);
        let adam_grid = Adam::new(AdamConfig::network(config.lr_grid), ParamGroup::Grid, &store);
        let adam_camera = Adam::new(AdamConfig::camera(config.lr_camera), ParamGroup::Camera, &store);
        Ok(TrainState {
            config,
            dataset,
            store,
            field,
            views,
            train_views,
            test_views,
            adam_network,
            adam_grid,
            adam_camera,
            step: 0,
            resize_cache: HashMap::new(),
        })
    }

    /// Pull the learnable camera offsets from the store into the plain poses.
    fn sync_poses(&mut self) {
        for view in &mut self.views {
            let focal = self.store.get(view.focal).item();
            for m in &mut view.members {
                let de = self.store.get(m.ids.delta_eye);
                m.pose.delta_eye = [de.at(0, 0), de.at(0, 1), de.at(0, 2)];
                let dd = self.store.get(m.ids.delta_dir);
                m.pose.delta_dir = [dd.at(0, 0), dd.at(0, 1)];
                m.pose.roll = self.store.get(m.ids.roll).item();
                m.pose.focal = focal;
                m.pose.clamp_offsets();
            }
        }
    }

    /// Member 0's pose for a view, offsets synced.
    pub fn pose_of(&self, view: usize) -> CameraPose<f64> {
        let v = &self.views[view];
        let mut pose = v.members[0].pose.clone();
        let de = self.store.get(v.members[0].ids.delta_eye);
        pose.delta_eye = [de.at(0, 0), de.at(0, 1), de.at(0, 2)];
        let dd = self.store.get(v.members[0].ids.delta_dir);
        pose.delta_dir = [dd.at(0, 0), dd.at(0, 1)];
        pose.roll = self.store.get(v.members[0].ids.roll).item();
        pose.focal = self.store.get(v.focal).item();
        pose.clamp_offsets();
        pose
    }

    fn scaled_dims(w: usize, h: usize, long: usize) -> (usize, usize) {
        let native_long = w.max(h);
        let long = long.min(native_long); // never upsample past the capture
        let s = long as f64 / native_long as f64;
        (
            ((w as f64 * s).round() as usize).max(1),
            ((h as f64 * s).round() as usize).max(1),
        )
    }

    fn resized_view(&mut self, view: usize, long: usize) -> (usize, usize, Vec<f64>, Vec<f64>) {
        let dv = &self.dataset.views[view];
        let (sw, sh) = Self::scaled_dims(dv.width, dv.height, long);
        if (sw, sh) == (dv.width, dv.height) {
            return (sw, sh, dv.image.clone(), dv.mask.clone());
        }
        let key = (view, long);
        if let Some((img, mask)) = self.resize_cache.get(&key) {
            return (sw, sh, img.clone(), mask.clone());
        }
        let img = resize_bilinear(&dv.image, dv.width, dv.height, 3, sw, sh);
        let mask = resize_bilinear(&dv.mask, dv.width, dv.height, 1, sw, sh);
        self.resize_cache.insert(key, (img.clone(), mask.clone()));
        (sw, sh, img, mask)
    }

    /// Pose copy scaled to a render resolution: intrinsics follow the long
    /// side, focal included.
    fn pose_at_res(pose: &CameraPose<f64>, sw: usize, sh: usize) -> CameraPose<f64> {
        let s = sw as f64 / pose.width as f64;
        let mut p = pose.clone();
        p.width = sw;
        p.height = sh;
        p.focal = pose.focal * s;
        p
    }

    fn pose_nodes_at_res(
        tape: &mut Tape<f64>,
        binding: &Binding,
        ids: &CamParamIds,
        focal: ParamId,
        scale: f64,
    ) -> PoseNodes {
        let f = binding.node(focal);
        let f = tape.mul_const(f, scale);
        PoseNodes {
            delta_eye: binding.node(ids.delta_eye),
            delta_dir: binding.node(ids.delta_dir),
            roll: binding.node(ids.roll),
            focal: f,
        }
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let pool = self.train_views.clone();
        self.step_over(&pool)
    }

    fn step_over(&mut self, pool: &[usize]) -> Result<LossReport> {
        assert!(!pool.is_empty());
        let cfg = self.config.clone();
        let step = self.step;
        // a poisoned parameter would be laundered by the clamps in the
        // forward pass; refuse to build on it
        for id in self.store.ids() {
            if !self.store.get(id).data().iter().all(|v| v.is_finite()) {
                return Err(InvrenderError::NonFiniteStep { step });
            }
        }
        let sched = schedule_at(step, &cfg);
        self.field.set_anneal(sched.alpha_progress);
        self.sync_poses();

        // multiplex fade towards the scheduled size (train views only)
        for &vi in pool {
            while self.views[vi].members.len() > sched.multiplex_size {
                self.fade_worst_member(vi);
            }
        }

        // focal gate
        for vi in 0..self.views.len() {
            let frozen = cfg.freeze_poses || !sched.focal_unlocked;
            let id = self.views[vi].focal;
            self.store.set_frozen(id, frozen);
        }

        let shading = sched.lambda_b < 1.0;
        // with every camera parameter frozen the camera-loss backward pass
        // and Adam step are no-ops; skip them
        let cam_live = self
            .store
            .ids()
            .any(|id| self.store.group(id) == ParamGroup::Camera && !self.store.is_frozen(id));
        let mut acc: HashMap<&'static str, f64> = HashMap::new();
        let mut grads_net: Vec<Option<Tensor<f64>>> = vec![None; self.store.len()];
        let mut grads_cam: Vec<Option<Tensor<f64>>> = vec![None; self.store.len()];
        let mut buffer_pushes: Vec<(usize, usize, f64, f64)> = Vec::new(); // view, member idx, mask, image
        let mut sq_updates: Vec<(usize, f64)> = Vec::new();
        let mut sp_values: Vec<f64> = Vec::new();

        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let live_max = pool.iter().map(|&v| self.views[v].members.len()).max().unwrap_or(1);
        let patches = if sched.patch_phase {
            (cfg.patches_per_step / live_max.max(1)).max(1)
        } else {
            cfg.patches_per_step
        };

        for patch_idx in 0..patches {
            let vi = pool[rng.gen_range(0..pool.len())];
            let (sw, sh, img, mask) = self.resized_view(vi, sched.resolution);
            let side = cfg.patch_side.min(sw).min(sh);
            let n_rays = side * side;

            // pixel selection + reference tensors
            let (pixels, gt_img, gt_mask, patch_mode) = if sched.patch_phase {
                let x0 = rng.gen_range(0..=(sw - side));
                let y0 = rng.gen_range(0..=(sh - side));
                let mut px = Vec::with_capacity(n_rays);
                let mut gi = Vec::with_capacity(n_rays * 3);
                let mut gm = Vec::with_capacity(n_rays);
                for dy in 0..side {
                    for dx in 0..side {
                        let (x, y) = (x0 + dx, y0 + dy);
                        px.push((x as f64 + 0.5, y as f64 + 0.5));
                        let i = y * sw + x;
                        // background composites to zero, so supervise against
                        // the mask-premultiplied capture
                        gi.extend(img[i * 3..i * 3 + 3].iter().map(|v| v * mask[i]));
                        gm.push(mask[i]);
                    }
                }
                (px, Tensor::new(n_rays, 3, gi), Tensor::new(n_rays, 1, gm), true)
            } else {
                let mut px = Vec::with_capacity(n_rays);
                let mut gi = Vec::with_capacity(n_rays * 3);
                let mut gm = Vec::with_capacity(n_rays);
                for _ in 0..n_rays {
                    let (x, y) = (rng.gen_range(0..sw), rng.gen_range(0..sh));
                    px.push((x as f64 + 0.5, y as f64 + 0.5));
                    let i = y * sw + x;
                    gi.extend(img[i * 3..i * 3 + 3].iter().map(|v| v * mask[i]));
                    gm.push(mask[i]);
                }
                (px, Tensor::new(n_rays, 3, gi), Tensor::new(n_rays, 1, gm), false)
            };

            let members: Vec<(usize, MemberState)> = self.views[vi]
                .members
                .iter()
                .cloned()
                .enumerate()
                .collect();
            let focal_id = self.views[vi].focal;
            let illum_params = self.views[vi].illum;
            let s_q = self.views[vi].s_q;
            let scale = sw as f64 / self.views[vi].native_w as f64;

            for (mi, member) in &members {
                let mi = *mi;
                let mut tape = Tape::<f64>::new();
                let binding = self.store.bind(&mut tape);
                let pose_r = Self::pose_at_res(&member.pose, sw, sh);
                let nodes =
                    Self::pose_nodes_at_res(&mut tape, &binding, &member.ids, focal_id, scale);
                let frame = frame_nodes(&mut tape, &pose_r, &nodes)?;
                let rays = generate_rays(&mut tape, &pose_r, &frame, &pixels)?;
                let settings = RenderSettings {
                    samples_per_ray: cfg.samples_per_ray,
                    radius: SCENE_RADIUS,
                    lambda_blend: sched.lambda_b,
                    jitter: true,
                };
                let illum = if shading {
                    Some(illum_nodes(&mut tape, &binding, &illum_params))
                } else {
                    None
                };
                let render_seed = cfg.seed
                    ^ (step as u64).wrapping_mul(0xd134_2543_de82_ef95)
                    ^ ((patch_idx * 8 + mi) as u64).wrapping_mul(0xaf25_1af3_b0f0_25b5);
                let render = render_rays(
                    &mut tape,
                    &self.field,
                    &binding,
                    illum.as_ref(),
                    &rays,
                    vi,
                    &settings,
                    render_seed,
                )?;

                // reconstruction terms for this member
                let (image_node, sil, bce, bg) = if patch_mode {
                    let (im, _fallback) =
                        losses::multiscale_patch_loss(&mut tape, render.rgb, &gt_img, side);
                    let parts =
                        losses::mask_loss(&mut tape, render.alpha, render.rgb, &gt_mask, side);
                    (im, Some(parts.silhouette), parts.bce, parts.background)
                } else {
                    let gtn = tape.constant(gt_img.clone());
                    let ch = losses::charbonnier(&mut tape, render.rgb, gtn);
                    let im = tape.mean_all(ch);
                    let bce = losses::bce_loss(&mut tape, render.alpha, &gt_mask);
                    let bg = losses::background_loss(&mut tape, render.rgb, &gt_mask);
                    (im, None, bce, bg)
                };
                let mask_node = {
                    let mut total = bce;
                    if let Some(s) = sil {
                        let sw_node = tape.mul_const(s, losses::MASK_XOR_WEIGHT);
                        total = tape.add(total, sw_node);
                    }
                    tape.add(total, bg)
                };
                let im_v = tape.value(image_node).item();
                let mask_v = tape.value(mask_node).item();

                let regs = losses::camera_regularizers(
                    &mut tape,
                    &pose_r,
                    &nodes,
                    &frame,
                    cfg.r_min,
                    cfg.r_max,
                );
                let lookat_w = tape.mul_const(regs.lookat, cfg.lambda_lookat);
                let bounds_w = tape.mul_const(regs.bounds, cfg.lambda_bounds);
                let offset_w = tape.mul_const(regs.offset, cfg.lambda_offset);
                let reg_node = {
                    let t = tape.add(lookat_w, bounds_w);
                    tape.add(t, offset_w)
                };

                let recon = tape.add(image_node, mask_node);
                let mut net_loss: Option<NodeId> = None;
                let mut cam_loss: Option<NodeId>;

                if mi == 0 {
                    // patch importance from the member's loss history
                    let s_p = if sched.importance_active && !member.losses.is_empty() {
                        let (mu_m, sd_m) = member.losses.mask_stats();
                        let (mu_i, sd_i) = member.losses.image_stats();
                        let sigma = (sd_m * sd_m + sd_i * sd_i).sqrt();
                        losses::importance_scale_sp(mask_v, im_v, mu_m + mu_i, sigma)
                    } else {
                        1.0
                    };
                    sp_values.push(s_p);

                    let net_recon = tape.mul_const(recon, s_p);
                    net_loss = Some(net_recon);
                    acc_add(&mut acc, "image", im_v);
                    acc_add(&mut acc, "mask", mask_v);
                    if let Some(s) = sil {
                        acc_add(&mut acc, "silhouette", tape.value(s).item());
                    }
                    acc_add(&mut acc, "bce", tape.value(bce).item());
                    acc_add(&mut acc, "background", tape.value(bg).item());

                    if shading {
                        // normal-facing penalty
                        let nd = losses::normal_direction_loss(
                            &mut tape,
                            render.normal_samples.unwrap(),
                            render.dirs_samples,
                            render.weights,
                            n_rays,
                        );
                        acc_add(&mut acc, "ndir", tape.value(nd).item());
                        let nd_w = tape.mul_const(nd, cfg.lambda_ndir);
                        net_loss = Some(tape.add(net_loss.unwrap(), nd_w));
                        // BRDF initialization: composited basecolor vs pixels
                        if sched.lambda_a > 0.0 {
                            let gtn = tape.constant(gt_img.clone());
                            let init = losses::mse_loss(&mut tape, render.basecolor.unwrap(), gtn);
                            acc_add(&mut acc, "init", tape.value(init).item());
                            let init_w = tape.mul_const(init, sched.lambda_a);
                            net_loss = Some(tape.add(net_loss.unwrap(), init_w));
                        }
                    }

                    let cam_recon = tape.mul_const(recon, s_q);
                    cam_loss = Some(tape.add(cam_recon, reg_node));
                    acc_add(&mut acc, "lookat", tape.value(regs.lookat).item());
                    acc_add(&mut acc, "bounds", tape.value(regs.bounds).item());
                    acc_add(&mut acc, "offset", tape.value(regs.offset).item());

                    // camera importance (per view, updated when sampled)
                    if sched.importance_active && !member.losses.is_empty() {
                        let (mu_m, sd_m) = member.losses.mask_stats();
                        let (mu_i, sd_i) = member.losses.image_stats();
                        let sigma = (sd_m * sd_m + sd_i * sd_i).sqrt();
                        let new_sq = losses::importance_scale_sq(
                            s_q,
                            mask_v,
                            im_v,
                            mu_m + mu_i,
                            sigma,
                            IMPORTANCE_LAMBDA_P,
                            cfg.camera_importance_sign,
                        );
                        sq_updates.push((vi, new_sq));
                    }
                } else {
                    // secondary member: own reconstruction drives its camera;
                    // consistency with member 0 couples it to the field
                    let cam_recon = tape.mul_const(recon, s_q);
                    cam_loss = Some(tape.add(cam_recon, reg_node));

                    if patch_mode {
                        let alpha_v = tape.value(render.alpha);
                        let depth_v = tape.value(render.depth);
                        let depths: Vec<f64> = (0..n_rays).map(|i| depth_v.at(i, 0)).collect();
                        let best = &members[0].1;
                        let pose0_r = Self::pose_at_res(&best.pose, sw, sh);
                        let warped = project_points(&pose_r, &pose0_r, &pixels, &depths)?;
                        let mut wpix = Vec::with_capacity(n_rays);
                        let mut valid = Vec::with_capacity(n_rays);
                        for (i, w) in warped.iter().enumerate() {
                            let ok = w.valid && alpha_v.at(i, 0) > 0.3;
                            valid.push(ok);
                            wpix.push((
                                w.px.clamp(0.0, sw as f64),
                                w.py.clamp(0.0, sh as f64),
                            ));
                        }
                        if valid.iter().any(|&v| v) {
                            let nodes0 = Self::pose_nodes_at_res(
                                &mut tape, &binding, &best.ids, focal_id, scale,
                            );
                            let frame0 = frame_nodes(&mut tape, &pose0_r, &nodes0)?;
                            let rays0 = generate_rays(&mut tape, &pose0_r, &frame0, &wpix)?;
                            let render0 = render_rays(
                                &mut tape,
                                &self.field,
                                &binding,
                                illum.as_ref(),
                                &rays0,
                                vi,
                                &settings,
                                render_seed ^ 0x5bd1_e995,
                            )?;
                            let pair = ConsistencyPair {
                                member_rgb: render.rgb,
                                reference_rgb: render0.rgb,
                                valid,
                            };
                            let cons = losses::multiplex_consistency_loss(&mut tape, &[pair]);
                            acc_add(&mut acc, "multiplex", tape.value(cons).item());
                            let cons_w = tape.mul_const(cons, MULTIPLEX_WEIGHT);
                            net_loss = Some(cons_w);
                            cam_loss = Some(tape.add(cam_loss.unwrap(), cons_w));
                        }
                    }
                }
                buffer_pushes.push((vi, mi, mask_v, im_v));

                if let Some(l) = net_loss {
                    let g = tape.backward(l);
                    accumulate(&mut grads_net, &self.store, &binding, &g, &tape);
                }
                if let Some(l) = cam_loss {
                    if cam_live {
                        let g = tape.backward(l);
                        accumulate(&mut grads_cam, &self.store, &binding, &g, &tape);
                    }
                }
            }
        }

        // shared regularizers: grid decay (+ BRDF smoothness when shading)
        {
            let mut tape = Tape::<f64>::new();
            let binding = self.store.bind(&mut tape);
            let tables = binding.node(self.field.tables);
            let decay = self.field.grid.weight_decay(&mut tape, tables);
            acc_add(&mut acc, "grid_decay", tape.value(decay).item());
            let mut loss = tape.mul_const(decay, cfg.grid_decay);
            if shading {
                let k = 16;
                let eps = 0.01 / (2.0 * SCENE_RADIUS); // 0.01 scene units
                let mut xa = Tensor::zeros(k, 3);
                let mut xb = Tensor::zeros(k, 3);
                for i in 0..k {
                    for j in 0..3 {
                        let v: f64 = rng.gen_range(0.3..0.7);
                        xa.set(i, j, v);
                        xb.set(i, j, v + rng.gen_range(-eps..eps));
                    }
                }
                let xan = tape.constant(xa);
                let xbn = tape.constant(xb);
                let ea = self.field.eval_density(&mut tape, &binding, xan, true);
                let eb = self.field.eval_density(&mut tape, &binding, xbn, true);
                let na = FieldNetwork::normal_from_gradient(&mut tape, ea.dsigma_dx.unwrap());
                let nb = FieldNetwork::normal_from_gradient(&mut tape, eb.dsigma_dx.unwrap());
                let ba = self.field.eval_brdf(&mut tape, &binding, ea.trunk, &vec![0; k]);
                let bb = self.field.eval_brdf(&mut tape, &binding, eb.trunk, &vec![0; k]);
                let sm = losses::smoothness_loss(
                    &mut tape,
                    &[
                        (na.normal, nb.normal),
                        (ba.roughness, bb.roughness),
                        (ba.metallic, bb.metallic),
                    ],
                );
                acc_add(&mut acc, "smooth", tape.value(sm).item());
                let sm_w = tape.mul_const(sm, cfg.lambda_smooth);
                loss = tape.add(loss, sm_w);
            }
            let g = tape.backward(loss);
            accumulate(&mut grads_net, &self.store, &binding, &g, &tape);
            // grid decay gradient belongs to the grid optimizer's parameter,
            // which lives in grads applied per group below; the tables entry
            // in grads_net is routed to the grid Adam by group membership.
        }

        // reject non-finite steps before touching any state
        let finite_vals = acc.values().all(|v| v.is_finite());
        let finite_grads = grads_net
            .iter()
            .chain(grads_cam.iter())
            .flatten()
            .all(|g| g.data().iter().all(|v| v.is_finite()));
        if !finite_vals || !finite_grads {
            return Err(InvrenderError::NonFiniteStep { step });
        }

        // gradient conditioning
        let net_ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.group(id) == ParamGroup::Network)
            .collect();
        let cam_ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.group(id) == ParamGroup::Camera)
            .collect();
        scale_to_norm(&mut grads_net, &net_ids, cfg.network_grad_scale);
        clip_grad_norm(&mut grads_cam, &cam_ids, cfg.camera_clip);

        // learning-rate decay: ×0.1 over the run (network/grid), ×0.1 per
        // camera_lr_decay_steps (camera)
        let t = step as f64 / cfg.total_steps as f64;
        let lr_net = cfg.lr_network * 0.1f64.powf(t);
        let lr_grid = cfg.lr_grid * 0.1f64.powf(t);
        let lr_cam = cfg.lr_camera * 0.1f64.powf(step as f64 / cfg.camera_lr_decay_steps as f64);

        self.adam_network.step(&mut self.store, &grads_net, lr_net);
        self.adam_grid.step(&mut self.store, &grads_net, lr_grid);
        self.adam_camera.step(&mut self.store, &grads_cam, lr_cam);

        // clamp direction offsets in place (mirror of clamp_offsets)
        let lim = std::f64::consts::FRAC_PI_2;
        for view in &self.views {
            for m in &view.members {
                let dd = self.store.get_mut(m.ids.delta_dir);
                for v in dd.data_mut() {
                    *v = v.clamp(-lim, lim);
                }
            }
        }

        // importance bookkeeping and multiplex ranking
        for (vi, mi, mask_v, im_v) in buffer_pushes {
            self.views[vi].members[mi].losses.push(mask_v, im_v);
        }
        for (vi, sq) in sq_updates {
            self.views[vi].s_q = sq;
        }
        for &vi in pool {
            self.rank_members(vi);
        }

        let mut report = LossReport::default();
        for key in REPORT_KEYS {
            match key {
                "s_p_mean" => {
                    let v = if sp_values.is_empty() {
                        1.0
                    } else {
                        sp_values.iter().sum::<f64>() / sp_values.len() as f64
                    };
                    report.push(key, v);
                }
                "s_q_mean" => {
                    let v = pool.iter().map(|&v| self.views[v].s_q).sum::<f64>()
                        / pool.len() as f64;
                    report.push(key, v);
                }
                _ => report.push(key, *acc.get(key).unwrap_or(&0.0)),
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Move the best (lowest smoothed loss) member to slot 0; stable.
    fn rank_members(&mut self, vi: usize) {
        let members = &mut self.views[vi].members;
        if members.len() <= 1 {
            return;
        }
        let mut best = 0;
        for i in 1..members.len() {
            if members[i].losses.smoothed() < members[best].losses.smoothed() {
                best = i;
            }
        }
        if best != 0 {
            members.swap(0, best);
        }
    }

    /// Remove the worst member (ties favor the later slot) and freeze its
    /// parameters; never drops the last member.
    fn fade_worst_member(&mut self, vi: usize) {
        let members = &mut self.views[vi].members;
        if members.len() <= 1 {
            return;
        }
        let mut worst = 0;
        let mut worst_loss = f64::NEG_INFINITY;
        for (i, m) in members.iter().enumerate() {
            let l = m.losses.smoothed();
            if l >= worst_loss {
                worst_loss = l;
                worst = i;
            }
        }
        let removed = members.remove(worst);
        self.store.set_frozen(removed.ids.delta_eye, true);
        self.store.set_frozen(removed.ids.delta_dir, true);
        self.store.set_frozen(removed.ids.roll, true);
        self.rank_members(vi);
    }

    // -----------------------------------------------------------------------
    // Held-out-view protocol

    /// Hash of every field parameter (everything except per-view camera and
    /// illumination), for freeze assertions.
    pub fn field_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for id in self.store.ids() {
            let name = self.store.name(id);
            if name.starts_with("cam.") || name.starts_with("illum.") {
                continue;
            }
            for &v in self.store.get(id).data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    /// Optimize only the held-out views' cameras and illuminations against
    /// the frozen field.
    pub fn holdout_protocol(&mut self, steps: usize) -> Result<Vec<LossReport>> {
        if self.test_views.is_empty() {
            return Err(bad_config("holdout protocol needs held-out views"));
        }
        let saved_frozen: Vec<bool> =
            self.store.ids().map(|id| self.store.is_frozen(id)).collect();
        let test: Vec<usize> = self.test_views.clone();
        for id in self.store.ids() {
            let name = self.store.name(id).to_string();
            let allowed = test.iter().any(|&v| {
                let cam_ok =
                    !self.config.freeze_poses && name.starts_with(&format!("cam.{v}."));
                cam_ok || name.starts_with(&format!("illum.{v}."))
            });
            self.store.set_frozen(id, !allowed);
        }
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            match self.step_over(&test) {
                Ok(r) => reports.push(r),
                Err(InvrenderError::NonFiniteStep { .. }) => {
                    self.step += 1; // skip the poisoned step, state untouched
                }
                Err(e) => return Err(e),
            }
        }
        for (id, f) in self.store.ids().zip(saved_frozen) {
            self.store.set_frozen(id, f);
        }
        Ok(reports)
    }

    // -----------------------------------------------------------------------
    // Full-image rendering (evaluation / CLI)

    /// Render a full view at `long`-side resolution through member 0's
    /// camera. Returns linear rgb (`w*h*3`) and alpha (`w*h`), with the
    /// actual dimensions.
    pub fn render_image(
        &self,
        view: usize,
        long: usize,
        lambda_blend: f64,
    ) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
        let pose = self.pose_of(view);
        self.render_image_from(view, &pose, long, lambda_blend)
    }

    /// Same, from an explicit pose (novel views, turntables).
    pub fn render_image_from(
        &self,
        view: usize,
        pose: &CameraPose<f64>,
        long: usize,
        lambda_blend: f64,
    ) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
        let v = &self.views[view];
        let (sw, sh) = Self::scaled_dims(v.native_w, v.native_h, long);
        let pose_r = Self::pose_at_res(pose, sw, sh);
        let mut rgb = vec![0.0; sw * sh * 3];
        let mut alpha = vec![0.0; sw * sh];
        let shading = lambda_blend < 1.0;
        let chunk = 512;
        let all: Vec<(f64, f64)> = (0..sw * sh)
            .map(|i| ((i % sw) as f64 + 0.5, (i / sw) as f64 + 0.5))
            .collect();
        for start in (0..all.len()).step_by(chunk) {
            let px = &all[start..(start + chunk).min(all.len())];
            let mut tape = Tape::<f64>::new();
            let binding = self.store.bind(&mut tape);
            let scale = sw as f64 / v.native_w as f64;
            let nodes = Self::pose_nodes_at_res(
                &mut tape,
                &binding,
                &v.members[0].ids,
                v.focal,
                scale,
            );
            let frame = frame_nodes(&mut tape, &pose_r, &nodes)?;
            let rays = generate_rays(&mut tape, &pose_r, &frame, px)?;
            let illum = if shading {
                Some(illum_nodes(&mut tape, &binding, &v.illum))
            } else {
                None
            };
            let settings = RenderSettings {
                samples_per_ray: self.config.samples_per_ray,
                radius: SCENE_RADIUS,
                lambda_blend,
                jitter: false,
            };
            let render = render_rays(
                &mut tape,
                &self.field,
                &binding,
                illum.as_ref(),
                &rays,
                view,
                &settings,
                self.config.seed,
            )?;
            let rv = tape.value(render.rgb);
            let av = tape.value(render.alpha);
            for (i, gi) in (start..start + px.len()).enumerate() {
                for ch in 0..3 {
                    rgb[gi * 3 + ch] = rv.at(i, ch);
                }
                alpha[gi] = av.at(i, 0);
            }
        }
        Ok((sw, sh, rgb, alpha))
    }

    /// Overwrite a view's illumination parameters from plain values
    /// (relighting); unused lobes are set to near-black.
    pub fn set_view_illum(&mut self, view: usize, illum: &PlainIllum) {
        let inv_softplus = |y: f64| (y.max(1e-9).exp() - 1.0).max(1e-300).ln();
        let p = self.views[view].illum;
        let amb = self.store.get_mut(p.ambient);
        for ch in 0..3 {
            amb.set(0, ch, inv_softplus(illum.ambient[ch]));
        }
        let lobes = self.store.get(p.axes).rows();
        for l in 0..lobes {
            let (axis, sharp, color) = if l < illum.lobes.len() {
                let lb = &illum.lobes[l];
                (lb.axis, lb.sharpness, lb.color)
            } else {
                ([0.0, 1.0, 0.0], 5.0, [1e-8; 3])
            };
            let ax = self.store.get_mut(p.axes);
            for ch in 0..3 {
                ax.set(l, ch, axis[ch]);
            }
            let s = self.store.get_mut(p.sharpness);
            s.set(l, 0, inv_softplus((sharp - 1e-3).max(1e-6)));
            let col = self.store.get_mut(p.colors);
            for ch in 0..3 {
                col.set(l, ch, inv_softplus(color[ch]));
            }
        }
    }
}

pub const REPORT_KEYS: [&'static str; 15] = [
    "image",
    "mask",
    "silhouette",
    "bce",
    "background",
    "multiplex",
    "ndir",
    "smooth",
    "init",
    "grid_decay",
    "lookat",
    "bounds",
    "offset",
    "s_p_mean",
    "s_q_mean",
];

pub fn csv_header() -> String {
    let mut s = String::from("step");
    for k in REPORT_KEYS {
        s.push(',');
        s.push_str(k);
    }
    s
}

pub fn csv_line(step: usize, report: &LossReport) -> String {
    let mut s = format!("{step}");
    for k in REPORT_KEYS {
        let _ = write!(s, ",{:.9e}", report.get(k).unwrap_or(0.0));
    }
    s
}

fn acc_add(acc: &mut HashMap<&'static str, f64>, key: &'static str, v: f64) {
    *acc.entry(key).or_insert(0.0) += v;
}

fn accumulate(
    total: &mut [Option<Tensor<f64>>],
    store: &ParamStore<f64>,
    binding: &Binding,
    grads: &crate::autodiff::Gradients<f64>,
    tape: &Tape<f64>,
) {
    for id in store.ids() {
        let g = grads.wrt(binding.node(id), tape);
        if g.squared_norm() == 0.0 {
            continue;
        }
        match &mut total[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Scale the group's gradients down when their global norm exceeds `target`
/// (norm-based gradient scaling); small gradients are left alone, since
/// scaling them *up* turns Adam into normalized descent that never settles.
fn scale_to_norm(grads: &mut [Option<Tensor<f64>>], ids: &[ParamId], target: f64) {
    let mut sq = 0.0;
    for id in ids {
        if let Some(g) = &grads[id.0] {
            sq += g.squared_norm();
        }
    }
    let norm = sq.sqrt();
    if norm > target {
        let s = target / norm;
        for id in ids {
            if let Some(g) = &mut grads[id.0] {
                g.scale_assign(s);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpointing

const CHECKPOINT_MAGIC: &[u8; 8] = b"IVRCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(InvrenderError::CheckpointCorrupt(format!(
                "wanted {n} bytes at offset {}, only {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| InvrenderError::CheckpointCorrupt("non-utf8 string".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Network => 0,
        ParamGroup::Grid => 1,
        ParamGroup::Camera => 2,
    }
}

impl TrainState {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();

        sections.push(("config", self.config.to_text().into_bytes()));

        let mut w = Writer::new();
        w.u64(self.store.len() as u64);
        for id in self.store.ids() {
            w.str(self.store.name(id));
            w.u8(group_code(self.store.group(id)));
            w.u8(self.store.is_frozen(id) as u8);
            let t = self.store.get(id);
            w.u64(t.rows() as u64);
            w.u64(t.cols() as u64);
            for &v in t.data() {
                w.f64(v);
            }
        }
        sections.push(("params", w.buf));

        for (name, adam) in [
            ("adam.network", &self.adam_network),
            ("adam.grid", &self.adam_grid),
            ("adam.camera", &self.adam_camera),
        ] {
            let mut w = Writer::new();
            w.u64(adam.step as u64);
            w.u64(adam.moments1.len() as u64);
            for m in adam.moments1.iter().chain(adam.moments2.iter()) {
                w.f64s(m.data());
            }
            sections.push((name, w.buf));
        }

        let mut w = Writer::new();
        w.u64(self.step as u64);
        w.u64(self.views.len() as u64);
        for v in &self.views {
            w.f64(v.s_q);
            w.u64(v.members.len() as u64);
            for m in &v.members {
                w.u64(m.orig as u64);
                for &e in &m.pose.p_eye {
                    w.f64(e);
                }
                let (cap, mask, image, head, filled) = m.losses.raw_state();
                w.u64(cap as u64);
                w.f64s(mask);
                w.f64s(image);
                w.u64(head as u64);
                w.u8(filled as u8);
            }
        }
        sections.push(("trainer", w.buf));

        let mut out = Writer::new();
        out.buf.extend_from_slice(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        out.u32(sections.len() as u32);
        for (name, payload) in &sections {
            out.str(name);
            out.u64(payload.len() as u64);
            out.buf.extend_from_slice(payload);
        }
        fs::write(path, out.buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, dataset: Dataset) -> Result<TrainState> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(InvrenderError::CheckpointCorrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(InvrenderError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n_sections = r.u32()? as usize;
        let mut sections: HashMap<String, &[u8]> = HashMap::new();
        for _ in 0..n_sections {
            let name = r.str()?;
            let len = r.u64()? as usize;
            sections.insert(name, r.take(len)?);
        }
        if !r.done() {
            return Err(InvrenderError::CheckpointCorrupt("trailing bytes".into()));
        }
        let section = |name: &str| -> Result<&[u8]> {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| InvrenderError::CheckpointMissingSection(name.into()))
        };

        let config_text = String::from_utf8(section("config")?.to_vec())
            .map_err(|_| InvrenderError::CheckpointCorrupt("non-utf8 config".into()))?;
        let config = TrainConfig::from_text(&config_text)?;
        let mut state = TrainState::new(dataset, config)?;

        // parameters (registration order must match a fresh build)
        let mut r = Reader::new(section("params")?);
        let count = r.u64()? as usize;
        if count != state.store.len() {
            return Err(InvrenderError::CheckpointCorrupt(format!(
                "parameter count {count} does not match the rebuilt store ({})",
                state.store.len()
            )));
        }
        for id in state.store.ids() {
            let name = r.str()?;
            if name != state.store.name(id) {
                return Err(InvrenderError::CheckpointCorrupt(format!(
                    "parameter `{name}` does not match rebuilt `{}`",
                    state.store.name(id)
                )));
            }
            let _group = r.u8()?;
            let frozen = r.u8()? != 0;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let t = state.store.get_mut(id);
            if t.shape() != (rows, cols) {
                return Err(InvrenderError::CheckpointCorrupt(format!(
                    "parameter `{name}` shape mismatch"
                )));
            }
            for v in t.data_mut() {
                *v = r.f64()?;
            }
            state.store.set_frozen(id, frozen);
        }

        for (name, adam) in [
            ("adam.network", &mut state.adam_network),
            ("adam.grid", &mut state.adam_grid),
            ("adam.camera", &mut state.adam_camera),
        ] {
            let mut r = Reader::new(section(name)?);
            adam.step = r.u64()? as usize;
            let count = r.u64()? as usize;
            if count != adam.moments1.len() {
                return Err(InvrenderError::CheckpointCorrupt(format!(
                    "{name}: moment count mismatch"
                )));
            }
            for m in adam.moments1.iter_mut().chain(adam.moments2.iter_mut()) {
                let data = r.f64s()?;
                if data.len() != m.len() {
                    return Err(InvrenderError::CheckpointCorrupt(format!(
                        "{name}: moment length mismatch"
                    )));
                }
                m.data_mut().copy_from_slice(&data);
            }
        }

        let mut r = Reader::new(section("trainer")?);
        state.step = r.u64()? as usize;
        let n_views = r.u64()? as usize;
        if n_views != state.views.len() {
            return Err(InvrenderError::CheckpointCorrupt("view count mismatch".into()));
        }
        for vi in 0..n_views {
            state.views[vi].s_q = r.f64()?;
            let n_members = r.u64()? as usize;
            let fresh = std::mem::take(&mut state.views[vi].members);
            let mut members = Vec::with_capacity(n_members);
            for _ in 0..n_members {
                let orig = r.u64()? as usize;
                let p_eye = [r.f64()?, r.f64()?, r.f64()?];
                let cap = r.u64()? as usize;
                let mask = r.f64s()?;
                let image = r.f64s()?;
                let head = r.u64()? as usize;
                let filled = r.u8()? != 0;
                let mut m = fresh
                    .iter()
                    .find(|m| m.orig == orig)
                    .cloned()
                    .ok_or_else(|| {
                        InvrenderError::CheckpointCorrupt(format!(
                            "view {vi}: unknown multiplex member {orig}"
                        ))
                    })?;
                m.pose.p_eye = p_eye;
                m.losses = LossBuffer::from_raw(cap, mask, image, head, filled);
                members.push(m);
            }
            state.views[vi].members = members;
        }
        state.sync_poses();
        Ok(state)
    }
}
