//! Camera parameterization, quadrant initialization, the camera multiplex
//! lifecycle, ray generation (plain and on-tape), cross-camera perspective
//! warps, and Procrustes pose evaluation.
//!
//! Poses use a `lookat + direction` parameterization: a fixed initial eye
//! point plus learnable offsets — Δp_eye, a (Δφ, Δθ) direction offset clamped
//! to ±π/2, a roll angle, and the focal length. The view direction is
//! d̂ = ⟨cos θ sin φ, sin θ, cos θ cos φ⟩ with θ = arcsin(d_y/|d|) + Δθ and
//! φ = atan2(d_x, d_z) + Δφ, which is the identity round-trip at zero
//! offsets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{InvrenderError, Result};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

pub const DEFAULT_FOV_DEG: f64 = 53.13;

/// Focal length in pixels from the horizontal field of view.
pub fn focal_from_fov(width: usize, fov_deg: f64) -> f64 {
    (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan()
}

#[derive(Clone, Debug)]
pub struct CameraPose<T> {
    /// Initial eye position; learning happens in the offsets.
    pub p_eye: [T; 3],
    pub delta_eye: [T; 3],
    /// (Δφ, Δθ), clamped to [−π/2, π/2].
    pub delta_dir: [T; 2],
    /// Roll of the up vector around the view axis, radians.
    pub roll: T,
    /// Focal length in pixels.
    pub focal: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraPose<T> {
    pub fn new(p_eye: [T; 3], width: usize, height: usize) -> Self {
        CameraPose {
            p_eye,
            delta_eye: [T::zero(); 3],
            delta_dir: [T::zero(); 2],
            roll: T::zero(),
            focal: c(focal_from_fov(width, DEFAULT_FOV_DEG)),
            width,
            height,
        }
    }

    pub fn eye(&self) -> [T; 3] {
        [
            self.p_eye[0] + self.delta_eye[0],
            self.p_eye[1] + self.delta_eye[1],
            self.p_eye[2] + self.delta_eye[2],
        ]
    }

    /// Clamp the direction offsets into their legal range in place.
    pub fn clamp_offsets(&mut self) {
        let lim = c::<T>(std::f64::consts::FRAC_PI_2);
        for v in self.delta_dir.iter_mut() {
            *v = (*v).max(-lim).min(lim);
        }
    }
}

/// Orthonormal camera frame (world space).
#[derive(Clone, Debug)]
pub struct Frame<T> {
    pub eye: [T; 3],
    pub right: [T; 3],
    pub up: [T; 3],
    pub forward: [T; 3],
    pub focal: T,
}

fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm<T: Real>(a: [T; 3]) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn scale<T: Real>(a: [T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Reference up: world +y, or +z when the view axis is close to vertical.
fn reference_up<T: Real>(forward: [T; 3]) -> [T; 3] {
    if forward[1].abs() > c(0.999) {
        [T::zero(), T::zero(), T::one()]
    } else {
        [T::zero(), T::one(), T::zero()]
    }
}

impl<T: Real> CameraPose<T> {
    /// Plain (value-only) frame derivation.
    pub fn frame(&self) -> Result<Frame<T>> {
        let eye = self.eye();
        let d = eye; // lookat center is the scene origin
        let len = norm(d);
        if len < c(1e-9) {
            return Err(InvrenderError::DegeneratePose {
                reason: "eye coincides with the lookat center".into(),
            });
        }
        let rho = (d[0] * d[0] + d[2] * d[2]).sqrt();
        if rho < c(1e-9) {
            return Err(InvrenderError::DegeneratePose {
                reason: "eye on the vertical axis: azimuth undefined".into(),
            });
        }
        let lim = c::<T>(std::f64::consts::FRAC_PI_2);
        let dphi = self.delta_dir[0].max(-lim).min(lim);
        let dtheta = self.delta_dir[1].max(-lim).min(lim);

        let (sin_t0, cos_t0) = (d[1] / len, rho / len);
        let (sin_p0, cos_p0) = (d[0] / rho, d[2] / rho);
        let (sd, cd) = (dtheta.sin(), dtheta.cos());
        let (sin_t, cos_t) = (sin_t0 * cd + cos_t0 * sd, cos_t0 * cd - sin_t0 * sd);
        let (sp, cp) = (dphi.sin(), dphi.cos());
        let (sin_p, cos_p) = (sin_p0 * cp + cos_p0 * sp, cos_p0 * cp - sin_p0 * sp);

        let dhat = [cos_t * sin_p, sin_t, cos_t * cos_p];
        let forward = scale(dhat, -T::one());
        let upref = reference_up(forward);
        let r = cross(forward, upref);
        let right = scale(r, norm(r).recip());
        let up = cross(right, forward);
        let (cr, sr) = (self.roll.cos(), self.roll.sin());
        let right_r = [
            right[0] * cr + up[0] * sr,
            right[1] * cr + up[1] * sr,
            right[2] * cr + up[2] * sr,
        ];
        let up_r = [
            up[0] * cr - right[0] * sr,
            up[1] * cr - right[1] * sr,
            up[2] * cr - right[2] * sr,
        ];
        Ok(Frame { eye, right: right_r, up: up_r, forward, focal: self.focal })
    }

    /// Plain ray through a continuous pixel coordinate; unit direction.
    pub fn ray(&self, frame: &Frame<T>, px: T, py: T) -> Result<([T; 3], [T; 3])> {
        self.check_pixel(px, py)?;
        let u = px - c::<T>(self.width as f64 / 2.0);
        let v = py - c::<T>(self.height as f64 / 2.0);
        let mut dir = [T::zero(); 3];
        for i in 0..3 {
            dir[i] = frame.right[i] * u - frame.up[i] * v + frame.forward[i] * frame.focal;
        }
        let d = scale(dir, norm(dir).recip());
        Ok((frame.eye, d))
    }

    fn check_pixel(&self, px: T, py: T) -> Result<()> {
        let (w, h) = (c::<T>(self.width as f64), c::<T>(self.height as f64));
        if px < T::zero() || px > w || py < T::zero() || py > h {
            return Err(InvrenderError::PixelOutOfBounds {
                x: px.to_f64_(),
                y: py.to_f64_(),
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

/// Tape nodes for a pose's learnable offsets.
#[derive(Clone, Copy, Debug)]
pub struct PoseNodes {
    /// `[1, 3]`
    pub delta_eye: NodeId,
    /// `[1, 2]` (Δφ, Δθ)
    pub delta_dir: NodeId,
    /// `[1, 1]`
    pub roll: NodeId,
    /// `[1, 1]`
    pub focal: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct FrameNodes {
    pub eye: NodeId,
    pub right: NodeId,
    pub up: NodeId,
    pub forward: NodeId,
    pub focal: NodeId,
}

pub struct RayBatch<T> {
    /// `[r, 3]`
    pub origins: NodeId,
    /// `[r, 3]`, unit rows.
    pub dirs: NodeId,
    /// Continuous pixel coordinates the rays came from.
    pub pixels: Vec<(T, T)>,
}

fn row3<T: Real>(tape: &mut Tape<T>, x: NodeId, y: NodeId, z: NodeId) -> NodeId {
    tape.concat_cols(&[x, y, z])
}

fn cross_rows<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    let ax = tape.slice_cols(a, 0, 1);
    let ay = tape.slice_cols(a, 1, 2);
    let az = tape.slice_cols(a, 2, 3);
    let bx = tape.slice_cols(b, 0, 1);
    let by = tape.slice_cols(b, 1, 2);
    let bz = tape.slice_cols(b, 2, 3);
    let t0 = tape.mul(ay, bz);
    let t1 = tape.mul(az, by);
    let cx = tape.sub(t0, t1);
    let t0 = tape.mul(az, bx);
    let t1 = tape.mul(ax, bz);
    let cy = tape.sub(t0, t1);
    let t0 = tape.mul(ax, by);
    let t1 = tape.mul(ay, bx);
    let cz = tape.sub(t0, t1);
    row3(tape, cx, cy, cz)
}

fn normalize_rows<T: Real>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let sq = tape.square(a);
    let s = tape.sum_cols(sq);
    let s = tape.add_const(s, c(1e-24));
    let r = tape.sqrt(s);
    let inv = tape.recip(r);
    tape.mul_col_broadcast(a, inv)
}

/// On-tape frame derivation; values agree with `CameraPose::frame` and
/// gradients flow into all four offset nodes.
pub fn frame_nodes<T: Real>(tape: &mut Tape<T>, pose: &CameraPose<T>, nodes: &PoseNodes) -> Result<FrameNodes> {
    // value-side checks (degeneracy, reference-up branch) use the plain path
    let value_frame = pose.frame()?;

    let p0 = tape.constant(Tensor::new(1, 3, pose.p_eye.to_vec()));
    let eye = tape.add(p0, nodes.delta_eye);
    let dx = tape.slice_cols(eye, 0, 1);
    let dy = tape.slice_cols(eye, 1, 2);
    let dz = tape.slice_cols(eye, 2, 3);
    let dx2 = tape.square(dx);
    let dz2 = tape.square(dz);
    let rho2 = tape.add(dx2, dz2);
    let rho = tape.sqrt(rho2);
    let dy2 = tape.square(dy);
    let len2 = tape.add(rho2, dy2);
    let len = tape.sqrt(len2);
    let inv_len = tape.recip(len);
    let inv_rho = tape.recip(rho);

    let sin_t0 = tape.mul(dy, inv_len);
    let cos_t0 = tape.mul(rho, inv_len);
    let sin_p0 = tape.mul(dx, inv_rho);
    let cos_p0 = tape.mul(dz, inv_rho);

    let lim = std::f64::consts::FRAC_PI_2;
    let dphi = tape.slice_cols(nodes.delta_dir, 0, 1);
    let dphi = tape.max_const(dphi, c(-lim));
    let dphi = tape.min_const(dphi, c(lim));
    let dtheta = tape.slice_cols(nodes.delta_dir, 1, 2);
    let dtheta = tape.max_const(dtheta, c(-lim));
    let dtheta = tape.min_const(dtheta, c(lim));

    // angle additions via sum formulas: no arcsin/atan2 needed on the tape
    let sd = tape.sin(dtheta);
    let cd = tape.cos(dtheta);
    let t0 = tape.mul(sin_t0, cd);
    let t1 = tape.mul(cos_t0, sd);
    let sin_t = tape.add(t0, t1);
    let t0 = tape.mul(cos_t0, cd);
    let t1 = tape.mul(sin_t0, sd);
    let cos_t = tape.sub(t0, t1);

    let sp = tape.sin(dphi);
    let cp = tape.cos(dphi);
    let t0 = tape.mul(sin_p0, cp);
    let t1 = tape.mul(cos_p0, sp);
    let sin_p = tape.add(t0, t1);
    let t0 = tape.mul(cos_p0, cp);
    let t1 = tape.mul(sin_p0, sp);
    let cos_p = tape.sub(t0, t1);

    let hx = tape.mul(cos_t, sin_p);
    let hz = tape.mul(cos_t, cos_p);
    let dhat = row3(tape, hx, sin_t, hz);
    let forward = tape.neg(dhat);

    let upref = tape.constant(Tensor::new(1, 3, reference_up(value_frame.forward).to_vec()));
    let r = cross_rows(tape, forward, upref);
    let right = normalize_rows(tape, r);
    let up = cross_rows(tape, right, forward);

    let cr = tape.cos(nodes.roll);
    let sr = tape.sin(nodes.roll);
    let a = tape.mul_col_broadcast(right, cr);
    let b = tape.mul_col_broadcast(up, sr);
    let right_r = tape.add(a, b);
    let a = tape.mul_col_broadcast(up, cr);
    let b = tape.mul_col_broadcast(right, sr);
    let up_r = tape.sub(a, b);

    Ok(FrameNodes { eye, right: right_r, up: up_r, forward, focal: nodes.focal })
}

/// On-tape pinhole rays through continuous pixel coordinates.
pub fn generate_rays<T: Real>(
    tape: &mut Tape<T>,
    pose: &CameraPose<T>,
    frame: &FrameNodes,
    pixels: &[(T, T)],
) -> Result<RayBatch<T>> {
    let r = pixels.len();
    let mut ucol = Vec::with_capacity(r);
    let mut vcol = Vec::with_capacity(r);
    for &(px, py) in pixels {
        pose.check_pixel(px, py)?;
        ucol.push(px - c::<T>(pose.width as f64 / 2.0));
        vcol.push(-(py - c::<T>(pose.height as f64 / 2.0)));
    }
    let ones = tape.constant(Tensor::full(r, 1, T::one()));
    let u = tape.constant(Tensor::new(r, 1, ucol));
    let v = tape.constant(Tensor::new(r, 1, vcol));
    let fwd_scaled = tape.mul_col_broadcast(frame.forward, frame.focal);
    let a = tape.matmul(u, frame.right);
    let b = tape.matmul(v, frame.up);
    let cpart = tape.matmul(ones, fwd_scaled);
    let ab = tape.add(a, b);
    let dir = tape.add(ab, cpart);
    let dirs = normalize_rows(tape, dir);
    let origins = tape.matmul(ones, frame.eye);
    Ok(RayBatch { origins, dirs, pixels: pixels.to_vec() })
}

// ---------------------------------------------------------------------------
// Quadrant initialization

/// Coarse pose label: which octant the camera sits in, relative to the object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuadrantLabel {
    pub right: bool,
    pub above: bool,
    pub front: bool,
}

impl QuadrantLabel {
    pub fn signs(&self) -> [f64; 3] {
        [
            if self.right { 1.0 } else { -1.0 },
            if self.above { 1.0 } else { -1.0 },
            if self.front { 1.0 } else { -1.0 },
        ]
    }
}

/// Place an eye near the octant's canonical direction (±1,±1,±1)/√3 scaled
/// to `radius`, with seeded angular jitter of up to ±`jitter_deg` that keeps
/// the eye inside its labeled octant.
pub fn quadrant_init<T: Real>(
    label: QuadrantLabel,
    radius: f64,
    jitter_deg: f64,
    seed: u64,
    width: usize,
    height: usize,
) -> CameraPose<T> {
    let s = label.signs();
    let phi0 = s[0].atan2(s[2]);
    let theta0 = (s[1] / 3.0f64.sqrt()).asin();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = jitter_deg.to_radians();
    let (dphi, dtheta) = if j > 0.0 {
        (rng.gen_range(-j..j), rng.gen_range(-j..j))
    } else {
        (0.0, 0.0)
    };
    let (phi, theta) = (phi0 + dphi, theta0 + dtheta);
    let eye = [
        c::<T>(radius * theta.cos() * phi.sin()),
        c::<T>(radius * theta.sin()),
        c::<T>(radius * theta.cos() * phi.cos()),
    ];
    CameraPose::new(eye, width, height)
}

// ---------------------------------------------------------------------------
// Loss statistics and the camera multiplex

/// Circular buffer of recent (mask, image) loss pairs with running statistics.
#[derive(Clone, Debug)]
pub struct LossBuffer {
    capacity: usize,
    mask: Vec<f64>,
    image: Vec<f64>,
    head: usize,
    filled: bool,
}

pub const LOSS_SIGMA_FLOOR: f64 = 1e-8;

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, LOSS_SIGMA_FLOOR);
    }
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt().max(LOSS_SIGMA_FLOOR))
}

impl LossBuffer {
    pub fn new(capacity: usize) -> Self {
        LossBuffer { capacity, mask: Vec::new(), image: Vec::new(), head: 0, filled: false }
    }

    pub fn push(&mut self, mask_loss: f64, image_loss: f64) {
        if self.mask.len() < self.capacity {
            self.mask.push(mask_loss);
            self.image.push(image_loss);
        } else {
            self.mask[self.head] = mask_loss;
            self.image[self.head] = image_loss;
            self.filled = true;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// (μ, σ) over current occupancy, σ floored at 1e-8.
    pub fn mask_stats(&self) -> (f64, f64) {
        mean_std(&self.mask)
    }

    pub fn image_stats(&self) -> (f64, f64) {
        mean_std(&self.image)
    }

    /// Smoothed combined loss used for multiplex ranking.
    pub fn smoothed(&self) -> f64 {
        if self.is_empty() {
            f64::INFINITY
        } else {
            self.mask_stats().0 + self.image_stats().0
        }
    }

    /// Full internal state, for checkpointing.
    pub fn raw_state(&self) -> (usize, &[f64], &[f64], usize, bool) {
        (self.capacity, &self.mask, &self.image, self.head, self.filled)
    }

    pub fn from_raw(
        capacity: usize,
        mask: Vec<f64>,
        image: Vec<f64>,
        head: usize,
        filled: bool,
    ) -> Self {
        assert_eq!(mask.len(), image.len());
        assert!(mask.len() <= capacity && head < capacity.max(1));
        LossBuffer { capacity, mask, image, head, filled }
    }
}

#[derive(Clone, Debug)]
pub struct MultiplexMember<T> {
    pub pose: CameraPose<T>,
    pub losses: LossBuffer,
}

/// Candidate poses for one image; member 0 is the current best.
#[derive(Clone, Debug)]
pub struct Multiplex<T> {
    pub members: Vec<MultiplexMember<T>>,
}

pub const MULTIPLEX_BUFFER_CAPACITY: usize = 1000;

/// `m` candidates around `pose`: member 0 is the unjittered input, the rest
/// jitter the initial eye by up to ±`jitter_deg` on both spherical angles.
/// All members share the focal initialization.
pub fn spawn_multiplex<T: Real>(pose: &CameraPose<T>, m: usize, jitter_deg: f64, seed: u64) -> Multiplex<T> {
    assert!(m >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = Vec::with_capacity(m);
    members.push(MultiplexMember { pose: pose.clone(), losses: LossBuffer::new(MULTIPLEX_BUFFER_CAPACITY) });
    let e = [pose.p_eye[0].to_f64_(), pose.p_eye[1].to_f64_(), pose.p_eye[2].to_f64_()];
    let radius = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let rho = (e[0] * e[0] + e[2] * e[2]).sqrt();
    let theta0 = (e[1] / radius.max(1e-12)).asin();
    let phi0 = e[0].atan2(e[2]);
    let _ = rho;
    let j = jitter_deg.to_radians();
    for _ in 1..m {
        let mut p = pose.clone();
        if j > 0.0 {
            let (dphi, dtheta) = (rng.gen_range(-j..j), rng.gen_range(-j..j));
            let (phi, theta) = (phi0 + dphi, theta0 + dtheta);
            p.p_eye = [
                c::<T>(radius * theta.cos() * phi.sin()),
                c::<T>(radius * theta.sin()),
                c::<T>(radius * theta.cos() * phi.cos()),
            ];
        }
        members.push(MultiplexMember { pose: p, losses: LossBuffer::new(MULTIPLEX_BUFFER_CAPACITY) });
    }
    Multiplex { members }
}

impl<T: Real> Multiplex<T> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Reorder so member 0 has the lowest smoothed loss (stable on ties).
    pub fn rank(&mut self) {
        let best = self
            .members
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.losses.smoothed().partial_cmp(&b.losses.smoothed()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if best != 0 {
            let m = self.members.remove(best);
            self.members.insert(0, m);
        }
    }

    /// Remove the member with the highest smoothed loss (on ties the later
    /// index is removed, so earlier members survive). Never removes the last
    /// member; surviving members are untouched. Returns the removed index.
    pub fn fade_worst(&mut self) -> Option<usize> {
        if self.members.len() <= 1 {
            return None;
        }
        let mut worst = 0;
        let mut worst_loss = f64::NEG_INFINITY;
        for (i, m) in self.members.iter().enumerate() {
            let l = m.losses.smoothed();
            if l >= worst_loss {
                worst_loss = l;
                worst = i;
            }
        }
        self.members.remove(worst);
        self.rank();
        Some(worst)
    }
}

// ---------------------------------------------------------------------------
// Perspective warp between multiplex members

/// Result of warping one pixel into another member's image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpedPoint<T> {
    pub px: T,
    pub py: T,
    /// False when the world point lands behind or outside the target frustum.
    pub valid: bool,
}

/// Unproject pixels of `src` at the given ray depths and reproject into
/// `dst`. Depth is the distance along the (unit) source ray.
pub fn project_points<T: Real>(
    src: &CameraPose<T>,
    dst: &CameraPose<T>,
    pixels: &[(T, T)],
    depths: &[T],
) -> Result<Vec<WarpedPoint<T>>> {
    assert_eq!(pixels.len(), depths.len());
    let fs = src.frame()?;
    let fd = dst.frame()?;
    let mut out = Vec::with_capacity(pixels.len());
    for (&(px, py), &t) in pixels.iter().zip(depths.iter()) {
        let (o, d) = src.ray(&fs, px, py)?;
        let world = [o[0] + d[0] * t, o[1] + d[1] * t, o[2] + d[2] * t];
        let q = [world[0] - fd.eye[0], world[1] - fd.eye[1], world[2] - fd.eye[2]];
        let z = dot(q, fd.forward);
        if z <= c(1e-9) {
            out.push(WarpedPoint { px: T::zero(), py: T::zero(), valid: false });
            continue;
        }
        let u = dot(q, fd.right) / z * fd.focal + c::<T>(dst.width as f64 / 2.0);
        let v = -dot(q, fd.up) / z * fd.focal + c::<T>(dst.height as f64 / 2.0);
        let inside = u >= T::zero()
            && u <= c(dst.width as f64)
            && v >= T::zero()
            && v <= c(dst.height as f64);
        out.push(WarpedPoint { px: u, py: v, valid: inside });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Procrustes pose evaluation

#[derive(Clone, Debug)]
pub struct AlignmentReport {
    pub rotation: nalgebra::Matrix3<f64>,
    pub translation: nalgebra::Vector3<f64>,
    pub scale: f64,
    pub rotation_errors_deg: Vec<f64>,
    pub translation_errors: Vec<f64>,
    pub mean_rotation_deg: f64,
    pub std_rotation_deg: f64,
    pub mean_translation: f64,
    pub std_translation: f64,
}

fn pose_rotation<T: Real>(pose: &CameraPose<T>) -> Result<nalgebra::Matrix3<f64>> {
    let f = pose.frame()?;
    let col = |v: [T; 3]| nalgebra::Vector3::new(v[0].to_f64_(), v[1].to_f64_(), v[2].to_f64_());
    Ok(nalgebra::Matrix3::from_columns(&[col(f.right), col(f.up), col(f.forward)]))
}

/// Closed-form similarity (rotation, translation, scale) aligning estimated
/// eye positions onto the reference, plus per-view geodesic rotation errors
/// and post-alignment translation errors.
pub fn procrustes_align<T: Real>(
    estimated: &[CameraPose<T>],
    reference: &[CameraPose<T>],
) -> Result<AlignmentReport> {
    use nalgebra::{Matrix3, Vector3};
    if estimated.len() != reference.len() || estimated.len() < 3 {
        return Err(InvrenderError::TooFewPoses { got: estimated.len().min(reference.len()) });
    }
    let n = estimated.len();
    let to_v = |p: [f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let eyes_e: Vec<Vector3<f64>> = estimated
        .iter()
        .map(|p| {
            let e = p.eye();
            to_v([e[0].to_f64_(), e[1].to_f64_(), e[2].to_f64_()])
        })
        .collect();
    let eyes_r: Vec<Vector3<f64>> = reference
        .iter()
        .map(|p| {
            let e = p.eye();
            to_v([e[0].to_f64_(), e[1].to_f64_(), e[2].to_f64_()])
        })
        .collect();

    let mu_e = eyes_e.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_r = eyes_r.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for i in 0..n {
        let de = eyes_e[i] - mu_e;
        let dr = eyes_r[i] - mu_r;
        cov += dr * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n as f64;
    var_e /= n as f64;
    if var_e < 1e-18 {
        return Err(InvrenderError::DegenerateAlignment {
            reason: "estimated eyes coincide".into(),
        });
    }

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // collinear configurations leave the in-plane rotation unconstrained
    if sv[1] < 1e-12 * sv[0].max(1e-300) {
        return Err(InvrenderError::DegenerateAlignment {
            reason: "camera eyes are collinear".into(),
        });
    }
    let mut s_mat = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_mat[(2, 2)] = -1.0;
    }
    let rot = u * s_mat * vt;
    let scale_s = (sv[0] + sv[1] + s_mat[(2, 2)] * sv[2]) / var_e;
    let trans = mu_r - scale_s * rot * mu_e;

    let mut rot_errs = Vec::with_capacity(n);
    let mut tr_errs = Vec::with_capacity(n);
    for i in 0..n {
        let re = pose_rotation(&estimated[i])?;
        let rr = pose_rotation(&reference[i])?;
        let rel = rr.transpose() * rot * re;
        let cosang = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        rot_errs.push(cosang.acos().to_degrees());
        tr_errs.push((scale_s * rot * eyes_e[i] + trans - eyes_r[i]).norm());
    }
    let (mu_rot, sd_rot) = mean_std(&rot_errs);
    let (mu_tr, sd_tr) = mean_std(&tr_errs);
    Ok(AlignmentReport {
        rotation: rot,
        translation: trans,
        scale: scale_s,
        rotation_errors_deg: rot_errs,
        translation_errors: tr_errs,
        mean_rotation_deg: mu_rot,
        std_rotation_deg: sd_rot,
        mean_translation: mu_tr,
        std_translation: sd_tr,
    })
}

// ---------------------------------------------------------------------------
// Sidecar file formats

/// Parse quadrant labels: one `image_name L|R A|B F|K` line per image.
pub fn parse_quadrant_sidecar(text: &str) -> Result<Vec<(String, QuadrantLabel)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| InvrenderError::Dataset {
            file: "quadrants".into(),
            reason: format!("line {}: {}", lineno + 1, what),
        };
        if toks.len() != 4 {
            return Err(bad("expected `image_name L|R A|B F|K`"));
        }
        let right = match toks[1] {
            "R" => true,
            "L" => false,
            _ => return Err(bad("second field must be L or R")),
        };
        let above = match toks[2] {
            "A" => true,
            "B" => false,
            _ => return Err(bad("third field must be A or B")),
        };
        let front = match toks[3] {
            "F" => true,
            "K" => false,
            _ => return Err(bad("fourth field must be F or K")),
        };
        out.push((toks[0].to_string(), QuadrantLabel { right, above, front }));
    }
    Ok(out)
}

pub fn format_quadrant_sidecar(labels: &[(String, QuadrantLabel)]) -> String {
    let mut s = String::from("# image_name L|R A|B F|K\n");
    for (name, l) in labels {
        s.push_str(&format!(
            "{} {} {} {}\n",
            name,
            if l.right { "R" } else { "L" },
            if l.above { "A" } else { "B" },
            if l.front { "F" } else { "K" },
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn pose(eye: [f64; 3]) -> CameraPose<f64> {
        CameraPose::new(eye, 64, 64)
    }

    fn nodes_for(tape: &mut Tape<f64>, p: &CameraPose<f64>) -> PoseNodes {
        PoseNodes {
            delta_eye: tape.param(Tensor::new(1, 3, p.delta_eye.to_vec())),
            delta_dir: tape.param(Tensor::new(1, 2, p.delta_dir.to_vec())),
            roll: tape.param(Tensor::scalar(p.roll)),
            focal: tape.param(Tensor::scalar(p.focal)),
        }
    }

    #[test]
    fn zero_offsets_look_at_origin() {
        for eye in [[2.0, 1.0, 2.0], [-1.0, 0.5, 3.0], [0.5, -2.0, -0.7]] {
            let p = pose(eye);
            let f = p.frame().unwrap();
            let len = norm(eye);
            for i in 0..3 {
                assert_relative_eq!(f.forward[i], -eye[i] / len, epsilon = 1e-12);
            }
            assert_relative_eq!(norm(f.forward), 1.0, epsilon = 1e-12);
            assert_relative_eq!(dot(f.right, f.up), 0.0, epsilon = 1e-12);
            assert_relative_eq!(dot(f.right, f.forward), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn theta_offset_from_equator_reaches_pole() {
        let mut p = pose([0.0, 0.0, 3.0]);
        p.delta_dir[1] = FRAC_PI_2;
        let f = p.frame().unwrap();
        // d̂ rotates to +y, so the camera looks along -y
        assert_relative_eq!(f.forward[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn direction_offsets_clamp_to_half_pi() {
        let mut a = pose([0.0, 0.0, 3.0]);
        a.delta_dir[1] = PI;
        let mut b = pose([0.0, 0.0, 3.0]);
        b.delta_dir[1] = FRAC_PI_2;
        let (fa, fb) = (a.frame().unwrap(), b.frame().unwrap());
        for i in 0..3 {
            assert_relative_eq!(fa.forward[i], fb.forward[i], epsilon = 1e-12);
        }
        a.clamp_offsets();
        assert_relative_eq!(a.delta_dir[1], FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_eye_errors() {
        let p = pose([0.0, 0.0, 0.0]);
        assert!(matches!(p.frame(), Err(InvrenderError::DegeneratePose { .. })));
        let p = pose([0.0, 2.0, 0.0]);
        assert!(matches!(p.frame(), Err(InvrenderError::DegeneratePose { .. })));
    }

    #[test]
    fn quadrant_center_without_jitter() {
        let label = QuadrantLabel { right: false, above: false, front: false };
        let p = quadrant_init::<f64>(label, 3.0, 0.0, 1, 64, 64);
        let want = -3.0 / 3.0f64.sqrt();
        for i in 0..3 {
            assert_relative_eq!(p.p_eye[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn jittered_quadrant_stays_in_octant_and_varies() {
        let mut seen_distinct = false;
        let mut prev: Option<[f64; 3]> = None;
        for (ri, &right) in [false, true].iter().enumerate() {
            for (ai, &above) in [false, true].iter().enumerate() {
                for (fi, &front) in [false, true].iter().enumerate() {
                    let label = QuadrantLabel { right, above, front };
                    for seed in 0..20 {
                        let p = quadrant_init::<f64>(label, 2.5, 20.0, seed + (ri + ai + fi) as u64, 64, 64);
                        let s = label.signs();
                        for i in 0..3 {
                            assert!(p.p_eye[i] * s[i] > 0.0, "octant violated: {:?} {:?}", label, p.p_eye);
                        }
                        assert_relative_eq!(norm(p.p_eye), 2.5, epsilon = 1e-12);
                        if let Some(q) = prev {
                            if q != p.p_eye {
                                seen_distinct = true;
                            }
                        }
                        prev = Some(p.p_eye);
                    }
                }
            }
        }
        assert!(seen_distinct);
    }

    #[test]
    fn tape_frame_matches_plain_frame() {
        let mut p = pose([1.3, -0.8, 2.1]);
        p.delta_eye = [0.05, -0.02, 0.03];
        p.delta_dir = [0.2, -0.3];
        p.roll = 0.4;
        let f = p.frame().unwrap();
        let mut tape = Tape::new();
        let n = nodes_for(&mut tape, &p);
        let fr = frame_nodes(&mut tape, &p, &n).unwrap();
        for (node, plain) in [(fr.eye, f.eye), (fr.right, f.right), (fr.up, f.up), (fr.forward, f.forward)] {
            let v = tape.value(node);
            for i in 0..3 {
                assert_relative_eq!(v.at(0, i), plain[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn center_pixel_ray_is_forward_and_corner_angle_matches() {
        let p = pose([0.4, 1.2, -2.0]);
        let f = p.frame().unwrap();
        let (_, d) = p.ray(&f, 32.0, 32.0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(d[i], f.forward[i], epsilon = 1e-12);
        }
        let (_, dc) = p.ray(&f, 0.0, 0.0).unwrap();
        let half_diag = (32.0f64 * 32.0 + 32.0 * 32.0).sqrt();
        let want = (half_diag / p.focal).atan();
        let got = dot(dc, f.forward).clamp(-1.0, 1.0).acos();
        assert_relative_eq!(got, want, epsilon = 1e-12);
        assert_relative_eq!(norm(dc), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn tape_rays_match_plain_rays_and_are_unit() {
        let mut p = pose([1.0, 0.7, 1.9]);
        p.delta_dir = [-0.1, 0.15];
        p.roll = -0.2;
        let f = p.frame().unwrap();
        let pixels = [(3.5, 60.0), (32.0, 32.0), (0.5, 0.5), (63.5, 10.0)];
        let mut tape = Tape::new();
        let n = nodes_for(&mut tape, &p);
        let fr = frame_nodes(&mut tape, &p, &n).unwrap();
        let rays = generate_rays(&mut tape, &p, &fr, &pixels).unwrap();
        let dv = tape.value(rays.dirs);
        let ov = tape.value(rays.origins);
        for (i, &(px, py)) in pixels.iter().enumerate() {
            let (o, d) = p.ray(&f, px, py).unwrap();
            let mut n2 = 0.0;
            for j in 0..3 {
                assert_relative_eq!(dv.at(i, j), d[j], epsilon = 1e-12);
                assert_relative_eq!(ov.at(i, j), o[j], epsilon = 1e-12);
                n2 += dv.at(i, j) * dv.at(i, j);
            }
            assert_relative_eq!(n2.sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let p = pose([0.0, 1.0, 3.0]);
        let f = p.frame().unwrap();
        assert!(matches!(p.ray(&f, -1.0, 3.0), Err(InvrenderError::PixelOutOfBounds { .. })));
        assert!(matches!(p.ray(&f, 2.0, 65.0), Err(InvrenderError::PixelOutOfBounds { .. })));
    }

    #[test]
    fn ray_gradients_match_finite_differences() {
        let base = {
            let mut p = pose([1.1, -0.6, 2.3]);
            p.delta_eye = [0.02, 0.01, -0.04];
            p.delta_dir = [0.12, -0.21];
            p.roll = 0.3;
            p
        };
        let pixels = [(10.0, 50.0), (40.0, 20.0)];

        // loss = sum of all ray direction components, as a plain function of
        // the 7 learnable pose scalars
        let eval = |v: &[f64; 7]| -> f64 {
            let mut p = base.clone();
            p.delta_eye = [v[0], v[1], v[2]];
            p.delta_dir = [v[3], v[4]];
            p.roll = v[5];
            p.focal = v[6];
            let f = p.frame().unwrap();
            let mut s = 0.0;
            for &(px, py) in &pixels {
                let (_, d) = p.ray(&f, px, py).unwrap();
                s += d[0] + d[1] + d[2];
            }
            s
        };

        let mut tape = Tape::new();
        let n = nodes_for(&mut tape, &base);
        let fr = frame_nodes(&mut tape, &base, &n).unwrap();
        let rays = generate_rays(&mut tape, &base, &fr, &pixels).unwrap();
        let loss = tape.sum_all(rays.dirs);
        let grads = tape.backward(loss);
        let ge = grads.wrt(n.delta_eye, &tape);
        let gd = grads.wrt(n.delta_dir, &tape);
        let gr = grads.wrt(n.roll, &tape);
        let gf = grads.wrt(n.focal, &tape);
        let analytic = [
            ge.data()[0], ge.data()[1], ge.data()[2],
            gd.data()[0], gd.data()[1],
            gr.item(), gf.item(),
        ];

        let x0 = [
            base.delta_eye[0], base.delta_eye[1], base.delta_eye[2],
            base.delta_dir[0], base.delta_dir[1],
            base.roll, base.focal,
        ];
        for j in 0..7 {
            let h = if j == 6 { 1e-3 } else { 1e-6 };
            let mut hi = x0;
            let mut lo = x0;
            hi[j] += h;
            lo[j] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            let err = (analytic[j] - fd).abs() / fd.abs().max(1e-6);
            assert!(err < 1e-4, "pose grad {j}: analytic {} vs fd {fd}", analytic[j]);
        }
    }

    #[test]
    fn loss_buffer_wraps_and_floors_sigma() {
        let mut b = LossBuffer::new(3);
        b.push(1.0, 1.0);
        b.push(1.0, 1.0);
        assert_eq!(b.mask_stats(), (1.0, LOSS_SIGMA_FLOOR));
        b.push(5.0, 2.0);
        b.push(5.0, 2.0); // overwrites the first entry
        assert_eq!(b.len(), 3);
        let (mu, sd) = b.mask_stats();
        assert_relative_eq!(mu, 11.0 / 3.0, epsilon = 1e-12);
        assert!(sd > 1.0);
    }

    #[test]
    fn multiplex_spawn_and_fade() {
        let p = pose([1.0, 1.0, 1.0]);
        let single = spawn_multiplex(&p, 1, 15.0, 3);
        assert_eq!(single.len(), 1);
        assert_eq!(single.members[0].pose.p_eye, p.p_eye);

        let frozen = spawn_multiplex(&p, 3, 0.0, 3);
        for m in &frozen.members {
            assert_eq!(m.pose.p_eye, p.p_eye);
            assert_eq!(m.pose.focal, p.focal);
        }

        let mut mux = spawn_multiplex(&p, 4, 15.0, 3);
        assert_eq!(mux.members[0].pose.p_eye, p.p_eye);
        for m in &mux.members {
            assert_relative_eq!(norm(m.pose.p_eye), norm(p.p_eye), epsilon = 1e-12);
        }
        // give member 2 the worst loss, member 1 the best
        let losses = [0.5, 0.1, 2.0, 0.7];
        for (m, &l) in mux.members.iter_mut().zip(losses.iter()) {
            m.losses.push(l, l);
        }
        let survivors: Vec<[f64; 3]> = mux
            .members
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 2)
            .map(|(_, m)| m.pose.p_eye)
            .collect();
        mux.fade_worst();
        assert_eq!(mux.len(), 3);
        // best member promoted to front, survivors' parameters untouched
        assert_relative_eq!(mux.members[0].losses.smoothed(), 0.2, epsilon = 1e-12);
        for s in survivors {
            assert!(mux.members.iter().any(|m| m.pose.p_eye == s));
        }
        mux.fade_worst();
        mux.fade_worst();
        assert_eq!(mux.len(), 1);
        assert!(mux.fade_worst().is_none());
        assert_eq!(mux.len(), 1);
    }

    #[test]
    fn fade_tie_break_removes_later_member() {
        let p = pose([1.0, 1.0, 1.0]);
        let mut mux = spawn_multiplex(&p, 3, 10.0, 9);
        for m in mux.members.iter_mut() {
            m.losses.push(1.0, 1.0);
        }
        let keep0 = mux.members[0].pose.p_eye;
        let keep1 = mux.members[1].pose.p_eye;
        mux.fade_worst();
        assert_eq!(mux.len(), 2);
        let eyes: Vec<[f64; 3]> = mux.members.iter().map(|m| m.pose.p_eye).collect();
        assert!(eyes.contains(&keep0) && eyes.contains(&keep1));
    }

    #[test]
    fn warp_is_identity_for_same_pose() {
        let mut p = pose([1.5, 0.8, 2.2]);
        p.delta_dir = [0.1, -0.05];
        let pixels = [(12.5, 40.0), (32.0, 32.0), (55.0, 5.0)];
        let depths = [2.0, 3.3, 1.7];
        let warped = project_points(&p, &p, &pixels, &depths).unwrap();
        for (w, &(px, py)) in warped.iter().zip(pixels.iter()) {
            assert!(w.valid);
            assert_relative_eq!(w.px, px, epsilon = 1e-6);
            assert_relative_eq!(w.py, py, epsilon = 1e-6);
        }
    }

    #[test]
    fn warp_scales_with_axial_translation() {
        // move the destination camera closer along its view axis: pixel
        // offsets from the principal point must grow by depth ratio
        let src = pose([0.0, 0.0, 4.0]);
        let dst = pose([0.0, 0.0, 2.0]);
        let f = src.frame().unwrap();
        let px = (40.0, 24.0);
        // depth to the z=0 plane along this ray
        let (o, d) = src.ray(&f, px.0, px.1).unwrap();
        let t = -o[2] / d[2];
        let w = project_points(&src, &dst, &[px], &[t]).unwrap()[0];
        assert!(w.valid);
        let world_xy = [o[0] + d[0] * t, o[1] + d[1] * t];
        // dst looks down -z from (0,0,2) with the same focal
        let expect_u = world_xy[0] / 2.0 * dst.focal;
        let expect_v = world_xy[1] / 2.0 * dst.focal;
        assert_relative_eq!(w.px - 32.0, expect_u, epsilon = 1e-9);
        assert_relative_eq!(w.py - 32.0, -expect_v, epsilon = 1e-9);
        // and the offset doubled relative to the source-pixel offset
        assert_relative_eq!((w.px - 32.0) / (px.0 - 32.0), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn warp_flags_points_behind_destination() {
        let src = pose([0.0, 0.0, 3.0]);
        let dst = pose([0.0, 0.0, -3.0]);
        // a point between src and dst but behind dst's image plane direction
        let w = project_points(&src, &dst, &[(32.0, 32.0)], &[7.0]).unwrap()[0];
        assert!(!w.valid);
    }

    fn camera_ring(n: usize, radius: f64) -> Vec<CameraPose<f64>> {
        (0..n)
            .map(|i| {
                let a = 0.3 + i as f64 * std::f64::consts::TAU / n as f64;
                let y = 0.5 + 0.2 * (i as f64).sin();
                pose([radius * a.sin(), y, radius * a.cos()])
            })
            .collect()
    }

    #[test]
    fn procrustes_identity_and_recovery() {
        let poses = camera_ring(6, 2.5);
        let rep = procrustes_align(&poses, &poses).unwrap();
        assert!(rep.mean_rotation_deg < 1e-9);
        assert!(rep.mean_translation < 1e-9);
        assert_relative_eq!(rep.scale, 1.0, epsilon = 1e-9);
        assert_relative_eq!((rep.rotation - nalgebra::Matrix3::identity()).norm(), 0.0, epsilon = 1e-9);

        // rotate the whole ring about y and scale it; alignment must recover
        let ang = 0.7f64;
        let s = 1.6;
        let rot = nalgebra::Matrix3::new(
            ang.cos(), 0.0, ang.sin(),
            0.0, 1.0, 0.0,
            -ang.sin(), 0.0, ang.cos(),
        );
        let moved: Vec<CameraPose<f64>> = poses
            .iter()
            .map(|p| {
                let e = nalgebra::Vector3::new(p.p_eye[0], p.p_eye[1], p.p_eye[2]);
                let m = s * rot.transpose() * e;
                pose([m[0], m[1], m[2]])
            })
            .collect();
        let rep = procrustes_align(&moved, &poses).unwrap();
        assert_relative_eq!(rep.scale, 1.0 / s, epsilon = 1e-6);
        assert_relative_eq!((rep.rotation - rot).norm(), 0.0, epsilon = 1e-6);
        assert!(rep.mean_translation < 1e-6);
        // rotation errors are small because a rotation about y maps these
        // lookat-origin frames onto each other
        assert!(rep.mean_rotation_deg < 1e-6, "mean rot {}", rep.mean_rotation_deg);
    }

    #[test]
    fn procrustes_error_cases() {
        let poses = camera_ring(6, 2.0);
        assert!(matches!(
            procrustes_align(&poses[..2], &camera_ring(2, 2.0)[..]),
            Err(InvrenderError::TooFewPoses { .. })
        ));
        let line: Vec<CameraPose<f64>> = (0..5).map(|i| pose([0.3, 0.2, 1.0 + i as f64])).collect();
        assert!(matches!(
            procrustes_align(&line, &line),
            Err(InvrenderError::DegenerateAlignment { .. })
        ));
    }

    #[test]
    fn procrustes_invariant_to_joint_similarity() {
        let a = camera_ring(7, 3.0);
        let b: Vec<CameraPose<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut q = p.clone();
                q.delta_eye = [0.1 * (i as f64).sin(), 0.05, -0.08 * (i as f64).cos()];
                q
            })
            .collect();
        let base = procrustes_align(&b, &a).unwrap();
        // apply the same rigid transform to both sets
        // rotate about world up so the lookat frames transform equivariantly
        let ang = -0.4f64;
        let rot = nalgebra::Matrix3::new(
            ang.cos(), 0.0, ang.sin(),
            0.0, 1.0, 0.0,
            -ang.sin(), 0.0, ang.cos(),
        );
        let mv = |p: &CameraPose<f64>| {
            let e = p.eye();
            let m = 2.0 * rot * nalgebra::Vector3::new(e[0], e[1], e[2]);
            pose([m[0], m[1], m[2]])
        };
        let a2: Vec<_> = a.iter().map(mv).collect();
        let b2: Vec<_> = b.iter().map(mv).collect();
        let moved = procrustes_align(&b2, &a2).unwrap();
        // residuals are measured in reference units, so the joint scale of 2
        // carries through; rotation errors are scale-free
        assert_relative_eq!(moved.mean_translation, 2.0 * base.mean_translation, epsilon = 1e-9);
        assert_relative_eq!(moved.mean_rotation_deg, base.mean_rotation_deg, epsilon = 1e-9);
    }

    #[test]
    fn quadrant_sidecar_round_trip() {
        let labels = vec![
            ("img_000.png".to_string(), QuadrantLabel { right: true, above: false, front: true }),
            ("img_001.png".to_string(), QuadrantLabel { right: false, above: true, front: false }),
        ];
        let text = format_quadrant_sidecar(&labels);
        let parsed = parse_quadrant_sidecar(&text).unwrap();
        assert_eq!(parsed, labels);
        assert!(parse_quadrant_sidecar("img.png X A F").is_err());
        assert!(parse_quadrant_sidecar("img.png R A").is_err());
    }
}
