//! Volume rendering by quadrature and Cook-Torrance shading under a
//! per-image analytic illumination model (ambient + spherical-Gaussian
//! lobes), plus PNG/HDR output helpers.
//!
//! Everything that needs gradients is expressed as tape ops over `[rays *
//! samples, c]` blocks; the per-ray transmittance prefix runs over the
//! columns of a `[rays, samples]` reshape.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::cameras::RayBatch;
use crate::error::{InvrenderError, Result};
use crate::field::FieldNetwork;
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

pub const SCENE_RADIUS: f64 = 1.5;

#[derive(Clone, Debug)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    /// Scene bounding-sphere radius; ray spans come from its intersection.
    pub radius: f64,
    /// Blend weight: out = λ_b·radiance + (1−λ_b)·shaded, applied per pixel
    /// after compositing.
    pub lambda_blend: f64,
    /// Stratified per-sample jitter (deterministic per pixel from the seed).
    pub jitter: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { samples_per_ray: 24, radius: SCENE_RADIUS, lambda_blend: 1.0, jitter: true }
    }
}

// ---------------------------------------------------------------------------
// Illumination

/// Learnable per-image illumination: raw (pre-softplus) ambient and K
/// spherical-Gaussian lobes. Substitute for a pretrained illumination prior.
#[derive(Clone, Copy, Debug)]
pub struct IlluminationParams {
    pub ambient: ParamId,
    /// `[K, 3]` raw axes, normalized on use.
    pub axes: ParamId,
    /// `[K, 1]` raw sharpness.
    pub sharpness: ParamId,
    /// `[K, 3]` raw colors.
    pub colors: ParamId,
}

pub const ILLUM_LOBES: usize = 3;

pub fn register_illumination<T: Real>(
    store: &mut ParamStore<T>,
    image: usize,
    lobes: usize,
    seed: u64,
) -> IlluminationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (image as u64).wrapping_mul(0x9e37_79b9));
    // softplus(0.5) ≈ 0.97, softplus(-0.5) ≈ 0.47: start mildly lit
    let ambient = store.add(
        &format!("illum.{image}.ambient"),
        Tensor::full(1, 3, c(-0.5)),
        ParamGroup::Network,
    );
    let mut axes = Tensor::zeros(lobes, 3);
    for l in 0..lobes {
        // spread initial lobes around the upper hemisphere with jitter
        let phi: f64 = l as f64 / lobes as f64 * std::f64::consts::TAU + rng.gen_range(-0.3..0.3);
        let tilt: f64 = 0.7 + rng.gen_range(-0.2..0.2);
        axes.set(l, 0, c(tilt.cos() * phi.sin()));
        axes.set(l, 1, c(tilt.sin()));
        axes.set(l, 2, c(tilt.cos() * phi.cos()));
    }
    let axes = store.add(&format!("illum.{image}.axes"), axes, ParamGroup::Network);
    let sharpness = store.add(
        &format!("illum.{image}.sharpness"),
        Tensor::full(lobes, 1, c(5.0)),
        ParamGroup::Network,
    );
    let colors = store.add(
        &format!("illum.{image}.colors"),
        Tensor::full(lobes, 3, c(0.5)),
        ParamGroup::Network,
    );
    IlluminationParams { ambient, axes, sharpness, colors }
}

/// Derived on-tape illumination: everything already in its legal range.
#[derive(Clone, Copy, Debug)]
pub struct IllumNodes {
    /// `[1, 3]`, non-negative rgb.
    pub ambient: NodeId,
    /// `[K, 3]`, unit rows.
    pub axes: NodeId,
    /// `[K, 1]`, > 0.
    pub sharpness: NodeId,
    /// `[K, 3]`, non-negative rgb.
    pub colors: NodeId,
}

pub fn illum_nodes<T: Real>(tape: &mut Tape<T>, b: &Binding, p: &IlluminationParams) -> IllumNodes {
    let ambient = tape.softplus(b.node(p.ambient));
    let axes = tape.unit_rows(b.node(p.axes));
    let s = tape.softplus(b.node(p.sharpness));
    let sharpness = tape.add_const(s, c(1e-3));
    let colors = tape.softplus(b.node(p.colors));
    IllumNodes { ambient, axes, sharpness, colors }
}

fn bcast_row<T: Real>(tape: &mut Tape<T>, row: NodeId, n: usize) -> NodeId {
    let ones = tape.constant(Tensor::full(n, 1, T::one()));
    tape.matmul(ones, row)
}

fn col_to3<T: Real>(tape: &mut Tape<T>, col: NodeId) -> NodeId {
    let ones = tape.constant(Tensor::full(1, 3, T::one()));
    tape.matmul(col, ones)
}

fn dot_rows<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    let m = tape.mul(a, b);
    tape.sum_cols(m)
}

/// Cook-Torrance shading of a sample batch under ambient + SG lobes.
///
/// All inputs are `[n, ·]` nodes; `normal` and `view` must be unit rows.
/// Rows flagged `degenerate` fall back to the ambient diffuse term only.
pub fn shade<T: Real>(
    tape: &mut Tape<T>,
    basecolor: NodeId,
    metallic: NodeId,
    roughness: NodeId,
    normal: NodeId,
    view: NodeId,
    illum: &IllumNodes,
    degenerate: &[bool],
) -> NodeId {
    let n = tape.value(basecolor).rows();
    let lobes = tape.value(illum.axes).rows();
    let pi = std::f64::consts::PI;

    let neg_m = tape.neg(metallic);
    let one_minus_m = tape.add_const(neg_m, T::one()); // [n,1]
    let diffuse_albedo = tape.mul_col_broadcast(basecolor, one_minus_m); // (1-m)*bc

    // ambient: ambient rgb * diffuse albedo
    let amb = bcast_row(tape, illum.ambient, n);
    let ambient_term = tape.mul(amb, diffuse_albedo);

    // F0 = mix(0.04, basecolor, metallic)
    let bc_m = tape.mul_col_broadcast(basecolor, metallic);
    let base04 = tape.constant(Tensor::full(n, 3, c(0.04)));
    let diel = tape.mul_col_broadcast(base04, one_minus_m);
    let f0 = tape.add(bc_m, diel);

    // alpha = roughness^2, floored for the NDF denominator
    let alpha = tape.square(roughness);
    let alpha = tape.max_const(alpha, c(1e-4));
    let alpha2 = tape.square(alpha); // [n,1]
    let k_vis = tape.mul_const(alpha, c(0.5)); // Smith Schlick-GGX k = α/2

    let ndv = dot_rows(tape, normal, view);
    let ndv = tape.max_const(ndv, c(1e-6));

    let diffuse = tape.mul_const(diffuse_albedo, c(1.0 / pi));

    let mut lobe_sum: Option<NodeId> = None;
    for l in 0..lobes {
        let axis = tape.gather_rows(illum.axes, vec![l]); // [1,3] unit
        let color = tape.gather_rows(illum.colors, vec![l]);
        let lam = tape.gather_rows(illum.sharpness, vec![l]); // [1,1]

        // SG energy W = 2π(1 − e^{−λ})/λ; irradiance ≈ color·W·max(n·l, 0)
        let nl = tape.neg(lam);
        let e = tape.exp(nl);
        let ne = tape.neg(e);
        let om = tape.add_const(ne, T::one());
        let il = tape.recip(lam);
        let w = tape.mul(om, il);
        let w = tape.mul_const(w, c(2.0 * pi)); // [1,1]
        let energy = tape.mul_col_broadcast(color, w); // [1,3]

        let ldir = bcast_row(tape, axis, n); // [n,3]
        let ndl = dot_rows(tape, normal, ldir);
        let ndl = tape.max_const(ndl, T::zero());

        // half vector
        let h = tape.add(ldir, view);
        let h = tape.unit_rows(h);
        let ndh = dot_rows(tape, normal, h);
        let ndh = tape.max_const(ndh, T::zero());
        let hdv = dot_rows(tape, h, view);
        let hdv = tape.max_const(hdv, T::zero());

        // GGX NDF
        let ndh2 = tape.square(ndh);
        let a2m1 = tape.add_const(alpha2, -T::one());
        let core = tape.mul(ndh2, a2m1);
        let core = tape.add_const(core, T::one());
        let core2 = tape.square(core);
        let core2 = tape.mul_const(core2, c(pi));
        let core2 = tape.max_const(core2, c(1e-12));
        let inv = tape.recip(core2);
        let d_ndf = tape.mul(alpha2, inv); // [n,1]

        // Smith visibility with the (n·l), (n·v) division folded in:
        // V = 1 / (4 ((n·l)(1−k)+k) ((n·v)(1−k)+k))
        let nk = tape.neg(k_vis);
        let omk = tape.add_const(nk, T::one());
        let gl = tape.mul(ndl, omk);
        let gl = tape.add(gl, k_vis);
        let gv = tape.mul(ndv, omk);
        let gv = tape.add(gv, k_vis);
        let gg = tape.mul(gl, gv);
        let gg = tape.mul_const(gg, c(4.0));
        let gg = tape.max_const(gg, c(1e-9));
        let vis = tape.recip(gg);

        // Schlick Fresnel
        let nh = tape.neg(hdv);
        let omh = tape.add_const(nh, T::one());
        let p2 = tape.square(omh);
        let p4 = tape.square(p2);
        let p5 = tape.mul(p4, omh); // [n,1]
        let p5_3 = col_to3(tape, p5);
        let f0p5 = tape.mul(f0, p5_3);
        let fterm = tape.add(f0, p5_3);
        let fterm = tape.sub(fterm, f0p5);

        let dv = tape.mul(d_ndf, vis);
        let spec = tape.mul_col_broadcast(fterm, dv);
        // scale the diffuse lobe by (1−F) so grazing Fresnel does not double
        // count energy (keeps the furnace bound within its 5% margin)
        let ones3 = tape.constant(Tensor::full(n, 3, T::one()));
        let omf = tape.sub(ones3, fterm);
        let diff_l = tape.mul(diffuse, omf);
        let brdf = tape.add(diff_l, spec);

        let e_n = bcast_row(tape, energy, n);
        let e_cos = tape.mul_col_broadcast(e_n, ndl);
        let out = tape.mul(brdf, e_cos);
        lobe_sum = Some(match lobe_sum {
            Some(acc) => tape.add(acc, out),
            None => out,
        });
    }

    match lobe_sum {
        Some(ls) => {
            let ls = if degenerate.iter().any(|&d| d) {
                let mut keep = Tensor::full(n, 3, T::one());
                for (i, &d) in degenerate.iter().enumerate() {
                    if d {
                        for j in 0..3 {
                            keep.set(i, j, T::zero());
                        }
                    }
                }
                tape.mul_elem_const(ls, keep)
            } else {
                ls
            };
            tape.add(ambient_term, ls)
        }
        None => ambient_term,
    }
}

// ---------------------------------------------------------------------------
// Ray marching

/// Span of the ray inside the bounding sphere, or `None` for a miss.
pub fn ray_sphere_bounds(origin: [f64; 3], dir: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b = origin[0] * dir[0] + origin[1] * dir[1] + origin[2] * dir[2];
    let c0 = origin[0] * origin[0] + origin[1] * origin[1] + origin[2] * origin[2] - radius * radius;
    let disc = b * b - c0;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t1 <= 1e-6 {
        return None;
    }
    Some((t0.max(1e-6), t1))
}

/// Per-ray stratified sample positions and step sizes. Jitter is derived
/// deterministically from `seed` and the ray's pixel coordinate, so a batch
/// render equals the same rays rendered individually.
pub struct SamplePlan<T> {
    /// `[rays*samples, 1]` sample distances.
    pub ts: Tensor<T>,
    /// `[rays*samples, 1]` quadrature step sizes.
    pub deltas: Tensor<T>,
}

pub fn plan_samples<T: Real>(
    spans: &[Option<(f64, f64)>],
    pixels: &[(T, T)],
    samples: usize,
    jitter: bool,
    seed: u64,
) -> SamplePlan<T> {
    assert_eq!(spans.len(), pixels.len());
    let rays = spans.len();
    let mut ts = Vec::with_capacity(rays * samples);
    let mut deltas = Vec::with_capacity(rays * samples);
    for (ri, span) in spans.iter().enumerate() {
        let (t0, t1) = span.unwrap_or((1.0, 1.0));
        let delta = (t1 - t0) / samples as f64;
        let mut rng = {
            let (px, py) = pixels[ri];
            let h = seed
                ^ px.to_f64_().to_bits().rotate_left(17)
                ^ py.to_f64_().to_bits().rotate_left(39);
            ChaCha8Rng::seed_from_u64(h)
        };
        for s in 0..samples {
            let u = if jitter && delta > 0.0 { rng.gen_range(0.0..1.0) } else { 0.5 };
            ts.push(c::<T>(t0 + (s as f64 + u) * delta));
            deltas.push(c::<T>(delta));
        }
    }
    SamplePlan {
        ts: Tensor::new(rays * samples, 1, ts),
        deltas: Tensor::new(rays * samples, 1, deltas),
    }
}

/// Quadrature weights and aggregates from per-sample densities.
pub struct Composite {
    /// `[rays*samples, 1]`, w_i = T_i (1 − exp(−σ_i δ_i)).
    pub weights: NodeId,
    /// `[rays, 1]` = Σ w.
    pub alpha: NodeId,
    /// `[rays, 1]` expected termination distance.
    pub depth: NodeId,
}

pub fn composite<T: Real>(
    tape: &mut Tape<T>,
    sigma: NodeId,
    plan: &SamplePlan<T>,
    rays: usize,
    samples: usize,
) -> Composite {
    let sd = tape.mul_elem_const(sigma, plan.deltas.clone());
    let sd_rs = tape.reshape(sd, rays, samples);
    let acc = tape.cumsum_excl_row(sd_rs);
    let nacc = tape.neg(acc);
    let trans = tape.exp(nacc); // T_i
    let nsd = tape.neg(sd_rs);
    let e = tape.exp(nsd);
    let ne = tape.neg(e);
    let a = tape.add_const(ne, T::one()); // 1 − exp(−σδ)
    let w_rs = tape.mul(trans, a);
    let alpha = tape.sum_cols(w_rs);
    let weights = tape.reshape(w_rs, rays * samples, 1);
    let wt = tape.mul_elem_const(weights, plan.ts.clone());
    let wt_rs = tape.reshape(wt, rays, samples);
    let tsum = tape.sum_cols(wt_rs);
    let denom = tape.max_const(alpha, c(1e-8));
    let inv = tape.recip(denom);
    let depth = tape.mul(tsum, inv);
    Composite { weights, alpha, depth }
}

/// Weight-average per-sample values `[rays*samples, c]` into `[rays, c]`.
pub fn weighted_sum<T: Real>(
    tape: &mut Tape<T>,
    values: NodeId,
    weights: NodeId,
    samples: usize,
) -> NodeId {
    let wv = tape.mul_col_broadcast(values, weights);
    tape.sum_row_groups(wv, samples)
}

// ---------------------------------------------------------------------------
// Full ray rendering through the field

pub struct RayRender {
    /// `[rays, 3]` blended output color.
    pub rgb: NodeId,
    /// `[rays, 1]`.
    pub alpha: NodeId,
    /// `[rays, 1]` expected depth.
    pub depth: NodeId,
    /// `[rays, 3]` composited radiance-head color.
    pub radiance: NodeId,
    /// `[rays, 3]` composited shaded color, when shading ran.
    pub shaded: Option<NodeId>,
    /// `[rays, 3]` composited BRDF basecolor, when shading ran (drives the
    /// BRDF initialization loss).
    pub basecolor: Option<NodeId>,
    /// `[rays, 3]` weight-averaged (unnormalized) surface normal.
    pub normal: Option<NodeId>,
    /// `[rays*samples, 3]` per-sample unit normals (shading path only).
    pub normal_samples: Option<NodeId>,
    /// `[rays*samples, 3]` per-sample unit ray directions.
    pub dirs_samples: NodeId,
    /// `[rays*samples, 1]` quadrature weights.
    pub weights: NodeId,
    /// Per-sample degenerate-normal flags (shading path only).
    pub degenerate: Vec<bool>,
    /// Per-sample out-of-grid clamp flags.
    pub clamped: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real>(
    tape: &mut Tape<T>,
    field: &FieldNetwork<T>,
    b: &Binding,
    illum: Option<&IllumNodes>,
    rays: &RayBatch<T>,
    image_id: usize,
    settings: &RenderSettings,
    seed: u64,
) -> Result<RayRender> {
    let r = rays.pixels.len();
    let s = settings.samples_per_ray;
    if s < 2 {
        return Err(InvrenderError::Config("samples_per_ray must be >= 2".into()));
    }
    let shading = settings.lambda_blend < 1.0;
    if shading && illum.is_none() {
        return Err(InvrenderError::Config("shaded rendering needs illumination parameters".into()));
    }

    let spans: Vec<Option<(f64, f64)>> = {
        let ov = tape.value(rays.origins);
        let dv = tape.value(rays.dirs);
        (0..r)
            .map(|i| {
                let o = [ov.at(i, 0).to_f64_(), ov.at(i, 1).to_f64_(), ov.at(i, 2).to_f64_()];
                let d = [dv.at(i, 0).to_f64_(), dv.at(i, 1).to_f64_(), dv.at(i, 2).to_f64_()];
                ray_sphere_bounds(o, d, settings.radius)
            })
            .collect()
    };
    let plan = plan_samples(&spans, &rays.pixels, s, settings.jitter, seed);

    // sample positions: x = o + t·d, expanded to [r*s, 3]
    let expand: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat(i).take(s)).collect();
    let o_exp = tape.gather_rows(rays.origins, expand.clone());
    let d_exp = tape.gather_rows(rays.dirs, expand);
    let t_node = tape.constant(plan.ts.clone());
    let step = tape.mul_col_broadcast(d_exp, t_node);
    let x_world = tape.add(o_exp, step);
    // map the bounding box [-radius, radius]^3 into the grid domain [0,1]^3
    let x_grid = tape.mul_const(x_world, c(1.0 / (2.0 * settings.radius)));
    let x_grid = tape.add_const(x_grid, c(0.5));

    let density = field.eval_density(tape, b, x_grid, shading);
    let comp = composite(tape, density.sigma, &plan, r, s);

    let rad_samples = {
        let view_to_surface = d_exp;
        field.eval_radiance(tape, b, density.trunk, view_to_surface)
    };
    let radiance = weighted_sum(tape, rad_samples, comp.weights, s);

    let (shaded, normal, normal_samples, basecolor, degenerate) = if shading {
        let dsig = density.dsigma_dx.expect("spatial grad requested");
        let nrm = FieldNetwork::normal_from_gradient(tape, dsig);
        let brdf = field.eval_brdf(tape, b, density.trunk, &vec![image_id; r * s]);
        let view = tape.neg(d_exp); // surface → eye
        let color = shade(
            tape,
            brdf.basecolor,
            brdf.metallic,
            brdf.roughness,
            nrm.normal,
            view,
            illum.unwrap(),
            &nrm.degenerate,
        );
        let shaded = weighted_sum(tape, color, comp.weights, s);
        let normal_agg = weighted_sum(tape, nrm.normal, comp.weights, s);
        let bc_agg = weighted_sum(tape, brdf.basecolor, comp.weights, s);
        (Some(shaded), Some(normal_agg), Some(nrm.normal), Some(bc_agg), nrm.degenerate)
    } else {
        (None, None, None, None, Vec::new())
    };

    let rgb = match shaded {
        Some(sh) => {
            let lb = c::<T>(settings.lambda_blend);
            let a = tape.mul_const(radiance, lb);
            let bpart = tape.mul_const(sh, T::one() - lb);
            tape.add(a, bpart)
        }
        None => radiance,
    };

    Ok(RayRender {
        rgb,
        alpha: comp.alpha,
        depth: comp.depth,
        radiance,
        shaded,
        basecolor,
        normal,
        normal_samples,
        dirs_samples: d_exp,
        weights: comp.weights,
        degenerate,
        clamped: density.clamped,
    })
}

// ---------------------------------------------------------------------------
// Image output

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Write linear rgb (row-major, 3 floats per pixel) as an sRGB-encoded PNG.
pub fn write_png_srgb(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let data: Vec<u8> = rgb
        .iter()
        .map(|&v| (linear_to_srgb(v) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, data)
        .expect("buffer size checked above");
    img.save(path)?;
    Ok(())
}

/// Write a single-channel image as an 8-bit grayscale PNG.
pub fn write_png_gray(path: &Path, width: usize, height: usize, v: &[f64]) -> Result<()> {
    assert_eq!(v.len(), width * height);
    let data: Vec<u8> = v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, data)
        .expect("buffer size checked above");
    img.save(path)?;
    Ok(())
}

/// Raw little-endian float32 planes plus a one-line JSON header sidecar
/// (`<path>.json`).
pub fn write_hdr_raw(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), width * height * channels);
    let mut f = std::fs::File::create(path)?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    let header = format!(
        "{{\"width\": {width}, \"height\": {height}, \"channels\": {channels}, \"dtype\": \"f32le\", \"layout\": \"interleaved-row-major\"}}\n"
    );
    std::fs::write(path.with_extension(format!(
        "{}.json",
        path.extension().and_then(|e| e.to_str()).unwrap_or("raw")
    )), header)?;
    Ok(())
}
