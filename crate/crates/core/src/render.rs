//! Cameras, hierarchical volume rendering, part blending, background fusion and the mask
//! rasterizer.
//!
//! Conventions: right-handed world with +y up. An orbit camera at zero angles sits on +z and
//! looks down -z. Camera matrices store the right, up and back axes as columns. Pixel `(i, j)`
//! has its center at `(i + 0.5, j + 0.5)` with row 0 at the top; the field of view is
//! vertical. Ray depths are Euclidean distances along unit ray directions.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{Deformation, DeformationField, FieldConfig};
use crate::error::{Error, Result};
use crate::geom::{Aabb, RigidTransform, Vec3};
use crate::headmodel::{ExpressionCode, HeadRig, Mesh, PoseCode, ShapeCode};
use crate::imageio::FeatureMap;
use crate::triplane::{DecoderParams, Radiance, TriPlane, COLOR_DIM};

pub const DEFAULT_FOV_DEG: f64 = 12.0;
pub const DEFAULT_RENDER_RES: usize = 64;
pub const COARSE_SAMPLES: usize = 48;
pub const FINE_SAMPLES: usize = 48;
/// Depth is reported as 0 below this opacity.
pub const DEPTH_OPACITY_FLOOR: f64 = 1e-4;
/// Margin applied to the rig's bounding sphere for near/far.
pub const BOUNDS_MARGIN: f64 = 1.1;

/// Orbit-camera parameters as sampled by the data pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub radius: f64,
    pub look_at: [f64; 3],
    pub fov_deg: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
            radius: 4.0,
            look_at: [0.0; 3],
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    /// Columns: right, up, back.
    pub rotation: Matrix3<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn from_pose(position: Vec3, rotation: Matrix3<f64>, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 60.0) {
            return Err(Error::contract(format!("field of view {fov_deg} outside (0, 60) degrees")));
        }
        if width == 0 || height == 0 {
            return Err(Error::contract("image resolution must be positive"));
        }
        Ok(Self {
            position,
            rotation,
            fov_deg,
            width,
            height,
        })
    }

    pub fn from_params(p: &CameraParams, width: usize, height: usize) -> Result<Self> {
        camera_from_angles(p.pitch, p.yaw, p.roll, p.radius, Vec3::from(p.look_at), p.fov_deg, width, height)
    }

    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    fn tan_half(&self) -> f64 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let th = self.tan_half();
        let x = ((px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * th * self.aspect();
        let y = (1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0) * th;
        let d = self.rotation * Vec3::new(x, y, -1.0);
        Ray {
            origin: self.position,
            dir: d.normalize(),
        }
    }

    /// Continuous pixel coordinates and view depth of `x`, or `None` behind the camera.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64, f64)> {
        let p = self.rotation.transpose() * (x - self.position);
        let z = -p.z;
        if z <= 1e-9 {
            return None;
        }
        let th = self.tan_half();
        let nx = p.x / (z * th * self.aspect());
        let ny = p.y / (z * th);
        Some(((nx + 1.0) * 0.5 * self.width as f64, (1.0 - ny) * 0.5 * self.height as f64, z))
    }

    /// The camera carried along by `t`: it sees `t(scene)` exactly as `self` sees `scene`.
    pub fn transformed(&self, t: &RigidTransform) -> Camera {
        Camera {
            position: t.apply(&self.position),
            rotation: t.rotation * self.rotation,
            ..*self
        }
    }
}

/// Orbit camera around `look_at`: position `look_at + r (sin yaw cos pitch, sin pitch,
/// cos yaw cos pitch)`, looking at `look_at` with world up +y, rolled about the view axis.
#[allow(clippy::too_many_arguments)]
pub fn camera_from_angles(
    pitch: f64,
    yaw: f64,
    roll: f64,
    radius: f64,
    look_at: Vec3,
    fov_deg: f64,
    width: usize,
    height: usize,
) -> Result<Camera> {
    if !(radius > 0.0) {
        return Err(Error::contract("camera radius must be positive"));
    }
    if pitch.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::contract("camera pitch must be inside (-pi/2, pi/2)"));
    }
    let offset = Vec3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos()) * radius;
    let back = offset / radius;
    let right = Vec3::y().cross(&back).normalize();
    let up = back.cross(&right);
    let (s, c) = roll.sin_cos();
    let right_r = right * c + up * s;
    let up_r = up * c - right * s;
    Camera::from_pose(look_at + offset, Matrix3::from_columns(&[right_r, up_r, back]), fov_deg, width, height)
}

/// Bounding sphere that limits every ray's `[near, far]` interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    /// Sphere around the origin enclosing the rig in any sampled pose, plus the margin.
    pub fn for_rig(rig: &HeadRig) -> Sphere {
        let r = rig.template().iter().map(|v| v.norm()).fold(0.0, f64::max);
        Sphere {
            center: [0.0; 3],
            radius: r * 1.2 * BOUNDS_MARGIN,
        }
    }

    pub fn interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let oc = ray.origin - Vec3::from(self.center);
        let b = oc.dot(&ray.dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let (near, far) = ((-b - s).max(1e-6), -b + s);
        (far > near).then_some((near, far))
    }
}

/// Sorted depths along one ray with their spacings and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    /// `delta[i] = t[i + 1] - t[i]`; the last one is the median of the others.
    pub delta: Vec<f64>,
    pub points: Vec<Vec3>,
    /// Bin edges of a stratified set (`t.len() + 1` values), empty otherwise.
    pub bin_edges: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl RaySamples {
    /// Builds samples from depths (sorted and deduplicated here). A single depth gets
    /// `fallback_delta` as its spacing.
    pub fn from_depths(ray: &Ray, mut t: Vec<f64>, fallback_delta: f64) -> Self {
        t.sort_by(|a, b| a.total_cmp(b));
        t.dedup();
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        if !t.is_empty() {
            let last = if delta.is_empty() { fallback_delta } else { median(&delta) };
            delta.push(last);
        }
        let points = t.iter().map(|&d| ray.at(d)).collect();
        Self {
            t,
            delta,
            points,
            bin_edges: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// One jittered sample per equal bin of `[near, far]`.
pub fn stratified_samples(ray: &Ray, near: f64, far: f64, n: usize, rng: &mut impl Rng) -> Result<RaySamples> {
    if !(near < far) || n == 0 {
        return Err(Error::contract("stratified sampling needs near < far and n > 0"));
    }
    let width = (far - near) / n as f64;
    let edges: Vec<f64> = (0..=n).map(|i| near + width * i as f64).collect();
    let t = (0..n)
        .map(|i| (edges[i] + width * rng.random::<f64>()).min(edges[i + 1]))
        .collect();
    let mut s = RaySamples::from_depths(ray, t, width);
    if s.len() == n {
        s.bin_edges = edges;
    }
    Ok(s)
}

/// Inverse-CDF draws from the piecewise-constant distribution that puts `weights[i]` on the
/// stratified bin of coarse sample `i`. Draws are stratified in CDF space; an all-zero weight
/// vector falls back to uniform. Returns only the new samples.
pub fn hierarchical_resample(
    ray: &Ray,
    coarse: &RaySamples,
    weights: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    let edges = &coarse.bin_edges;
    if edges.len() != coarse.len() + 1 || weights.len() != coarse.len() {
        return Err(Error::contract("hierarchical sampling needs stratified bins and one weight per bin"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("sampling weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    let uniform = vec![1.0; weights.len()];
    let (w, total) = if total > 0.0 { (weights, total) } else { (&uniform[..], weights.len() as f64) };
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for x in w {
        acc += x / total;
        cdf.push(acc);
    }
    let mut t = Vec::with_capacity(n);
    let mut bin = 0;
    for k in 0..n {
        let u = ((k as f64 + rng.random::<f64>()) / n as f64).min(cdf[w.len()]);
        while bin + 1 < w.len() && (cdf[bin + 1] <= u || w[bin] == 0.0) {
            bin += 1;
        }
        while w[bin] == 0.0 && bin > 0 {
            bin -= 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
        t.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    let width = (edges[edges.len() - 1] - edges[0]) / n.max(1) as f64;
    Ok(RaySamples::from_depths(ray, t, width))
}

/// Union of two sample sets, sorted, duplicates removed.
pub fn merge_samples(ray: &Ray, a: &RaySamples, b: &RaySamples) -> RaySamples {
    let fallback = a.delta.first().or(b.delta.first()).copied().unwrap_or(1.0);
    RaySamples::from_depths(ray, a.t.iter().chain(&b.t).copied().collect(), fallback)
}

/// Accumulated color, opacity and depth of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub feature: [f64; COLOR_DIM],
    pub opacity: f64,
    pub depth: f64,
}

impl Pixel {
    pub fn empty() -> Self {
        Self {
            feature: [0.0; COLOR_DIM],
            opacity: 0.0,
            depth: 0.0,
        }
    }
}

/// Per-sample weights `t_i (1 - exp(-σ_i δ_i))`, computed as `t_i - t_{i+1}` so sums telescope.
pub fn ray_weights(sigma: impl IntoIterator<Item = f64>, delta: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut trans = 1.0;
    sigma
        .into_iter()
        .zip(delta)
        .map(|(s, d)| {
            acc += s * d;
            let next = (-acc).exp();
            let w = trans - next;
            trans = next;
            w
        })
        .collect()
}

/// Transmittance `t_i` before each sample.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    sigma
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let t = (-acc).exp();
            acc += s * d;
            t
        })
        .collect()
}

pub fn integrate(samples: &RaySamples, radiances: &[Radiance]) -> Result<Pixel> {
    if samples.len() != radiances.len() {
        return Err(Error::contract(format!(
            "{} samples but {} radiance values",
            samples.len(),
            radiances.len()
        )));
    }
    Ok(integrate_unchecked(samples, radiances))
}

fn integrate_unchecked(samples: &RaySamples, radiances: &[Radiance]) -> Pixel {
    let w = ray_weights(radiances.iter().map(|r| r.sigma), &samples.delta);
    let mut px = Pixel::empty();
    let mut depth = 0.0;
    for ((wi, r), t) in w.iter().zip(radiances).zip(&samples.t) {
        px.opacity += wi;
        depth += wi * t;
        for (f, c) in px.feature.iter_mut().zip(&r.color) {
            *f += wi * c;
        }
    }
    px.opacity = px.opacity.clamp(0.0, 1.0);
    px.depth = if px.opacity > DEPTH_OPACITY_FLOOR { depth / px.opacity } else { 0.0 };
    px
}

/// Rendered feature, opacity and depth maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOut {
    pub feature: FeatureMap,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderOut {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            feature: FeatureMap::zeros(width, height, COLOR_DIM),
            opacity: vec![0.0; width * height],
            depth: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.feature.width
    }

    pub fn height(&self) -> usize {
        self.feature.height
    }

    pub fn rgb(&self) -> Vec<[f64; 3]> {
        self.feature.rgb()
    }

    fn from_pixels(width: usize, height: usize, pixels: impl Iterator<Item = Pixel>) -> Self {
        let mut out = Self::empty(width, height);
        for (i, p) in pixels.enumerate() {
            out.feature.pixel_mut(i).copy_from_slice(&p.feature);
            out.opacity[i] = p.opacity;
            out.depth[i] = p.depth;
        }
        out
    }

    pub fn opacity_map(&self) -> FeatureMap {
        FeatureMap {
            width: self.width(),
            height: self.height(),
            channels: 1,
            data: self.opacity.clone(),
        }
    }

    pub fn depth_map(&self) -> FeatureMap {
        FeatureMap {
            width: self.width(),
            height: self.height(),
            channels: 1,
            data: self.depth.clone(),
        }
    }
}

/// Sample counts, seed and scene bounds of a render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub seed: u64,
    pub bounds: Sphere,
}

impl RenderSettings {
    pub fn new(bounds: Sphere, seed: u64) -> Self {
        Self {
            coarse_samples: COARSE_SAMPLES,
            fine_samples: FINE_SAMPLES,
            seed,
            bounds,
        }
    }
}

/// Observation-space coarse sample positions of every ray, in pixel order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoarseSamples {
    pub points: Vec<Vec3>,
    /// Start of each pixel's run in `points` (`pixel_count + 1` entries).
    pub offsets: Vec<usize>,
}

impl CoarseSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pixel whose ray produced sample `i`.
    pub fn pixel_of(&self, i: usize) -> usize {
        self.offsets.partition_point(|&o| o <= i) - 1
    }
}

/// The rng stream of pixel `index` under `seed`.
pub fn pixel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct RayResult {
    pixels: Vec<Pixel>,
    coarse: Vec<Vec3>,
}

/// Two-pass rendering of `branches` radiance fields sharing one set of ray samples. The fine
/// pass is driven by the summed coarse weights of all branches.
fn render_branches<F>(camera: &Camera, settings: &RenderSettings, branches: usize, eval: F) -> (Vec<RenderOut>, CoarseSamples)
where
    F: Fn(&Vec3, &mut [Radiance]) + Sync,
{
    let (w, h) = (camera.width, camera.height);
    let blank = Radiance {
        sigma: 0.0,
        color: [0.0; COLOR_DIM],
    };
    let results: Vec<RayResult> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let ray = camera.ray(idx % w, idx / w);
            let Some((near, far)) = settings.bounds.interval(&ray) else {
                return RayResult {
                    pixels: vec![Pixel::empty(); branches],
                    coarse: Vec::new(),
                };
            };
            let mut rng = pixel_rng(settings.seed, idx);
            let coarse = stratified_samples(&ray, near, far, settings.coarse_samples, &mut rng)
                .expect("near < far and n > 0 checked");
            let mut rad = vec![vec![blank; coarse.len()]; branches];
            let mut buf = vec![blank; branches];
            for (i, x) in coarse.points.iter().enumerate() {
                eval(x, &mut buf);
                for b in 0..branches {
                    rad[b][i] = buf[b];
                }
            }
            if settings.fine_samples == 0 || coarse.bin_edges.is_empty() {
                let pixels = rad.iter().map(|r| integrate_unchecked(&coarse, r)).collect();
                return RayResult {
                    pixels,
                    coarse: coarse.points,
                };
            }
            let mut weights = vec![0.0; coarse.len()];
            for r in &rad {
                for (acc, wi) in weights.iter_mut().zip(ray_weights(r.iter().map(|x| x.sigma), &coarse.delta)) {
                    *acc += wi;
                }
            }
            let fine = hierarchical_resample(&ray, &coarse, &weights, settings.fine_samples, &mut rng)
                .expect("bins and weights aligned");
            let merged = merge_samples(&ray, &coarse, &fine);
            // reuse coarse radiance, evaluate only new depths
            let mut merged_rad = vec![Vec::with_capacity(merged.len()); branches];
            let mut ci = 0;
            for (t, x) in merged.t.iter().zip(&merged.points) {
                if ci < coarse.len() && coarse.t[ci] == *t {
                    for b in 0..branches {
                        merged_rad[b].push(rad[b][ci]);
                    }
                    ci += 1;
                } else {
                    eval(x, &mut buf);
                    for b in 0..branches {
                        merged_rad[b].push(buf[b]);
                    }
                }
            }
            let pixels = merged_rad.iter().map(|r| integrate_unchecked(&merged, r)).collect();
            RayResult {
                pixels,
                coarse: coarse.points,
            }
        })
        .collect();

    let mut coarse = CoarseSamples {
        points: Vec::new(),
        offsets: Vec::with_capacity(w * h + 1),
    };
    for r in &results {
        coarse.offsets.push(coarse.points.len());
        coarse.points.extend_from_slice(&r.coarse);
    }
    coarse.offsets.push(coarse.points.len());
    let outs = (0..branches)
        .map(|b| RenderOut::from_pixels(w, h, results.iter().map(|r| r.pixels[b])))
        .collect();
    (outs, coarse)
}

fn check_decoder(t: &TriPlane, dec: &DecoderParams) -> Result<()> {
    if t.channels() != dec.input_dim {
        return Err(Error::contract(format!(
            "tri-plane has {} channels but the decoder expects {}",
            t.channels(),
            dec.input_dim
        )));
    }
    Ok(())
}

/// Head and part renders of one frame plus the retained coarse samples.
#[derive(Clone, Debug)]
pub struct GenHeadRender {
    pub head: RenderOut,
    pub part: RenderOut,
    pub coarse: CoarseSamples,
}

/// Renders the head and part tri-planes through the deformation field: each sample `x` is
/// looked up at `x + dx_head` in `t_head` and at `x + dx_part` in `t_part`.
pub fn render_genhead(
    t_head: &TriPlane,
    t_part: &TriPlane,
    dec: &DecoderParams,
    field: &dyn Deformation,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<GenHeadRender> {
    check_decoder(t_head, dec)?;
    check_decoder(t_part, dec)?;
    let c = dec.input_dim;
    let (mut outs, coarse) = render_branches(camera, settings, 2, |x, out| {
        let d = field.deform(x);
        let mut f = vec![0.0; c];
        t_head.sample_into(&(x + d.dx_head), &mut f);
        out[0] = dec.decode_unchecked(&f);
        t_part.sample_into(&(x + d.dx_part), &mut f);
        out[1] = dec.decode_unchecked(&f);
    });
    let part = outs.pop().unwrap();
    let head = outs.pop().unwrap();
    Ok(GenHeadRender { head, part, coarse })
}

/// Single tri-plane render through the head branch of `field`.
pub fn render_triplane(
    t: &TriPlane,
    dec: &DecoderParams,
    field: &dyn Deformation,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOut> {
    check_decoder(t, dec)?;
    let c = dec.input_dim;
    let (mut outs, _) = render_branches(camera, settings, 1, |x, out| {
        let mut f = vec![0.0; c];
        t.sample_into(&(x + field.deform(x).dx_head), &mut f);
        out[0] = dec.decode_unchecked(&f);
    });
    Ok(outs.pop().unwrap())
}

/// Renders any point function (density, color features) with the same sampler.
pub fn render_function(
    camera: &Camera,
    settings: &RenderSettings,
    f: impl Fn(&Vec3) -> Radiance + Sync,
) -> RenderOut {
    let (mut outs, _) = render_branches(camera, settings, 1, |x, out| out[0] = f(x));
    outs.pop().unwrap()
}

/// Rasterized part mask and correspondence map.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    pub width: usize,
    pub height: usize,
    /// 1 where a face of the requested set is front-most, else 0.
    pub mask: Vec<f64>,
    /// Template coordinates of the front-most surface point, normalized to `[0, 1]^3`.
    pub corr: Vec<[f64; 3]>,
    /// Front-most face per pixel.
    pub face: Vec<Option<u32>>,
}

impl MaskMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            mask: vec![value; width * height],
            corr: vec![[0.0; 3]; width * height],
            face: vec![None; width * height],
        }
    }

    pub fn mask_map(&self) -> FeatureMap {
        FeatureMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.mask.clone(),
        }
    }

    pub fn corr_map(&self) -> FeatureMap {
        FeatureMap {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.corr.iter().flatten().copied().collect(),
        }
    }
}

/// Signed doubled area of `(a, b, p)` in pixel space.
#[inline]
pub fn edge_function(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffered rasterization at pixel centers. A pixel is covered when all three edge
/// functions share a sign (zero counts as inside); both windings are drawn. Barycentrics are
/// perspective-corrected before interpolating template coordinates.
pub fn rasterize(mesh: &Mesh, face_set: &[u32], template: &[Vec3], camera: &Camera) -> Result<MaskMap> {
    if template.len() != mesh.vertices.len() {
        return Err(Error::contract("template and mesh vertex counts differ"));
    }
    let (w, h) = (camera.width, camera.height);
    let mut in_set = vec![false; mesh.triangles.len()];
    for &f in face_set {
        *in_set
            .get_mut(f as usize)
            .ok_or_else(|| Error::contract(format!("face {f} out of range")))? = true;
    }
    let bbox = Aabb::from_points(template);
    let ext = bbox.extent().map(|e| if e > 0.0 { e } else { 1.0 });
    let proj: Vec<Option<(f64, f64, f64)>> = mesh.vertices.iter().map(|v| camera.project(v)).collect();
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut out = MaskMap::filled(w, h, 0.0);
    for (fi, tri) in mesh.triangles.iter().enumerate() {
        let [Some(a), Some(b), Some(c)] = tri.map(|i| proj[i as usize]) else {
            continue;
        };
        let (pa, pb, pc) = ((a.0, a.1), (b.0, b.1), (c.0, c.1));
        let area = edge_function(pa, pb, pc);
        if area == 0.0 {
            continue;
        }
        let xmin = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let ymin = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let xmax = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(w);
        let ymax = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(h);
        for py in ymin..ymax {
            for px in xmin..xmax {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let l = [edge_function(pb, pc, p) / area, edge_function(pc, pa, p) / area, edge_function(pa, pb, p) / area];
                if l.iter().any(|v| *v < 0.0) {
                    continue;
                }
                let inv = [l[0] / a.2, l[1] / b.2, l[2] / c.2];
                let inv_z = inv[0] + inv[1] + inv[2];
                let z = 1.0 / inv_z;
                let idx = py * w + px;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    let bary = inv.map(|v| v * z);
                    let mut u = Vec3::zeros();
                    for (k, vi) in tri.iter().enumerate() {
                        u += template[*vi as usize] * bary[k];
                    }
                    let n = (u - bbox.min).component_div(&ext);
                    out.corr[idx] = [n.x, n.y, n.z];
                    out.mask[idx] = if in_set[fi] { 1.0 } else { 0.0 };
                    out.face[idx] = Some(fi as u32);
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn lerp_exact(a: f64, b: f64, m: f64) -> f64 {
    if m == 0.0 {
        a
    } else if m == 1.0 {
        b
    } else {
        a * (1.0 - m) + b * m
    }
}

/// `I_f = I_h (1 - M_p) + I_p M_p` on features, opacity and depth.
pub fn blend(head: &RenderOut, part: &RenderOut, mask: &MaskMap) -> Result<RenderOut> {
    let (w, h) = (head.width(), head.height());
    if part.width() != w || part.height() != h || mask.width != w || mask.height != h {
        return Err(Error::contract("blend inputs must share one resolution"));
    }
    let mut out = head.clone();
    for i in 0..w * h {
        let m = mask.mask[i];
        for (o, p) in out.feature.pixel_mut(i).iter_mut().zip(part.feature.pixel(i)) {
            *o = lerp_exact(*o, *p, m);
        }
        out.opacity[i] = lerp_exact(head.opacity[i], part.opacity[i], m);
        out.depth[i] = lerp_exact(head.depth[i], part.depth[i], m);
    }
    Ok(out)
}

/// `I_lr = I_f I_opa + I_bg (1 - I_opa)` with the foreground's own opacity.
pub fn fuse(fg: &RenderOut, background: &FeatureMap) -> Result<FeatureMap> {
    if !fg.feature.same_shape(background) {
        return Err(Error::contract("foreground and background maps differ in shape"));
    }
    let mut out = background.clone();
    for i in 0..out.pixel_count() {
        let a = fg.opacity[i];
        for (o, f) in out.pixel_mut(i).iter_mut().zip(fg.feature.pixel(i)) {
            *o = lerp_exact(*o, *f, a);
        }
    }
    Ok(out)
}

/// Everything one synthesized frame produces.
#[derive(Clone, Debug)]
pub struct FullRender {
    pub lr: FeatureMap,
    pub foreground: RenderOut,
    pub head: RenderOut,
    pub part: RenderOut,
    pub mask: MaskMap,
    pub coarse: CoarseSamples,
    pub field: DeformationField,
}

/// Deformation field, head/part render, mask rasterization, blending and fusion in one call.
#[allow(clippy::too_many_arguments)]
pub fn render_full(
    t_head: &TriPlane,
    t_part: &TriPlane,
    dec: &DecoderParams,
    rig: &HeadRig,
    alpha: &ShapeCode,
    beta: &ExpressionCode,
    pose: &PoseCode,
    camera: &Camera,
    background: &FeatureMap,
    settings: &RenderSettings,
    field_config: FieldConfig,
) -> Result<FullRender> {
    let field = DeformationField::new(rig, alpha, beta, pose, field_config)?;
    let gh = render_genhead(t_head, t_part, dec, &field, camera, settings)?;
    let mesh = rig.evaluate_mesh(alpha, beta, pose)?;
    let mask = rasterize(&mesh, &rig.mask_faces(), rig.template(), camera)?;
    let foreground = blend(&gh.head, &gh.part, &mask)?;
    let lr = fuse(&foreground, background)?;
    Ok(FullRender {
        lr,
        foreground,
        head: gh.head,
        part: gh.part,
        mask,
        coarse: gh.coarse,
        field,
    })
}

/// Peak signal-to-noise ratio in dB for values with peak 1.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::IdentityField;
    use crate::triplane::{bake_analytic, AnalyticField, SeparableSpec};

    fn cam(w: usize, h: usize) -> Camera {
        camera_from_angles(0.0, 0.0, 0.0, 4.0, Vec3::zeros(), 12.0, w, h).unwrap()
    }

    #[test]
    fn orbit_conventions() {
        let c = cam(8, 8);
        assert!((c.position - Vec3::new(0.0, 0.0, 4.0)).norm() < 1e-15);
        assert!((c.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        let m = camera_from_angles(0.0, std::f64::consts::PI, 0.0, 4.0, Vec3::zeros(), 12.0, 8, 8).unwrap();
        assert!((m.position - Vec3::new(0.0, 0.0, -4.0)).norm() < 1e-12);
        let up = camera_from_angles(0.3, 0.0, 0.0, 4.0, Vec3::zeros(), 12.0, 8, 8).unwrap();
        assert!(up.position.y > 0.0);
        assert!(camera_from_angles(0.0, 0.0, 0.0, 4.0, Vec3::zeros(), 60.0, 8, 8).is_err());
        assert!(camera_from_angles(0.0, 0.0, 0.0, -1.0, Vec3::zeros(), 12.0, 8, 8).is_err());
    }

    #[test]
    fn project_inverts_ray() {
        let c = camera_from_angles(0.2, -0.4, 0.1, 4.1, Vec3::new(0.01, 0.0, 0.03), 12.0, 32, 24).unwrap();
        for (px, py) in [(0, 0), (31, 23), (10, 17)] {
            let r = c.ray(px, py);
            let (u, v, _) = c.project(&r.at(3.0)).unwrap();
            assert!((u - (px as f64 + 0.5)).abs() < 1e-9 && (v - (py as f64 + 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn stratified_one_per_bin_and_reproducible() {
        let r = cam(1, 1).ray(0, 0);
        let s = stratified_samples(&r, 1.0, 3.0, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (i, t) in s.t.iter().enumerate() {
            assert!(*t >= s.bin_edges[i] && *t <= s.bin_edges[i + 1]);
        }
        assert!(s.delta.iter().all(|d| *d > 0.0));
        let again = stratified_samples(&r, 1.0, 3.0, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn fine_samples_stay_in_delta_bin() {
        let r = cam(1, 1).ray(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = stratified_samples(&r, 2.0, 6.0, 48, &mut rng).unwrap();
        let mut w = vec![0.0; 48];
        w[17] = 0.7;
        let f = hierarchical_resample(&r, &s, &w, 48, &mut rng).unwrap();
        for t in &f.t {
            assert!(*t >= s.bin_edges[17] && *t <= s.bin_edges[18]);
        }
    }

    #[test]
    fn uniform_weights_give_uniform_fine_samples() {
        let r = cam(1, 1).ray(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = stratified_samples(&r, 0.0_f64.max(1.0), 2.0, 48, &mut rng).unwrap();
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            let f = hierarchical_resample(&r, &s, &[1.0; 48], 100, &mut rng).unwrap();
            draws.extend(f.t.iter().map(|t| t - 1.0));
        }
        draws.sort_by(|a, b| a.total_cmp(b));
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.1, "KS {ks}");
    }

    fn constant(sigma: f64, c: f64) -> Radiance {
        Radiance {
            sigma,
            color: [c; COLOR_DIM],
        }
    }

    #[test]
    fn integrate_limits() {
        let r = cam(1, 1).ray(0, 0);
        let s = RaySamples::from_depths(&r, vec![1.0, 2.0, 3.0], 1.0);
        let px = integrate(&s, &[constant(0.0, 0.4); 3]).unwrap();
        assert_eq!((px.opacity, px.depth, px.feature[0]), (0.0, 0.0, 0.0));
        let px = integrate(&s, &[constant(0.0, 0.1), constant(1e6, 0.8), constant(0.0, 0.3)]).unwrap();
        assert!((px.opacity - 1.0).abs() < 1e-12 && (px.depth - 2.0).abs() < 1e-12);
        assert!((px.feature[0] - 0.8).abs() < 1e-12);
        assert!(integrate(&s, &[constant(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn telescoping_closed_form() {
        let r = cam(1, 1).ray(0, 0);
        let (sigma, len) = (1.7, 0.9);
        for n in [2usize, 48, 256] {
            let t = (0..n).map(|i| 1.0 + len * i as f64 / n as f64).collect();
            let s = RaySamples::from_depths(&r, t, len / n as f64);
            let px = integrate(&s, &vec![constant(sigma, 0.6); n]).unwrap();
            let want = 1.0 - (-sigma * len).exp();
            assert!((px.opacity - want).abs() < 1e-14, "n={n}");
            assert!((px.feature[3] - 0.6 * want).abs() < 1e-14);
        }
    }

    #[test]
    fn transmittance_non_increasing() {
        let t = transmittance(&[0.5, 0.0, 3.0, 1.0], &[0.1, 0.2, 0.1, 0.3]);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn identity_field_render_matches_plain_render() {
        let spec = AnalyticField::Separable(SeparableSpec {
            radii: [0.3, 0.36, 0.32],
            sharpness: 6.0,
            seed: 1,
        });
        let (t, dec) = bake_analytic(&spec, 16, 32).unwrap();
        let c = cam(8, 8);
        let settings = RenderSettings::new(
            Sphere {
                center: [0.0; 3],
                radius: 0.5,
            },
            4,
        );
        let a = render_genhead(&t, &t, &dec, &IdentityField, &c, &settings).unwrap();
        let plain = render_function(&c, &settings, |x| dec.decode(&t.sample(x)).unwrap());
        assert_eq!(a.head, plain);
        assert_eq!(a.part, plain);
        assert!(plain.opacity.iter().any(|o| *o > 0.5));
    }

    #[test]
    fn single_triangle_matches_half_space_oracle() {
        let c = cam(16, 16);
        let verts = vec![Vec3::new(-0.2, -0.15, 0.0), Vec3::new(0.25, -0.1, 0.0), Vec3::new(0.0, 0.3, 0.0)];
        let mesh = Mesh::new(verts.clone(), vec![[0, 1, 2]]);
        let m = rasterize(&mesh, &[0], &verts, &c).unwrap();
        let p: Vec<(f64, f64)> = verts.iter().map(|v| c.project(v).map(|q| (q.0, q.1)).unwrap()).collect();
        for py in 0..16 {
            for px in 0..16 {
                let q = (px as f64 + 0.5, py as f64 + 0.5);
                let e = [edge_function(p[0], p[1], q), edge_function(p[1], p[2], q), edge_function(p[2], p[0], q)];
                let inside = e.iter().all(|v| *v >= 0.0) || e.iter().all(|v| *v <= 0.0);
                assert_eq!(m.mask[py * 16 + px] == 1.0, inside, "pixel {px},{py}");
            }
        }
        let none = rasterize(&mesh, &[], &verts, &c).unwrap();
        assert!(none.mask.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nearer_triangle_wins() {
        let c = cam(8, 8);
        let big = |z: f64| [Vec3::new(-3.0, -3.0, z), Vec3::new(3.0, -3.0, z), Vec3::new(0.0, 3.0, z)];
        let verts: Vec<Vec3> = big(0.0).into_iter().chain(big(0.3)).collect();
        let mesh = Mesh::new(verts.clone(), vec![[0, 1, 2], [3, 4, 5]]);
        let m = rasterize(&mesh, &[0], &verts, &c).unwrap();
        assert!(m.face.iter().all(|f| *f == Some(1)));
        assert!(m.mask.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn blend_and_fuse_corners() {
        let mut h = RenderOut::empty(2, 2);
        let mut p = RenderOut::empty(2, 2);
        for i in 0..4 {
            h.feature.pixel_mut(i).fill(0.25 + i as f64);
            p.feature.pixel_mut(i).fill(-0.0);
            h.opacity[i] = 0.3;
            p.opacity[i] = 0.9;
        }
        assert_eq!(blend(&h, &p, &MaskMap::filled(2, 2, 0.0)).unwrap(), h);
        assert_eq!(blend(&h, &p, &MaskMap::filled(2, 2, 1.0)).unwrap(), p);
        let mut checker = MaskMap::filled(2, 2, 0.0);
        checker.mask = vec![1.0, 0.0, 0.0, 1.0];
        let b = blend(&h, &p, &checker).unwrap();
        for i in 0..4 {
            let src = if checker.mask[i] == 1.0 { &p } else { &h };
            assert_eq!(b.feature.pixel(i), src.feature.pixel(i));
            assert_eq!(b.opacity[i], src.opacity[i]);
        }
        assert!(blend(&h, &RenderOut::empty(3, 2), &checker).is_err());

        let mut bg = FeatureMap::zeros(2, 2, COLOR_DIM);
        bg.data.iter_mut().for_each(|v| *v = 0.75);
        h.opacity = vec![1.0; 4];
        assert_eq!(fuse(&h, &bg).unwrap(), h.feature);
        h.opacity = vec![0.0; 4];
        assert_eq!(fuse(&h, &bg).unwrap(), bg);
        h.opacity = vec![0.5; 4];
        let mid = fuse(&h, &bg).unwrap();
        assert!((mid.pixel(0)[0] - 0.5 * (0.25 + 0.75)).abs() < 1e-15);
    }
}
