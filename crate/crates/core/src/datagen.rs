//! Synthetic multi-view dataset generation and validation.
//!
//! A dataset directory holds `manifest.json`, the rig it was rendered with (`rig.json`) and
//! one directory per record under `records/`. Every random draw comes from a ChaCha8 stream
//! keyed by the dataset seed and the record's `(identity, motion, view)` tuple, so output does
//! not depend on thread scheduling.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{Deformation, DeformationField, FieldConfig, DEFAULT_GRID_RES};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::headmodel::{canonical_pose, ExpressionCode, HeadRig, PoseCode, ShapeCode, DEFAULT_CANONICAL_JAW};
use crate::imageio::{load_pfm, save_pfm, save_png_rgb, FeatureMap};
use crate::render::{
    blend, fuse, rasterize, render_genhead, Camera, CameraParams, CoarseSamples, RenderSettings, Sphere, COARSE_SAMPLES,
    DEFAULT_FOV_DEG, DEFAULT_RENDER_RES, FINE_SAMPLES,
};
use crate::triplane::{bake_analytic, AnalyticField, Blob, DecoderParams, EllipsoidSpec, TriPlane, COLOR_DIM};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_POINT_COUNT: usize = 4000;
pub const DEFAULT_CLIP_LENGTH: usize = 16;
pub const STATIC_SHAPE_FACTOR: f64 = 1.5;
const PTS_MAGIC: &[u8; 4] = b"PTS1";

/// Closed sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Camera and neck sampling boxes (radians and model units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub camera_pitch: Range,
    pub camera_yaw: Range,
    pub camera_roll: Range,
    pub camera_radius: Range,
    pub look_at_x: Range,
    pub look_at_y: Range,
    pub look_at_z: Range,
    pub fov_deg: f64,
    pub neck_pitch: Range,
    pub neck_yaw: Range,
    pub neck_roll: Range,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            camera_pitch: Range::new(-0.25, 0.65),
            camera_yaw: Range::new(-0.78, 0.78),
            camera_roll: Range::new(-0.25, 0.25),
            camera_radius: Range::new(3.65, 4.45),
            look_at_x: Range::new(-0.01, 0.01),
            look_at_y: Range::new(-0.01, 0.01),
            look_at_z: Range::new(0.02, 0.04),
            fov_deg: DEFAULT_FOV_DEG,
            neck_pitch: Range::new(-0.2, 0.2),
            neck_yaw: Range::new(-0.5, 0.5),
            neck_roll: Range::new(-0.1, 0.1),
        }
    }
}

pub fn sample_camera_in(ranges: &SamplingRanges, rng: &mut impl Rng) -> CameraParams {
    CameraParams {
        pitch: ranges.camera_pitch.sample(rng),
        yaw: ranges.camera_yaw.sample(rng),
        roll: ranges.camera_roll.sample(rng),
        radius: ranges.camera_radius.sample(rng),
        look_at: [
            ranges.look_at_x.sample(rng),
            ranges.look_at_y.sample(rng),
            ranges.look_at_z.sample(rng),
        ],
        fov_deg: ranges.fov_deg,
    }
}

/// Camera draw from the default boxes.
pub fn sample_camera(rng: &mut impl Rng) -> CameraParams {
    sample_camera_in(&SamplingRanges::default(), rng)
}

/// Neck axis-angle `[pitch, yaw, roll]` (rotations about x, y, z) drawn component-wise.
pub fn sample_neck_pose_in(ranges: &SamplingRanges, rng: &mut impl Rng) -> [f64; 3] {
    [
        ranges.neck_pitch.sample(rng),
        ranges.neck_yaw.sample(rng),
        ranges.neck_roll.sample(rng),
    ]
}

pub fn sample_neck_pose(rng: &mut impl Rng) -> [f64; 3] {
    sample_neck_pose_in(&SamplingRanges::default(), rng)
}

/// Duplication factor for a yaw angle in degrees; bins are half-open `[lo, hi)`.
pub fn rebalance_factor(yaw_deg: f64) -> u32 {
    let a = yaw_deg.abs();
    if a < 15.0 {
        1
    } else if a < 30.0 {
        2
    } else if a < 45.0 {
        4
    } else if a < 60.0 {
        8
    } else {
        16
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from a seed and a tuple of tags.
pub fn stream_seed(seed: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(seed), |acc, t| mix(acc ^ mix(*t)))
}

fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tags))
}

const TAG_IDENTITY: u64 = 1;
const TAG_MOTION: u64 = 2;
const TAG_VIEW: u64 = 3;
const TAG_POOL: u64 = 4;
const TAG_POINTS: u64 = 5;
const TAG_RENDER: u64 = 6;
const TAG_BACKGROUND: u64 = 7;

/// Generation parameters other than counts and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub bake_resolution: usize,
    pub channels: usize,
    pub point_count: usize,
    pub grid_resolution: usize,
    pub canonical_jaw: f64,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub clip_length: usize,
    pub clips: usize,
    /// Half-width of the uniform shape-coefficient distribution of the dynamic set.
    pub shape_scale: f64,
    pub static_shape_factor: f64,
    pub expression_scale: f64,
    pub jaw_open: Range,
    pub gaze: Range,
    pub head_sharpness: f64,
    pub ranges: SamplingRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RENDER_RES,
            bake_resolution: 128,
            channels: COLOR_DIM,
            point_count: DEFAULT_POINT_COUNT,
            grid_resolution: DEFAULT_GRID_RES,
            canonical_jaw: DEFAULT_CANONICAL_JAW,
            coarse_samples: COARSE_SAMPLES,
            fine_samples: FINE_SAMPLES,
            clip_length: DEFAULT_CLIP_LENGTH,
            clips: 8,
            shape_scale: 1.0,
            static_shape_factor: STATIC_SHAPE_FACTOR,
            expression_scale: 1.0,
            jaw_open: Range::new(0.0, 0.3),
            gaze: Range::new(-0.2, 0.2),
            head_sharpness: 10.0,
            ranges: SamplingRanges::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.bake_resolution < 2 || self.channels != COLOR_DIM {
            return Err(Error::Validation(format!(
                "resolution must be positive, bake resolution >= 2 and channels = {COLOR_DIM}"
            )));
        }
        if self.point_count == 0 || self.clip_length == 0 || self.clips == 0 || self.coarse_samples == 0 {
            return Err(Error::Validation("point count, clip sizes and coarse samples must be positive".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::Validation("grid resolution must be at least 2".into()));
        }
        Ok(())
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            grid_resolution: self.grid_resolution,
            canonical_jaw: self.canonical_jaw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Dynamic,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub identities: usize,
    pub motions: usize,
    pub views: usize,
}

impl Counts {
    pub fn records(&self) -> usize {
        self.identities * self.motions * self.views
    }
}

/// One synthetic identity: appearance seed, shape code and background seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub seed: u64,
    pub background_seed: u64,
    pub shape: ShapeCode,
    /// Expression clip the identity's motions are drawn from.
    pub clip: usize,
}

/// Background seed of an identity; a pure function of its appearance seed.
pub fn background_seed(identity_seed: u64) -> u64 {
    stream_seed(identity_seed, &[TAG_BACKGROUND])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub expression: ExpressionCode,
    pub pose: PoseCode,
    /// Pool frame the expression came from.
    pub frame: usize,
}

/// Every sampled parameter of a dataset, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub kind: DatasetKind,
    pub counts: Counts,
    pub seed: u64,
    pub identities: Vec<IdentitySpec>,
    /// `[identity][motion]`
    pub motions: Vec<Vec<MotionSpec>>,
    /// `[identity][motion][view]`
    pub cameras: Vec<Vec<Vec<CameraParams>>>,
}

/// Expression pool frame: expression code, jaw opening and gaze. Frames of one clip vary
/// smoothly around a clip-level base.
fn pool_frame(cfg: &DatasetConfig, expr_dim: usize, seed: u64, clip: usize, frame: usize) -> (ExpressionCode, PoseCode) {
    let mut rng = stream(seed, &[TAG_POOL, clip as u64]);
    let s = cfg.expression_scale;
    let base: Vec<f64> = (0..expr_dim).map(|_| rng.random_range(-s..=s)).collect();
    let freq: Vec<f64> = (0..expr_dim).map(|_| rng.random_range(0.1..0.6)).collect();
    let phase: Vec<f64> = (0..expr_dim).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let jaw_base = cfg.jaw_open.sample(&mut rng);
    let gaze_base = [cfg.gaze.sample(&mut rng), cfg.gaze.sample(&mut rng)];
    let k = (frame % cfg.clip_length) as f64;
    let beta = (0..expr_dim)
        .map(|i| base[i] + 0.3 * s * (freq[i] * k + phase[i]).sin())
        .collect();
    let jaw = (jaw_base + 0.05 * (0.4 * k).sin()).clamp(cfg.jaw_open.min, cfg.jaw_open.max);
    let gaze = |g: f64, w: f64| (g + 0.05 * (w * k).sin()).clamp(cfg.gaze.min, cfg.gaze.max);
    let pose = PoseCode {
        eye: [gaze(gaze_base[0], 0.3), gaze(gaze_base[1], 0.5), 0.0],
        jaw: [jaw, 0.0, 0.0],
        neck: [0.0; 3],
    };
    (ExpressionCode(beta), pose)
}

/// Samples identities, motions and cameras for a dataset.
pub fn plan_dataset(kind: DatasetKind, rig: &HeadRig, cfg: &DatasetConfig, counts: Counts, seed: u64) -> Result<DatasetPlan> {
    cfg.validate()?;
    if counts.identities == 0 || counts.motions == 0 || counts.views == 0 {
        return Err(Error::Validation("counts must be positive".into()));
    }
    if kind == DatasetKind::Static && counts.motions != 1 {
        return Err(Error::Validation("a static set has exactly one motion per identity".into()));
    }
    let scale = match kind {
        DatasetKind::Dynamic => cfg.shape_scale,
        DatasetKind::Static => cfg.shape_scale * cfg.static_shape_factor,
    };
    let mut identities = Vec::new();
    let mut motions = Vec::new();
    let mut cameras = Vec::new();
    for i in 0..counts.identities {
        let mut rng = stream(seed, &[TAG_IDENTITY, i as u64]);
        let id_seed = rng.random::<u64>();
        let shape = ShapeCode((0..rig.shape_dim()).map(|_| rng.random_range(-scale..=scale)).collect());
        let clip = rng.random_range(0..cfg.clips);
        identities.push(IdentitySpec {
            id: i,
            seed: id_seed,
            background_seed: background_seed(id_seed),
            shape,
            clip,
        });
        let mut per_motion = Vec::new();
        let mut per_motion_cams = Vec::new();
        for m in 0..counts.motions {
            let mut rng = stream(seed, &[TAG_MOTION, i as u64, m as u64]);
            let frame = clip * cfg.clip_length + rng.random_range(0..cfg.clip_length);
            let (expression, mut pose) = pool_frame(cfg, rig.expr_dim(), seed, clip, frame);
            pose.neck = sample_neck_pose_in(&cfg.ranges, &mut rng);
            per_motion.push(MotionSpec { expression, pose, frame });
            per_motion_cams.push(
                (0..counts.views)
                    .map(|v| sample_camera_in(&cfg.ranges, &mut stream(seed, &[TAG_VIEW, i as u64, m as u64, v as u64])))
                    .collect(),
            );
        }
        motions.push(per_motion);
        cameras.push(per_motion_cams);
    }
    Ok(DatasetPlan {
        kind,
        counts,
        seed,
        identities,
        motions,
        cameras,
    })
}

/// Landmarks of the canonical head the appearance blobs attach to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadGeometry {
    pub center: Vec3,
    pub radii: Vec3,
    pub eye_centers: [Vec3; 2],
    pub eye_radius: f64,
    pub mouth_center: Vec3,
}

impl HeadGeometry {
    /// Measured on the template (head box, eyeballs) and on the canonical mesh (mouth).
    pub fn from_rig(rig: &HeadRig, canonical_jaw: f64) -> Result<Self> {
        let t = rig.template();
        let parts = rig.parts();
        let head = Aabb::from_points(parts.full_head.iter().map(|&i| &t[i as usize]));
        let centroid = |set: &[u32], pts: &[Vec3]| set.iter().map(|&i| pts[i as usize]).sum::<Vec3>() / set.len().max(1) as f64;
        let eyes = [centroid(&parts.eyeball_left, t), centroid(&parts.eyeball_right, t)];
        let eye_radius = parts
            .eyeball_left
            .iter()
            .map(|&i| (t[i as usize] - eyes[0]).norm())
            .sum::<f64>()
            / parts.eyeball_left.len().max(1) as f64;
        let zero_a = ShapeCode::zeros(rig.shape_dim());
        let zero_b = ExpressionCode::zeros(rig.expr_dim());
        let canonical = rig.evaluate_mesh(&zero_a, &zero_b, &canonical_pose(canonical_jaw)?)?;
        let mouth_vertices: Vec<u32> = parts
            .inner_mouth_faces
            .iter()
            .flat_map(|&f| rig.triangles()[f as usize])
            .collect();
        let mouth_center = if mouth_vertices.is_empty() {
            centroid(&parts.lip_region, &canonical.vertices)
        } else {
            centroid(&mouth_vertices, &canonical.vertices)
        };
        Ok(Self {
            center: head.center(),
            radii: head.extent() * 0.5,
            eye_centers: eyes,
            eye_radius: if eye_radius > 0.0 { eye_radius } else { 0.03 },
            mouth_center,
        })
    }
}

/// Seeded analytic appearance of one identity: the head field and the eye/mouth part field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAppearance {
    pub head: EllipsoidSpec,
    pub part: EllipsoidSpec,
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.02, 0.98))
}

pub fn head_appearance(geo: &HeadGeometry, seed: u64, sharpness: f64) -> HeadAppearance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skin = jitter(&mut rng, [0.80, 0.62, 0.52], 0.12);
    let hair = jitter(&mut rng, [0.22, 0.15, 0.10], 0.10);
    let lips = jitter(&mut rng, [0.72, 0.30, 0.32], 0.08);
    let iris = jitter(&mut rng, [0.30, 0.35, 0.45], 0.15);
    let c = geo.center;
    let r = geo.radii;
    let a3 = |v: Vec3| [v.x, v.y, v.z];
    let blob = |center: Vec3, radii: Vec3, s: f64, color: [f64; 3], opaque: bool| Blob {
        center: a3(center),
        radii: a3(radii),
        sharpness: s,
        color,
        opaque,
    };
    let er = geo.eye_radius;
    let mut head = vec![
        blob(c, r, sharpness, skin, true),
        blob(
            c + Vec3::new(0.0, 0.55 * r.y, -0.25 * r.z),
            Vec3::new(1.1 * r.x, 0.6 * r.y, 1.0 * r.z),
            4.0,
            hair,
            false,
        ),
        blob(
            geo.mouth_center + Vec3::new(0.0, 0.0, 0.05 * r.z),
            Vec3::new(0.35 * r.x, 0.1 * r.y, 0.2 * r.z),
            4.0,
            lips,
            false,
        ),
    ];
    for e in geo.eye_centers {
        head.push(blob(e, Vec3::repeat(1.8 * er), 4.0, skin.map(|v| v * 0.75), false));
    }
    let mut part = vec![blob(
        geo.mouth_center - Vec3::new(0.0, 0.0, 0.08 * r.z),
        Vec3::new(0.25 * r.x, 0.12 * r.y, 0.15 * r.z),
        sharpness,
        [0.35, 0.08, 0.10],
        true,
    )];
    for e in geo.eye_centers {
        part.push(blob(e, Vec3::repeat(er), sharpness, [0.95, 0.95, 0.92], true));
    }
    part.push(blob(
        geo.mouth_center + Vec3::new(0.0, 0.06 * r.y, -0.02 * r.z),
        Vec3::new(0.2 * r.x, 0.04 * r.y, 0.12 * r.z),
        4.0,
        [0.95, 0.94, 0.88],
        false,
    ));
    for e in geo.eye_centers {
        part.push(blob(e + Vec3::new(0.0, 0.0, 0.85 * er), Vec3::repeat(0.45 * er), 4.0, iris, false));
    }
    HeadAppearance {
        head: EllipsoidSpec { blobs: head },
        part: EllipsoidSpec { blobs: part },
    }
}

/// Baked head and part tri-planes sharing one pass-through decoder.
#[derive(Clone, Debug)]
pub struct BakedIdentity {
    pub head: TriPlane,
    pub part: TriPlane,
    pub decoder: DecoderParams,
}

pub fn bake_identity(app: &HeadAppearance, resolution: usize, channels: usize) -> Result<BakedIdentity> {
    let (head, decoder) = bake_analytic(&AnalyticField::Ellipsoid(app.head.clone()), resolution, channels)?;
    let (part, _) = bake_analytic(&AnalyticField::Ellipsoid(app.part.clone()), resolution, channels)?;
    Ok(BakedIdentity { head, part, decoder })
}

/// Seeded background feature map: a two-color gradient with low-frequency ripples on RGB and
/// smooth waves on the remaining channels.
pub fn procedural_background(seed: u64, width: usize, height: usize, channels: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let waves: Vec<[f64; 5]> = (0..channels)
        .map(|_| {
            [
                rng.random_range(0.05..0.5),
                rng.random_range(1.0..8.0),
                rng.random_range(1.0..8.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut map = FeatureMap::zeros(width, height, channels);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            let g = (0.5 + (u - 0.5) * dx + (v - 0.5) * dy).clamp(0.0, 1.0);
            let px = map.pixel_mut(y * width + x);
            for (k, out) in px.iter_mut().enumerate() {
                let [amp, fu, fv, pu, pv] = waves[k];
                let ripple = amp * (fu * u + pu).sin() * (fv * v + pv).sin();
                *out = if k < 3 {
                    (c0[k] + (c1[k] - c0[k]) * g + 0.2 * ripple).clamp(0.0, 1.0)
                } else {
                    ripple
                };
            }
        }
    }
    map
}

/// Sampled coarse points and their head-branch tri-plane features (`count × channels`).
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    pub points: Vec<Vec3>,
    pub channels: usize,
    pub features: Vec<f64>,
}

/// Uniform choice of `count` coarse samples without replacement; each feature is
/// `T_h(x + dx_head(x))`.
pub fn record_point_features(
    coarse: &CoarseSamples,
    field: &dyn Deformation,
    t_head: &TriPlane,
    count: usize,
    rng: &mut impl Rng,
) -> Result<PointFeatures> {
    if coarse.len() < count {
        return Err(Error::contract(format!(
            "only {} coarse samples available, {count} requested",
            coarse.len()
        )));
    }
    let mut chosen = index::sample(rng, coarse.len(), count).into_vec();
    chosen.sort_unstable();
    let c = t_head.channels();
    let points: Vec<Vec3> = chosen.iter().map(|&i| coarse.points[i]).collect();
    let features = points
        .par_iter()
        .flat_map_iter(|x| t_head.sample(&(x + field.deform(x).dx_head)))
        .collect();
    Ok(PointFeatures {
        points,
        channels: c,
        features,
    })
}

impl PointFeatures {
    /// "PTS1" block: magic, u32 LE point count, u32 LE channel count, then per point three
    /// coordinates and `channels` features as f64 LE.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(PTS_MAGIC)?;
        w.write_all(&(self.points.len() as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.points.len() * (3 + self.channels) * 8);
        for (p, f) in self.points.iter().zip(self.features.chunks_exact(self.channels)) {
            for v in p.iter().chain(f) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read, origin: &str) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| Error::parse(origin, "byte 0", "truncated PTS1 header"))?;
        if &head[..4] != PTS_MAGIC {
            return Err(Error::parse(origin, "byte 0", "bad magic, expected PTS1"));
        }
        let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(origin, e))?;
        if payload.len() != n * (3 + c) * 8 {
            return Err(Error::parse(origin, "byte 12", format!("payload does not hold {n} points of {c} channels")));
        }
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut points = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * c);
        for rec in vals.chunks_exact(3 + c) {
            points.push(Vec3::new(rec[0], rec[1], rec[2]));
            features.extend_from_slice(&rec[3..]);
        }
        Ok(Self {
            points,
            channels: c,
            features,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), &path.display().to_string())
    }
}

/// File names inside each record directory.
pub const RECORD_FILES: [&str; 10] = [
    "record.json",
    "preview.png",
    "lr.pfm",
    "foreground.pfm",
    "background.pfm",
    "opacity.pfm",
    "depth.pfm",
    "mask.pfm",
    "corr.pfm",
    "points.pts",
];

/// Per-record label file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordInfo {
    pub record: String,
    pub identity: usize,
    pub motion: usize,
    pub view: usize,
    pub camera: CameraParams,
    pub shape: ShapeCode,
    pub expression: ExpressionCode,
    pub pose: PoseCode,
    pub render_seed: u64,
    pub point_seed: u64,
    pub rebalance: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub record: String,
    pub identity: usize,
    pub motion: usize,
    pub view: usize,
    /// Directory relative to the dataset root.
    pub dir: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigReference {
    pub path: String,
    pub vertices: usize,
    pub triangles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub id: usize,
    pub seed: u64,
    pub background_seed: u64,
    pub clip: usize,
    pub appearance: HeadAppearance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub rig: RigReference,
    pub counts: Counts,
    pub seed: u64,
    pub config: DatasetConfig,
    pub identities: Vec<ManifestIdentity>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::parse(path.display().to_string(), format!("line {} column {}", e.line(), e.column()), e.to_string())
        })
    }
}

pub fn record_name(identity: usize, motion: usize, view: usize) -> String {
    format!("i{identity:03}_m{motion:03}_v{view:03}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Everything rendered for one record.
#[derive(Clone, Debug)]
pub struct RecordOutput {
    pub info: RecordInfo,
    pub lr: FeatureMap,
    pub foreground: crate::render::RenderOut,
    pub background: FeatureMap,
    pub mask: crate::render::MaskMap,
    pub points: PointFeatures,
}

/// Renders one `(identity, motion, view)` record given its prebuilt deformation field.
#[allow(clippy::too_many_arguments)]
pub fn render_record(
    rig: &HeadRig,
    cfg: &DatasetConfig,
    plan: &DatasetPlan,
    baked: &BakedIdentity,
    field: &DeformationField,
    identity: usize,
    motion: usize,
    view: usize,
) -> Result<RecordOutput> {
    let id = &plan.identities[identity];
    let m = &plan.motions[identity][motion];
    let cam_params = plan.cameras[identity][motion][view];
    let camera = Camera::from_params(&cam_params, cfg.resolution, cfg.resolution)?;
    let tags = [identity as u64, motion as u64, view as u64];
    let render_seed = stream_seed(plan.seed, &[TAG_RENDER, tags[0], tags[1], tags[2]]);
    let point_seed = stream_seed(plan.seed, &[TAG_POINTS, tags[0], tags[1], tags[2]]);
    let settings = RenderSettings {
        coarse_samples: cfg.coarse_samples,
        fine_samples: cfg.fine_samples,
        seed: render_seed,
        bounds: Sphere::for_rig(rig),
    };
    let gh = render_genhead(&baked.head, &baked.part, &baked.decoder, field, &camera, &settings)?;
    let mesh = rig.evaluate_mesh(&id.shape, &m.expression, &m.pose)?;
    let mask = rasterize(&mesh, &rig.mask_faces(), rig.template(), &camera)?;
    let foreground = blend(&gh.head, &gh.part, &mask)?;
    let background = procedural_background(id.background_seed, cfg.resolution, cfg.resolution, cfg.channels);
    let lr = fuse(&foreground, &background)?;
    let points = record_point_features(
        &gh.coarse,
        field,
        &baked.head,
        cfg.point_count,
        &mut ChaCha8Rng::seed_from_u64(point_seed),
    )?;
    let info = RecordInfo {
        record: record_name(identity, motion, view),
        identity,
        motion,
        view,
        camera: cam_params,
        shape: id.shape.clone(),
        expression: m.expression.clone(),
        pose: m.pose,
        render_seed,
        point_seed,
        rebalance: rebalance_factor(cam_params.yaw.to_degrees()),
    };
    Ok(RecordOutput {
        info,
        lr,
        foreground,
        background,
        mask,
        points,
    })
}

fn write_record(dir: &Path, out: &RecordOutput) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("record.json"), &out.info)?;
    let w = out.lr.width;
    save_png_rgb(dir.join("preview.png"), w, out.lr.height, &out.lr.rgb())?;
    save_pfm(dir.join("lr.pfm"), &out.lr)?;
    save_pfm(dir.join("foreground.pfm"), &out.foreground.feature)?;
    save_pfm(dir.join("background.pfm"), &out.background)?;
    save_pfm(dir.join("opacity.pfm"), &out.foreground.opacity_map())?;
    save_pfm(dir.join("depth.pfm"), &out.foreground.depth_map())?;
    save_pfm(dir.join("mask.pfm"), &out.mask.mask_map())?;
    save_pfm(dir.join("corr.pfm"), &out.mask.corr_map())?;
    let path = dir.join("points.pts");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut bw = std::io::BufWriter::new(f);
    out.points
        .write_to(&mut bw)
        .and_then(|_| bw.flush())
        .map_err(|e| Error::io(&path, e))
}

/// Renders and writes a planned dataset into `out_dir`.
pub fn render_plan(rig: &HeadRig, cfg: &DatasetConfig, plan: &DatasetPlan, out_dir: &Path) -> Result<DatasetManifest> {
    create_dir(&out_dir.join("records"))?;
    rig.save(out_dir.join("rig.json"))?;
    let geo = HeadGeometry::from_rig(rig, cfg.canonical_jaw)?;
    let mut identities = Vec::new();
    let mut records = Vec::new();
    for id in &plan.identities {
        let app = head_appearance(&geo, id.seed, cfg.head_sharpness);
        let baked = bake_identity(&app, cfg.bake_resolution, cfg.channels)?;
        for (mi, m) in plan.motions[id.id].iter().enumerate() {
            let field = DeformationField::new(rig, &id.shape, &m.expression, &m.pose, cfg.field_config())?;
            let outs: Vec<Result<()>> = (0..plan.counts.views)
                .into_par_iter()
                .map(|v| {
                    let out = render_record(rig, cfg, plan, &baked, &field, id.id, mi, v)?;
                    write_record(&out_dir.join("records").join(&out.info.record), &out)
                })
                .collect();
            outs.into_iter().collect::<Result<Vec<()>>>()?;
            for v in 0..plan.counts.views {
                let name = record_name(id.id, mi, v);
                records.push(ManifestRecord {
                    dir: format!("records/{name}"),
                    record: name,
                    identity: id.id,
                    motion: mi,
                    view: v,
                    files: RECORD_FILES.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        identities.push(ManifestIdentity {
            id: id.id,
            seed: id.seed,
            background_seed: id.background_seed,
            clip: id.clip,
            appearance: app,
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        kind: plan.kind,
        rig: RigReference {
            path: "rig.json".into(),
            vertices: rig.vertex_count(),
            triangles: rig.triangles().len(),
        },
        counts: plan.counts,
        seed: plan.seed,
        config: cfg.clone(),
        identities,
        records,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Multi-motion, multi-view set.
pub fn make_dynamic_set(
    rig: &HeadRig,
    cfg: &DatasetConfig,
    identities: usize,
    motions: usize,
    views: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let counts = Counts {
        identities,
        motions,
        views,
    };
    let plan = plan_dataset(DatasetKind::Dynamic, rig, cfg, counts, seed)?;
    render_plan(rig, cfg, &plan, out_dir)
}

/// One motion per identity, several views, wider shape distribution.
pub fn make_static_set(rig: &HeadRig, cfg: &DatasetConfig, identities: usize, views: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let counts = Counts {
        identities,
        motions: 1,
        views,
    };
    let plan = plan_dataset(DatasetKind::Static, rig, cfg, counts, seed)?;
    render_plan(rig, cfg, &plan, out_dir)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}{}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) }))
            .collect()
    }
}

/// Checks a dataset directory (or its manifest path). Problems are reported, not returned as
/// errors.
pub fn validate_dataset(path: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join("manifest.json"))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let manifest = match DatasetManifest::load(&manifest_path) {
        Ok(m) => m,
        Err(e) => {
            report.push("manifest", false, e.to_string());
            return report;
        }
    };
    report.push(
        "manifest.format_version",
        manifest.format_version == DATASET_FORMAT_VERSION,
        format!("found {}", manifest.format_version),
    );
    let rig_path = root.join(&manifest.rig.path);
    match HeadRig::load(&rig_path) {
        Ok(rig) => report.push(
            "rig",
            rig.vertex_count() == manifest.rig.vertices && rig.triangles().len() == manifest.rig.triangles,
            "",
        ),
        Err(e) => report.push("rig", false, e.to_string()),
    }
    let expected = manifest.counts.records();
    report.push(
        "counts",
        manifest.records.len() == expected,
        format!("{} records, counts imply {expected}", manifest.records.len()),
    );
    if manifest.kind == DatasetKind::Static {
        let bad: Vec<&str> = manifest.records.iter().filter(|r| r.motion != 0).map(|r| r.record.as_str()).collect();
        report.push("static.single_motion", bad.is_empty(), bad.join(", "));
    }

    let res = manifest.config.resolution;
    let ch = manifest.config.channels;
    let mut missing = Vec::new();
    let mut bad_maps = Vec::new();
    let mut bad_points = Vec::new();
    let mut bad_info = Vec::new();
    let mut backgrounds: BTreeMap<usize, (String, Vec<u8>)> = BTreeMap::new();
    let mut bg_mismatch = Vec::new();
    for rec in &manifest.records {
        let dir = root.join(&rec.dir);
        let mut all_present = true;
        for f in &rec.files {
            let p = dir.join(f);
            if !p.is_file() {
                missing.push(format!("{}", Path::new(&rec.dir).join(f).display()));
                all_present = false;
            }
        }
        if !all_present {
            continue;
        }
        for (file, channels) in [
            ("lr.pfm", ch),
            ("foreground.pfm", ch),
            ("background.pfm", ch),
            ("opacity.pfm", 1),
            ("depth.pfm", 1),
            ("mask.pfm", 1),
            ("corr.pfm", 3),
        ] {
            match load_pfm(dir.join(file), channels) {
                Ok(m) if m.width == res && m.height == res => {}
                Ok(m) => bad_maps.push(format!("{} {file}: {}x{}", rec.record, m.width, m.height)),
                Err(e) => bad_maps.push(format!("{} {file}: {e}", rec.record)),
            }
        }
        match PointFeatures::load(dir.join("points.pts")) {
            Ok(p) if p.points.len() == manifest.config.point_count && p.channels == ch => {}
            Ok(p) => bad_points.push(format!("{}: {} points x {} channels", rec.record, p.points.len(), p.channels)),
            Err(e) => bad_points.push(format!("{}: {e}", rec.record)),
        }
        match std::fs::read_to_string(dir.join("record.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<RecordInfo>(&t).ok())
        {
            Some(info) if info.identity == rec.identity && info.motion == rec.motion && info.view == rec.view => {}
            _ => bad_info.push(rec.record.clone()),
        }
        if let Ok(bytes) = std::fs::read(dir.join("background.pfm")) {
            match backgrounds.get(&rec.identity) {
                Some((_, first)) if *first != bytes => bg_mismatch.push(rec.record.clone()),
                Some(_) => {}
                None => {
                    backgrounds.insert(rec.identity, (rec.record.clone(), bytes));
                }
            }
        }
    }
    report.push("files.present", missing.is_empty(), missing.join(", "));
    report.push("maps.resolution", bad_maps.is_empty(), bad_maps.join("; "));
    report.push("points.count", bad_points.is_empty(), bad_points.join("; "));
    report.push("records.labels", bad_info.is_empty(), bad_info.join(", "));
    report.push("background.per_identity", bg_mismatch.is_empty(), bg_mismatch.join(", "));
    report
}

/// Path of a record directory inside a dataset.
pub fn record_dir(root: &Path, record: &ManifestRecord) -> PathBuf {
    root.join(&record.dir)
}
