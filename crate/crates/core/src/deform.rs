//! Part-wise observation-to-canonical deformation field.
//!
//! Evaluation of a point `x` runs in two stages:
//!
//! 1. Neck canonicalization. The surface-field transfer maps `x` from the posed mesh
//!    `m(α, β, γ)` to the mesh with the neck rotation removed, `m(α, β, γ_n)`. It is
//!    precomputed on a voxel grid and trilinearly interpolated, giving `x_n`.
//! 2. Expression/shape/jaw canonicalization. `x_n` is moved by the inverse-distance
//!    weighted one-ring offsets between a source mesh and the canonical mesh
//!    `m(0, 0, γ_ca)`:
//!    - head branch: source `m(α, β, γ_n)` with the eye rotation dropped;
//!    - part branch: inside the (inflated) eyeball boxes the source is the eyeball
//!      vertices of `m(α, β, γ_n)`; elsewhere it is the lip region of the expressionless
//!      mesh `m(α, 0, γ_n)`.
//!
//! Offsets are canonical minus observation, so `x + Δx` lands in canonical space.
//!
//! `γ_n` keeps jaw and eye rotations and zeros only the neck. The surface-field transfer
//! carries the whole offset `x - proj(x)` through the rotation between the two triangles'
//! local frames. For projections interior to a triangle that offset is parallel to the
//! normal, so this is the usual signed-normal transfer; on edges and vertices it also keeps
//! the tangential part, which makes the transfer an exact identity between equal meshes.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{triangle_frame, Aabb, Vec3};
use crate::headmodel::{canonical_pose, ExpressionCode, HeadRig, Mesh, PoseCode, ShapeCode, DEFAULT_CANONICAL_JAW};
use crate::spatial::TriangleBvh;

pub const DEFAULT_GRID_RES: usize = 32;
/// Distance clamp of the inverse-distance weights.
pub const WEIGHT_EPS: f64 = 1e-6;
/// Half-extent scale applied to eyeball boxes.
pub const EYE_BOX_INFLATION: f64 = 1.2;
/// Half-extent scale of the voxel grid around the posed mesh (12.5% margin per side).
pub const GRID_BOUNDS_SCALE: f64 = 1.25;

/// Per-point output of the deformation field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformationPair {
    pub dx_head: Vec3,
    pub dx_part: Vec3,
}

impl DeformationPair {
    pub fn zero() -> Self {
        Self {
            dx_head: Vec3::zeros(),
            dx_part: Vec3::zeros(),
        }
    }
}

/// Anything that deforms observation-space points into the two canonical spaces.
pub trait Deformation: Sync {
    fn deform(&self, x: &Vec3) -> DeformationPair;
}

/// No deformation at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityField;

impl Deformation for IdentityField {
    fn deform(&self, _x: &Vec3) -> DeformationPair {
        DeformationPair::zero()
    }
}

/// Surface-field transfer from a posed mesh to a second mesh with the same topology.
#[derive(Clone, Debug)]
pub struct SurfaceField {
    bvh: TriangleBvh,
    canonical: Mesh,
    /// Rotation from each posed triangle's local frame to the canonical one.
    frame_rotations: Vec<Matrix3<f64>>,
}

impl SurfaceField {
    pub fn new(posed: &Mesh, canonical: &Mesh) -> Result<Self> {
        if !posed.same_topology(canonical) {
            return Err(Error::contract("surface field needs meshes with identical topology"));
        }
        if posed.is_empty() {
            return Err(Error::contract("surface field needs a non-empty mesh"));
        }
        let frame_rotations = (0..posed.triangles.len())
            .map(|t| {
                let [a, b, c] = posed.corners(t);
                let [an, bn, cn] = canonical.corners(t);
                let f = triangle_frame(a, b, c);
                let fn_ = triangle_frame(an, bn, cn);
                if f.iter().chain(fn_.iter()).all(|v| v.is_finite()) {
                    fn_ * f.transpose()
                } else {
                    Matrix3::identity()
                }
            })
            .collect();
        Ok(Self {
            bvh: TriangleBvh::build(posed),
            canonical: canonical.clone(),
            frame_rotations,
        })
    }

    pub fn map(&self, x: &Vec3) -> Vec3 {
        let hit = self.bvh.closest(x).expect("non-empty mesh");
        let [a, b, c] = self.canonical.corners(hit.triangle);
        let [u, v, w] = hit.barycentric;
        let proj = a * u + b * v + c * w;
        proj + self.frame_rotations[hit.triangle] * (x - hit.point)
    }
}

/// One-shot surface-field evaluation.
pub fn surface_field(x: &Vec3, posed: &Mesh, neck_canonical: &Mesh) -> Result<Vec3> {
    Ok(SurfaceField::new(posed, neck_canonical)?.map(x))
}

/// Regular lattice of canonicalized positions, interpolated trilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    /// Node values, x fastest then y then z.
    pub values: Vec<Vec3>,
}

const GRID_MAGIC: &[u8; 4] = b"VXG1";

impl VoxelGrid {
    /// Grid whose node values are produced by `f(node_position)`.
    pub fn from_fn(bounds: Aabb, resolution: [usize; 3], f: impl Fn(&Vec3) -> Vec3 + Sync) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::contract(format!("grid resolution {resolution:?} must be at least 2 per axis")));
        }
        let n = resolution.iter().product::<usize>();
        let probe = Self {
            bounds,
            resolution,
            values: Vec::new(),
        };
        let values = (0..n).into_par_iter().map(|i| f(&probe.node_position_flat(i))).collect();
        Ok(Self { values, ..probe })
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ijk = [i, j, k];
        Vec3::from_fn(|a, _| {
            let r = self.resolution[a];
            let t = ijk[a] as f64 / (r - 1) as f64;
            self.bounds.min[a] + t * (self.bounds.max[a] - self.bounds.min[a])
        })
    }

    fn node_position_flat(&self, flat: usize) -> Vec3 {
        let i = flat % self.resolution[0];
        let j = (flat / self.resolution[0]) % self.resolution[1];
        let k = flat / (self.resolution[0] * self.resolution[1]);
        self.node_position(i, j, k)
    }

    pub fn node_value(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.values[self.index(i, j, k)]
    }

    /// Trilinear interpolation. A query outside the bounds is clamped onto them and the
    /// clamped-away residual is added back, so the far field continues the boundary
    /// displacement instead of collapsing onto the box.
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let clamped = Vec3::from_fn(|a, _| x[a].clamp(self.bounds.min[a], self.bounds.max[a]));
        if clamped == *x {
            self.interpolate(x)
        } else {
            self.interpolate(&clamped) + (x - clamped)
        }
    }

    /// Plain trilinear interpolation of node values at a point clamped into the bounds.
    pub fn interpolate(&self, x: &Vec3) -> Vec3 {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let r = self.resolution[a];
            let span = self.bounds.max[a] - self.bounds.min[a];
            let mut t = if span > 0.0 {
                (x[a] - self.bounds.min[a]) / span * (r - 1) as f64
            } else {
                0.0
            };
            t = t.clamp(0.0, (r - 1) as f64);
            let nearest = t.round();
            if (t - nearest).abs() < 1e-9 {
                t = nearest;
            }
            let c = (t.floor() as usize).min(r - 2);
            cell[a] = c;
            frac[a] = t - c as f64;
        }
        let [i, j, k] = cell;
        let [fx, fy, fz] = frac;
        let lerp = |a: Vec3, b: Vec3, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(self.node_value(i, j, k), self.node_value(i + 1, j, k), fx);
        let c10 = lerp(self.node_value(i, j + 1, k), self.node_value(i + 1, j + 1, k), fx);
        let c01 = lerp(self.node_value(i, j, k + 1), self.node_value(i + 1, j, k + 1), fx);
        let c11 = lerp(self.node_value(i, j + 1, k + 1), self.node_value(i + 1, j + 1, k + 1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Debug dump: magic "VXG1", three u32 resolutions, six f32 bounds (min xyz, max xyz),
    /// then three f32 per node in storage order. Everything little-endian.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        for r in self.resolution {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 12);
        for v in &self.values {
            for c in v.iter() {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_binary(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    /// Reads a dump written by [`VoxelGrid::write_binary`] (values come back at f32 precision).
    pub fn read_binary(mut r: impl Read, origin: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
        if bytes.len() < 4 + 12 + 24 || &bytes[..4] != GRID_MAGIC {
            return Err(Error::parse(origin, "byte 0", "missing VXG1 header"));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        let resolution = [u(4), u(8), u(12)];
        let bounds = Aabb {
            min: Vec3::new(f(16), f(20), f(24)),
            max: Vec3::new(f(28), f(32), f(36)),
        };
        let n = resolution.iter().product::<usize>();
        if resolution.iter().any(|&r| r < 2) || bytes.len() != 40 + n * 12 {
            return Err(Error::parse(origin, "byte 40", "payload size does not match the header"));
        }
        let values = (0..n).map(|i| Vec3::new(f(40 + 12 * i), f(44 + 12 * i), f(48 + 12 * i))).collect();
        Ok(Self {
            bounds,
            resolution,
            values,
        })
    }
}

fn grid_bounds(mesh: &Mesh) -> Aabb {
    Aabb::from_points(&mesh.vertices).scaled(GRID_BOUNDS_SCALE)
}

/// Voxel grid of surface-field values from `m(α, β, γ)` to `m(α, β, γ_n)` (neck zeroed).
pub fn build_sf_grid(
    rig: &HeadRig,
    alpha: &ShapeCode,
    beta: &ExpressionCode,
    pose: &PoseCode,
    resolution: usize,
) -> Result<VoxelGrid> {
    let posed = rig.evaluate_mesh(alpha, beta, pose)?;
    let canonical = rig.evaluate_mesh(alpha, beta, &pose.without_neck())?;
    sf_grid_between(&posed, &canonical, resolution)
}

fn sf_grid_between(posed: &Mesh, canonical: &Mesh, resolution: usize) -> Result<VoxelGrid> {
    let sf = SurfaceField::new(posed, canonical)?;
    VoxelGrid::from_fn(grid_bounds(posed), [resolution; 3], |p| sf.map(p))
}

/// Trilinear lookup into a surface-field grid.
pub fn apply_grid(grid: &VoxelGrid, x: &Vec3) -> Vec3 {
    grid.apply(x)
}

/// Inverse-distance weighted one-ring offsets from `src` to `dst` vertices.
#[derive(Clone, Debug)]
pub struct OneRingDeformer {
    index: crate::spatial::PointIndex,
    src: Vec<Vec3>,
    offsets: Vec<Vec3>,
    /// Neighborhood of each candidate vertex: itself plus its one-ring within the candidate set.
    rings: Vec<Vec<u32>>,
}

impl OneRingDeformer {
    /// `subset` restricts both the nearest-vertex search and the neighborhoods; `None` uses every vertex.
    pub fn new(rig: &HeadRig, src: &Mesh, dst: &Mesh, subset: Option<&[u32]>) -> Result<Self> {
        let nv = rig.vertex_count();
        if src.vertices.len() != nv || dst.vertices.len() != nv {
            return Err(Error::contract("one-ring deformation needs meshes with the rig's vertex count"));
        }
        let all: Vec<u32>;
        let members: &[u32] = match subset {
            Some(s) => s,
            None => {
                all = (0..nv as u32).collect();
                &all
            }
        };
        let mut inside = vec![false; nv];
        for &v in members {
            inside[v as usize] = true;
        }
        let mut rings = vec![Vec::new(); nv];
        for &v in members {
            let mut ring = vec![v];
            ring.extend(rig.one_ring(v as usize)?.iter().copied().filter(|&u| inside[u as usize]));
            rings[v as usize] = ring;
        }
        Ok(Self {
            index: crate::spatial::PointIndex::build(members.iter().map(|&v| (src.vertices[v as usize], v))),
            src: src.vertices.clone(),
            offsets: dst.vertices.iter().zip(&src.vertices).map(|(d, s)| d - s).collect(),
            rings,
        })
    }

    pub fn offset(&self, x: &Vec3) -> Vec3 {
        let Some(nearest) = self.index.nearest(x) else {
            return Vec3::zeros();
        };
        let mut acc = Vec3::zeros();
        let mut z = 0.0;
        for &v in &self.rings[nearest as usize] {
            let w = 1.0 / (x - self.src[v as usize]).norm().max(WEIGHT_EPS);
            acc += self.offsets[v as usize] * w;
            z += w;
        }
        acc / z
    }
}

/// One-shot one-ring deformation of `x_n` between two posings of the rig.
pub fn one_ring_deform(x_n: &Vec3, src: &Mesh, dst: &Mesh, rig: &HeadRig) -> Result<Vec3> {
    Ok(OneRingDeformer::new(rig, src, dst, None)?.offset(x_n))
}

/// Construction parameters of a [`DeformationField`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub grid_resolution: usize,
    pub canonical_jaw: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid_resolution: DEFAULT_GRID_RES,
            canonical_jaw: DEFAULT_CANONICAL_JAW,
        }
    }
}

/// Neck-only canonicalization via the surface-field grid.
#[derive(Clone, Debug)]
pub struct NeckField {
    grid: VoxelGrid,
}

impl NeckField {
    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn canonicalize(&self, x: &Vec3) -> Vec3 {
        self.grid.apply(x)
    }
}

impl Deformation for NeckField {
    fn deform(&self, x: &Vec3) -> DeformationPair {
        let d = self.canonicalize(x) - x;
        DeformationPair { dx_head: d, dx_part: d }
    }
}

/// Neck field for a shape code and neck rotation only (no expression, jaw or eyes).
pub fn neck_only_field(rig: &HeadRig, alpha: &ShapeCode, neck: [f64; 3], grid_res: usize) -> Result<NeckField> {
    let beta = ExpressionCode::zeros(rig.expr_dim());
    let pose = PoseCode {
        neck,
        ..PoseCode::zero()
    };
    Ok(NeckField {
        grid: build_sf_grid(rig, alpha, &beta, &pose, grid_res)?,
    })
}

/// The full part-wise deformation field for one `(α, β, γ)`.
#[derive(Clone, Debug)]
pub struct DeformationField {
    neck: NeckField,
    head: OneRingDeformer,
    eyes: OneRingDeformer,
    mouth: OneRingDeformer,
    eye_boxes: [Aabb; 2],
}

impl DeformationField {
    pub fn new(
        rig: &HeadRig,
        alpha: &ShapeCode,
        beta: &ExpressionCode,
        pose: &PoseCode,
        config: FieldConfig,
    ) -> Result<Self> {
        let gamma_n = pose.without_neck();
        let posed = rig.evaluate_mesh(alpha, beta, pose)?;
        let neck_canonical = rig.evaluate_mesh(alpha, beta, &gamma_n)?;
        let grid = sf_grid_between(&posed, &neck_canonical, config.grid_resolution)?;

        let zero_a = ShapeCode::zeros(rig.shape_dim());
        let zero_b = ExpressionCode::zeros(rig.expr_dim());
        let canonical = rig.evaluate_mesh(&zero_a, &zero_b, &canonical_pose(config.canonical_jaw)?)?;

        let head_src = rig.evaluate_mesh(alpha, beta, &gamma_n.without_eye())?;
        let head = OneRingDeformer::new(rig, &head_src, &canonical, None)?;

        let parts = rig.parts();
        let eyeballs: Vec<u32> = parts.eyeball_left.iter().chain(&parts.eyeball_right).copied().collect();
        let eyes = OneRingDeformer::new(rig, &neck_canonical, &canonical, Some(&eyeballs))?;

        let lip_src = rig.evaluate_mesh(alpha, &zero_b, &gamma_n)?;
        let mouth = OneRingDeformer::new(rig, &lip_src, &canonical, Some(&parts.lip_region))?;

        let eye_box = |set: &[u32]| {
            Aabb::from_points(set.iter().map(|&v| &neck_canonical.vertices[v as usize])).scaled(EYE_BOX_INFLATION)
        };
        Ok(Self {
            neck: NeckField { grid },
            head,
            eyes,
            mouth,
            eye_boxes: [eye_box(&parts.eyeball_left), eye_box(&parts.eyeball_right)],
        })
    }

    pub fn neck_stage(&self) -> &NeckField {
        &self.neck
    }

    pub fn eye_boxes(&self) -> &[Aabb; 2] {
        &self.eye_boxes
    }

    pub fn in_eye_box(&self, x_n: &Vec3) -> bool {
        self.eye_boxes.iter().any(|b| !b.is_empty() && b.contains(x_n))
    }

    pub fn eval(&self, x: &Vec3) -> DeformationPair {
        let x_n = self.neck.canonicalize(x);
        let to_neck = x_n - x;
        let dx_head = to_neck + self.head.offset(&x_n);
        let part = if self.in_eye_box(&x_n) {
            self.eyes.offset(&x_n)
        } else {
            self.mouth.offset(&x_n)
        };
        DeformationPair {
            dx_head,
            dx_part: to_neck + part,
        }
    }
}

impl Deformation for DeformationField {
    fn deform(&self, x: &Vec3) -> DeformationPair {
        self.eval(x)
    }
}

/// Builds the part-wise field with a given grid resolution and the default canonical jaw.
pub fn deformation_field(
    rig: &HeadRig,
    alpha: &ShapeCode,
    beta: &ExpressionCode,
    pose: &PoseCode,
    grid_res: usize,
) -> Result<DeformationField> {
    DeformationField::new(
        rig,
        alpha,
        beta,
        pose,
        FieldConfig {
            grid_resolution: grid_res,
            ..FieldConfig::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::{procedural_rig, RigSpec};
    use crate::spatial::closest_point_exhaustive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> HeadRig {
        procedural_rig(&RigSpec::small(), 2).unwrap()
    }

    fn zeros(rig: &HeadRig) -> (ShapeCode, ExpressionCode) {
        (ShapeCode::zeros(rig.shape_dim()), ExpressionCode::zeros(rig.expr_dim()))
    }

    fn random_point(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
        Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
    }

    #[test]
    fn identical_meshes_give_identity() {
        let rig = rig();
        let m = rig.template_mesh();
        let sf = SurfaceField::new(&m, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..300 {
            let x = random_point(&mut rng, 0.7);
            assert!((sf.map(&x) - x).norm() < 1e-9);
        }
    }

    #[test]
    fn global_rotation_is_undone() {
        let rig = rig();
        let m = rig.template_mesh();
        let r = crate::geom::axis_angle([0.2, -0.4, 0.1]);
        let rotated = Mesh::new(m.vertices.iter().map(|p| r * p).collect(), m.triangles.clone());
        let sf = SurfaceField::new(&rotated, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = rng.random_range(0..m.triangles.len());
            let [a, b, c] = m.corners(t);
            let (u, v) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
            let p = a * (1.0 - u - v) + b * u + c * v;
            let n = crate::geom::triangle_normal(a, b, c);
            let q = p + n * 0.01;
            assert!((sf.map(&(r * q)) - q).norm() < 1e-9);
        }
    }

    /// Independent surface-field evaluation: exhaustive nearest triangle and per-call normals.
    fn sf_oracle(x: &Vec3, posed: &Mesh, canonical: &Mesh) -> Vec3 {
        let hit = closest_point_exhaustive(posed, x).unwrap();
        let [a, b, c] = canonical.corners(hit.triangle);
        let [u, v, w] = hit.barycentric;
        let proj = a * u + b * v + c * w;
        let [pa, pb, pc] = posed.corners(hit.triangle);
        let f = triangle_frame(pa, pb, pc);
        let fc = triangle_frame(a, b, c);
        let local = f.transpose() * (x - hit.point);
        proj + fc * local
    }

    #[test]
    fn matches_exhaustive_oracle_with_neck_rotation() {
        let rig = rig();
        let (a, b) = zeros(&rig);
        let pose = PoseCode {
            neck: [0.3, 0.0, 0.0],
            ..PoseCode::zero()
        };
        let posed = rig.evaluate_mesh(&a, &b, &pose).unwrap();
        let canon = rig.evaluate_mesh(&a, &b, &pose.without_neck()).unwrap();
        let sf = SurfaceField::new(&posed, &canon).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x = random_point(&mut rng, 0.5);
            assert!((sf.map(&x) - sf_oracle(&x, &posed, &canon)).norm() < 1e-12);
        }
    }

    #[test]
    fn mismatched_topology_rejected() {
        let rig = rig();
        let m = rig.template_mesh();
        let mut other = m.clone();
        other.triangles.pop();
        assert!(matches!(surface_field(&Vec3::zeros(), &m, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_neck_grid_is_identity() {
        let rig = rig();
        let (a, b) = zeros(&rig);
        let pose = PoseCode {
            jaw: [0.1, 0.0, 0.0],
            eye: [0.0, 0.2, 0.0],
            ..PoseCode::zero()
        };
        let grid = build_sf_grid(&rig, &a, &b, &pose, 6).unwrap();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    assert!((grid.node_value(i, j, k) - grid.node_position(i, j, k)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn grid_interpolation_basics() {
        let bounds = Aabb {
            min: Vec3::new(-1.0, -0.5, 0.0),
            max: Vec3::new(1.0, 0.5, 2.0),
        };
        let m = Matrix3::new(0.3, -0.2, 0.1, 0.5, 1.1, -0.4, 0.0, 0.2, 0.9);
        let t = Vec3::new(0.1, 0.2, -0.3);
        let grid = VoxelGrid::from_fn(bounds, [5, 4, 3], |p| m * p + t).unwrap();
        for (i, j, k) in [(0, 0, 0), (4, 3, 2), (2, 1, 1)] {
            assert_eq!(grid.apply(&grid.node_position(i, j, k)), grid.node_value(i, j, k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.0..2.0));
            assert!((grid.apply(&x) - (m * x + t)).norm() < 1e-12);
        }
        let outside = Vec3::new(3.0, -2.0, 1.0);
        let clamped = Vec3::new(1.0, -0.5, 1.0);
        assert_eq!(grid.interpolate(&outside), grid.apply(&clamped));
        assert_eq!(grid.apply(&outside), grid.apply(&clamped) + (outside - clamped));
        assert!(VoxelGrid::from_fn(bounds, [1, 4, 4], |p| *p).is_err());
    }

    #[test]
    fn grid_binary_round_trip() {
        let bounds = Aabb {
            min: Vec3::repeat(-1.0),
            max: Vec3::repeat(1.0),
        };
        let grid = VoxelGrid::from_fn(bounds, [3, 3, 3], |p| p * 0.5).unwrap();
        let mut buf = Vec::new();
        grid.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 27 * 12);
        let back = VoxelGrid::read_binary(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, grid);
        buf[0] = b'X';
        assert!(VoxelGrid::read_binary(buf.as_slice(), "mem").is_err());
    }

    #[test]
    fn one_ring_translation_and_identity() {
        let rig = rig();
        let src = rig.template_mesh();
        let shift = Vec3::new(0.01, -0.02, 0.03);
        let dst = Mesh::new(src.vertices.iter().map(|p| p + shift).collect(), src.triangles.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = OneRingDeformer::new(&rig, &src, &dst, None).unwrap();
        let same = OneRingDeformer::new(&rig, &src, &src, None).unwrap();
        for _ in 0..100 {
            let x = random_point(&mut rng, 0.5);
            assert!((d.offset(&x) - shift).norm() < 1e-14);
            assert_eq!(same.offset(&x), Vec3::zeros());
        }
    }

    #[test]
    fn one_ring_at_vertex_takes_that_vertex_offset() {
        let rig = rig();
        let (mut a, b) = zeros(&rig);
        a.0[0] = 2.0;
        let src = rig.template_mesh();
        let dst = rig.evaluate_mesh(&a, &b, &PoseCode::zero()).unwrap();
        for v in [5usize, 40, 100] {
            let x = src.vertices[v];
            let got = one_ring_deform(&x, &src, &dst, &rig).unwrap();
            let want = dst.vertices[v] - src.vertices[v];
            assert!((got - want).norm() <= 1e-3 * want.norm().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn one_ring_is_convex_bounded() {
        let rig = rig();
        let (mut a, mut b) = zeros(&rig);
        a.0[1] = 1.5;
        b.0[0] = -2.0;
        let src = rig.template_mesh();
        let dst = rig.evaluate_mesh(&a, &b, &PoseCode::zero()).unwrap();
        let d = OneRingDeformer::new(&rig, &src, &dst, None).unwrap();
        let max_off = src
            .vertices
            .iter()
            .zip(&dst.vertices)
            .map(|(s, t)| (t - s).norm())
            .fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            assert!(d.offset(&random_point(&mut rng, 0.5)).norm() <= max_off + 1e-15);
        }
    }

    #[test]
    fn canonical_codes_give_zero_field() {
        let rig = rig();
        let (a, b) = zeros(&rig);
        let field = deformation_field(&rig, &a, &b, &canonical_pose(0.2).unwrap(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let d = field.eval(&random_point(&mut rng, 0.45));
            assert!(d.dx_head.norm() < 1e-9 && d.dx_part.norm() < 1e-9);
        }
    }

    #[test]
    fn eye_rotation_changes_part_branch_only_inside_eye_boxes() {
        let rig = rig();
        let (a, b) = zeros(&rig);
        let pose = PoseCode {
            eye: [0.0, 0.3, 0.0],
            jaw: [0.2, 0.0, 0.0],
            ..PoseCode::zero()
        };
        let field = deformation_field(&rig, &a, &b, &pose, 8).unwrap();
        let posed = rig.evaluate_mesh(&a, &b, &pose).unwrap();
        // a point on the rotated left eyeball surface
        let v = rig.parts().eyeball_left[rig.parts().eyeball_left.len() / 2] as usize;
        let x = posed.vertices[v];
        let d = field.eval(&x);
        assert!(field.in_eye_box(&x));
        assert!((d.dx_part - d.dx_head).norm() > 1e-3);
        // part branch lands on the unrotated (canonical) eyeball vertex
        let canonical = rig.evaluate_mesh(&a, &b, &canonical_pose(0.2).unwrap()).unwrap();
        assert!((x + d.dx_part - canonical.vertices[v]).norm() < 1e-6);
    }

    #[test]
    fn deterministic_and_neck_stage_shared() {
        let rig = rig();
        let (mut a, b) = zeros(&rig);
        a.0[2] = 0.7;
        let neck = [0.1, 0.3, 0.0];
        let pose = PoseCode {
            neck,
            ..PoseCode::zero()
        };
        let f1 = deformation_field(&rig, &a, &b, &pose, 8).unwrap();
        let f2 = deformation_field(&rig, &a, &b, &pose, 8).unwrap();
        let nf = neck_only_field(&rig, &a, neck, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = random_point(&mut rng, 0.5);
            assert_eq!(f1.eval(&x), f2.eval(&x));
            assert_eq!(nf.canonicalize(&x), f1.neck_stage().canonicalize(&x));
        }
        let id = neck_only_field(&rig, &a, [0.0; 3], 6).unwrap();
        let x = Vec3::new(0.1, 0.05, 0.2);
        assert!((id.canonicalize(&x) - x).norm() < 1e-9);
    }
}
