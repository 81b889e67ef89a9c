//! Parametric head rig: linear shape/expression blendshapes plus linear blend skinning
//! over five joints (a static root, neck, jaw and the two eyes).
//!
//! The rig mirrors the code layout of the usual 3D morphable head models: a shape code
//! (default 300 coefficients), an expression code (default 100) and a 9-dim pose code
//! `[eye, jaw, neck]` in axis-angle form. Both eyes share the single eye rotation.
//!
//! The kinematic chain is `root -> neck -> {jaw, eye_left, eye_right}`. Joint pivots are
//! fixed rig data and do not move with the shape code.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{smoothstep, v3, RigidTransform, Vec3};

pub const DEFAULT_SHAPE_DIM: usize = 300;
pub const DEFAULT_EXPR_DIM: usize = 100;
pub const POSE_DIM: usize = 9;
/// Root, neck, jaw, left eye, right eye.
pub const JOINT_COUNT: usize = 5;
pub const RIG_FORMAT_VERSION: u32 = 1;
/// Default canonical jaw opening (rad) about the jaw x-axis.
pub const DEFAULT_CANONICAL_JAW: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCode(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionCode(pub Vec<f64>);

impl ShapeCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

impl ExpressionCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

/// Axis-angle rotations for the eyes (shared), jaw and neck.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseCode {
    pub eye: [f64; 3],
    pub jaw: [f64; 3],
    pub neck: [f64; 3],
}

impl PoseCode {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        out[..3].copy_from_slice(&self.eye);
        out[3..6].copy_from_slice(&self.jaw);
        out[6..].copy_from_slice(&self.neck);
        out
    }

    pub fn from_array(a: [f64; POSE_DIM]) -> Self {
        Self {
            eye: [a[0], a[1], a[2]],
            jaw: [a[3], a[4], a[5]],
            neck: [a[6], a[7], a[8]],
        }
    }

    /// Same pose with the neck rotation zeroed.
    pub fn without_neck(&self) -> Self {
        Self { neck: [0.0; 3], ..*self }
    }

    /// Same pose with the eye rotation zeroed.
    pub fn without_eye(&self) -> Self {
        Self { eye: [0.0; 3], ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("eye", self.eye), ("jaw", self.jaw), ("neck", self.neck)] {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("{name} rotation is not finite")));
            }
            let mag = v3(r).norm();
            if mag >= std::f64::consts::PI {
                return Err(Error::contract(format!("{name} rotation magnitude {mag} must be < pi")));
            }
        }
        Ok(())
    }
}

/// Canonical pose: zero eyes and neck, jaw opened by `jaw_open` rad about x.
pub fn canonical_pose(jaw_open: f64) -> Result<PoseCode> {
    if !(0.0..=0.5).contains(&jaw_open) {
        return Err(Error::contract(format!("canonical jaw opening {jaw_open} outside [0, 0.5] rad")));
    }
    Ok(PoseCode {
        eye: [0.0; 3],
        jaw: [jaw_open, 0.0, 0.0],
        neck: [0.0; 3],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    EyeballLeft,
    EyeballRight,
    EyeRegion,
    LipRegion,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::EyeballLeft, Part::EyeballRight, Part::EyeRegion, Part::LipRegion];

    pub fn name(&self) -> &'static str {
        match self {
            Part::EyeballLeft => "eyeball-left",
            Part::EyeballRight => "eyeball-right",
            Part::EyeRegion => "eye-region",
            Part::LipRegion => "lip-region",
        }
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Part::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown part id '{s}'")))
    }
}

/// Index sets naming the rig's parts. Vertex sets are sorted and unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartSets {
    pub eyeball_left: Vec<u32>,
    pub eyeball_right: Vec<u32>,
    pub eye_region: Vec<u32>,
    pub lip_region: Vec<u32>,
    /// Face indices of the inner mouth.
    pub inner_mouth_faces: Vec<u32>,
    /// Vertices of the head surface (everything except the eyeballs).
    pub full_head: Vec<u32>,
}

impl PartSets {
    pub fn vertices(&self, part: Part) -> &[u32] {
        match part {
            Part::EyeballLeft => &self.eyeball_left,
            Part::EyeballRight => &self.eyeball_right,
            Part::EyeRegion => &self.eye_region,
            Part::LipRegion => &self.lip_region,
        }
    }
}

/// Triangle mesh with optional per-vertex normals.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            normals: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn corners(&self, t: usize) -> [&Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [&self.vertices[a as usize], &self.vertices[b as usize], &self.vertices[c as usize]]
    }

    /// Area-weighted vertex normals; vertices without incident faces get a zero normal.
    pub fn with_normals(mut self) -> Self {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in tri {
                acc[i as usize] += n;
            }
        }
        for n in &mut acc {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        self.normals = Some(acc);
        self
    }

    pub fn same_topology(&self, other: &Mesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.triangles == other.triangles
    }
}

/// Immutable parametric head rig.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRig {
    template: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    /// Column-major: column `k` occupies `[k * 3V, (k + 1) * 3V)`.
    shape_basis: Vec<f64>,
    expr_basis: Vec<f64>,
    shape_dim: usize,
    expr_dim: usize,
    /// Pivots of neck, jaw, left eye, right eye.
    joints: [Vec3; 4],
    skin: Vec<[f64; JOINT_COUNT]>,
    parts: PartSets,
    adjacency: Vec<Vec<u32>>,
}

/// Serialized form of a [`HeadRig`].
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RigFile {
    format_version: u32,
    template: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
    /// One entry per basis column; each column has 3·V values (x, y, z per vertex).
    shape_basis: Vec<Vec<f64>>,
    expression_basis: Vec<Vec<f64>>,
    joints: JointsFile,
    /// Per vertex: weights for [root, neck, jaw, eye_left, eye_right].
    skinning: Vec<[f64; JOINT_COUNT]>,
    parts: PartSets,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JointsFile {
    neck: [f64; 3],
    jaw: [f64; 3],
    eye_left: [f64; 3],
    eye_right: [f64; 3],
}

impl HeadRig {
    /// Assembles a rig, checking every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        shape_basis: Vec<Vec<f64>>,
        expr_basis: Vec<Vec<f64>>,
        joints: [Vec3; 4],
        skin: Vec<[f64; JOINT_COUNT]>,
        parts: PartSets,
    ) -> Result<Self> {
        let nv = template.len();
        if template.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation("template contains non-finite coordinates".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i as usize >= nv) {
                return Err(Error::Validation(format!("triangle {t} references a vertex outside 0..{nv}")));
            }
        }
        let flatten = |cols: Vec<Vec<f64>>, what: &str| -> Result<Vec<f64>> {
            let mut flat = Vec::with_capacity(cols.len() * 3 * nv);
            for (k, col) in cols.into_iter().enumerate() {
                if col.len() != 3 * nv {
                    return Err(Error::Validation(format!(
                        "{what} column {k} has {} values, expected {}",
                        col.len(),
                        3 * nv
                    )));
                }
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("{what} column {k} is not finite")));
                }
                flat.extend(col);
            }
            Ok(flat)
        };
        let shape_dim = shape_basis.len();
        let expr_dim = expr_basis.len();
        let shape_basis = flatten(shape_basis, "shape basis")?;
        let expr_basis = flatten(expr_basis, "expression basis")?;
        if skin.len() != nv {
            return Err(Error::Validation(format!("{} skinning rows for {nv} vertices", skin.len())));
        }
        for (v, row) in skin.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "skinning row of vertex {v} is not convex (weights {row:?}, sum {sum})"
                )));
            }
        }
        for (name, set) in [
            ("eyeball_left", &parts.eyeball_left),
            ("eyeball_right", &parts.eyeball_right),
            ("eye_region", &parts.eye_region),
            ("lip_region", &parts.lip_region),
            ("full_head", &parts.full_head),
        ] {
            if let Some(&bad) = set.iter().find(|&&i| i as usize >= nv) {
                return Err(Error::Validation(format!("part {name} lists vertex {bad} outside 0..{nv}")));
            }
        }
        if let Some(&bad) = parts.inner_mouth_faces.iter().find(|&&f| f as usize >= triangles.len()) {
            return Err(Error::Validation(format!("inner mouth face {bad} out of range")));
        }
        let adjacency = build_adjacency(nv, &triangles);
        Ok(Self {
            template,
            triangles,
            shape_basis,
            expr_basis,
            shape_dim,
            expr_dim,
            joints,
            skin,
            parts,
            adjacency,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_dim
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_dim
    }

    pub fn parts(&self) -> &PartSets {
        &self.parts
    }

    pub fn skinning(&self) -> &[[f64; JOINT_COUNT]] {
        &self.skin
    }

    /// Pivots of neck, jaw, left eye and right eye.
    pub fn joints(&self) -> &[Vec3; 4] {
        &self.joints
    }

    pub fn shape_column(&self, k: usize) -> &[f64] {
        let n = 3 * self.vertex_count();
        &self.shape_basis[k * n..(k + 1) * n]
    }

    pub fn expression_column(&self, k: usize) -> &[f64] {
        let n = 3 * self.vertex_count();
        &self.expr_basis[k * n..(k + 1) * n]
    }

    pub fn template_mesh(&self) -> Mesh {
        Mesh::new(self.template.clone(), self.triangles.clone())
    }

    /// Faces rasterized into the part mask: the inner mouth plus every eyeball face.
    pub fn mask_faces(&self) -> Vec<u32> {
        let eye: BTreeSet<u32> = self.parts.eyeball_left.iter().chain(&self.parts.eyeball_right).copied().collect();
        let mut faces: BTreeSet<u32> = self.parts.inner_mouth_faces.iter().copied().collect();
        for (f, tri) in self.triangles.iter().enumerate() {
            if tri.iter().all(|v| eye.contains(v)) {
                faces.insert(f as u32);
            }
        }
        faces.into_iter().collect()
    }

    fn check_codes(&self, alpha: &ShapeCode, beta: &ExpressionCode) -> Result<()> {
        if alpha.0.len() != self.shape_dim {
            return Err(Error::contract(format!(
                "shape code has {} entries, rig expects {}",
                alpha.0.len(),
                self.shape_dim
            )));
        }
        if beta.0.len() != self.expr_dim {
            return Err(Error::contract(format!(
                "expression code has {} entries, rig expects {}",
                beta.0.len(),
                self.expr_dim
            )));
        }
        if alpha.0.iter().chain(&beta.0).any(|v| !v.is_finite()) {
            return Err(Error::contract("codes must be finite"));
        }
        Ok(())
    }

    /// Template plus blendshape offsets, before any skinning.
    pub fn blend_shapes(&self, alpha: &ShapeCode, beta: &ExpressionCode) -> Result<Vec<Vec3>> {
        self.check_codes(alpha, beta)?;
        let n = 3 * self.vertex_count();
        let mut flat: Vec<f64> = self.template.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        for (basis, code) in [(&self.shape_basis, &alpha.0), (&self.expr_basis, &beta.0)] {
            for (k, &c) in code.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let col = &basis[k * n..(k + 1) * n];
                for (o, b) in flat.iter_mut().zip(col) {
                    *o += c * b;
                }
            }
        }
        Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    /// World transforms of [root, neck, jaw, eye_left, eye_right] for a pose.
    pub fn joint_transforms(&self, pose: &PoseCode) -> [RigidTransform; JOINT_COUNT] {
        let [neck_p, jaw_p, eye_l, eye_r] = self.joints;
        let neck = RigidTransform::about(pose.neck, neck_p);
        let jaw = neck.compose(&RigidTransform::about(pose.jaw, jaw_p));
        let el = neck.compose(&RigidTransform::about(pose.eye, eye_l));
        let er = neck.compose(&RigidTransform::about(pose.eye, eye_r));
        [RigidTransform::identity(), neck, jaw, el, er]
    }

    /// Posed mesh `m(α, β, γ)`: blendshapes, then linear blend skinning.
    pub fn evaluate_mesh(&self, alpha: &ShapeCode, beta: &ExpressionCode, pose: &PoseCode) -> Result<Mesh> {
        pose.validate()?;
        let rest = self.blend_shapes(alpha, beta)?;
        let xf = self.joint_transforms(pose);
        let vertices = rest
            .iter()
            .zip(&self.skin)
            .map(|(p, w)| skin_point(p, w, &xf))
            .collect();
        Ok(Mesh::new(vertices, self.triangles.clone()))
    }

    /// Sub-mesh of one part: its vertices (in set order) and the faces whose three
    /// corners all belong to the part, re-indexed.
    pub fn part_submesh(&self, posed: &Mesh, part: Part) -> Result<Mesh> {
        if posed.vertices.len() != self.vertex_count() {
            return Err(Error::contract("posed mesh does not match the rig's vertex count"));
        }
        let set = self.parts.vertices(part);
        let mut remap = vec![u32::MAX; self.vertex_count()];
        for (new, &old) in set.iter().enumerate() {
            remap[old as usize] = new as u32;
        }
        let vertices = set.iter().map(|&i| posed.vertices[i as usize]).collect();
        let triangles = self
            .triangles
            .iter()
            .filter_map(|tri| {
                let m = tri.map(|i| remap[i as usize]);
                m.iter().all(|&i| i != u32::MAX).then_some(m)
            })
            .collect();
        Ok(Mesh::new(vertices, triangles))
    }

    /// Vertices sharing a triangle with `vertex`, excluding itself, in ascending order.
    pub fn one_ring(&self, vertex: usize) -> Result<&[u32]> {
        self.adjacency
            .get(vertex)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("vertex {vertex} out of range 0..{}", self.vertex_count())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = 3 * self.vertex_count();
        let file = RigFile {
            format_version: RIG_FORMAT_VERSION,
            template: self.template.iter().map(|p| [p.x, p.y, p.z]).collect(),
            triangles: self.triangles.clone(),
            shape_basis: self.shape_basis.chunks(n.max(1)).map(<[f64]>::to_vec).collect(),
            expression_basis: self.expr_basis.chunks(n.max(1)).map(<[f64]>::to_vec).collect(),
            joints: JointsFile {
                neck: self.joints[0].into(),
                jaw: self.joints[1].into(),
                eye_left: self.joints[2].into(),
                eye_right: self.joints[3].into(),
            },
            skinning: self.skin.clone(),
            parts: self.parts.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: RigFile = serde_json::from_str(text)
            .map_err(|e| Error::parse(origin, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        if file.format_version != RIG_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported rig format_version {} (expected {RIG_FORMAT_VERSION})",
                file.format_version
            )));
        }
        HeadRig::new(
            file.template.into_iter().map(v3).collect(),
            file.triangles,
            file.shape_basis,
            file.expression_basis,
            [
                v3(file.joints.neck),
                v3(file.joints.jaw),
                v3(file.joints.eye_left),
                v3(file.joints.eye_right),
            ],
            file.skinning,
            file.parts,
        )
    }
}

#[inline]
fn skin_point(p: &Vec3, w: &[f64; JOINT_COUNT], xf: &[RigidTransform; JOINT_COUNT]) -> Vec3 {
    // displacement form keeps identity transforms bit-exact
    let mut d = Vec3::zeros();
    for (wj, t) in w.iter().zip(xf) {
        if *wj != 0.0 {
            d += (t.apply(p) - p) * *wj;
        }
    }
    p + d
}

fn build_adjacency(nv: usize, triangles: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut sets = vec![BTreeSet::new(); nv];
    for tri in triangles {
        for &a in tri {
            for &b in tri {
                if a != b {
                    sets[a as usize].insert(b);
                }
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Tessellation and size parameters of the procedural rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    /// Semi-axes of the head ellipsoid (x, y, z), centered at the origin.
    pub head_radii: [f64; 3],
    pub head_rings: usize,
    pub head_segments: usize,
    pub eye_radius: f64,
    pub eye_rings: usize,
    pub eye_segments: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    /// Peak displacement of the leading basis columns per unit coefficient.
    pub basis_scale: f64,
    /// Weight every head vertex fully to the neck (no falloff to the static root).
    pub rigid_neck: bool,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            head_radii: [0.30, 0.36, 0.32],
            head_rings: 32,
            head_segments: 48,
            eye_radius: 0.045,
            eye_rings: 10,
            eye_segments: 16,
            shape_dim: DEFAULT_SHAPE_DIM,
            expr_dim: DEFAULT_EXPR_DIM,
            basis_scale: 0.01,
            rigid_neck: false,
        }
    }
}

impl RigSpec {
    /// Small rig for tests and quick runs.
    pub fn small() -> Self {
        Self {
            head_rings: 16,
            head_segments: 24,
            eye_rings: 6,
            eye_segments: 8,
            shape_dim: 8,
            expr_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_rings < 3 || self.head_segments < 3 || self.eye_rings < 3 || self.eye_segments < 3 {
            return Err(Error::contract("tessellation needs at least 3 rings and 3 segments"));
        }
        if self.head_radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) || !(self.eye_radius > 0.0) {
            return Err(Error::contract("radii must be positive"));
        }
        if self.eye_radius * 4.0 > self.head_radii[0] {
            return Err(Error::contract("eye radius too large for the head"));
        }
        if !(self.basis_scale.is_finite() && self.basis_scale >= 0.0) {
            return Err(Error::contract("basis scale must be non-negative"));
        }
        Ok(())
    }

    pub fn mouth_center(&self) -> Vec3 {
        let [_, b, c] = self.head_radii;
        let y = -0.33 * b;
        let z = c * (1.0 - (y / b).powi(2)).sqrt();
        Vec3::new(0.0, y, z)
    }

    /// Centers of the left (+x) and right (-x) eyeballs; each protrudes from the head surface.
    pub fn eye_centers(&self) -> [Vec3; 2] {
        let [a, b, c] = self.head_radii;
        let x = 0.35 * a;
        let y = 0.17 * b;
        let zs = c * (1.0 - (x / a).powi(2) - (y / b).powi(2)).sqrt();
        let z = zs - 0.45 * self.eye_radius;
        [Vec3::new(x, y, z), Vec3::new(-x, y, z)]
    }

    pub fn neck_pivot(&self) -> Vec3 {
        Vec3::new(0.0, -0.85 * self.head_radii[1], -0.1 * self.head_radii[2])
    }

    pub fn jaw_pivot(&self) -> Vec3 {
        Vec3::new(0.0, -0.1 * self.head_radii[1], -0.1 * self.head_radii[2])
    }

    /// Radius of a sphere about the origin enclosing the rig in any pose the samplers produce.
    pub fn bounding_radius(&self) -> f64 {
        self.head_radii.iter().cloned().fold(0.0, f64::max) * 1.2
    }
}

/// UV sphere (ellipsoid) with poles on the y axis; returns vertices, outward normals and
/// counter-clockwise (outward-facing) triangles.
fn uv_ellipsoid(center: Vec3, radii: [f64; 3], rings: usize, segments: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    use std::f64::consts::PI;
    let mut verts = vec![center + Vec3::new(0.0, radii[1], 0.0)];
    for r in 1..rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let dir = Vec3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos());
            verts.push(center + Vec3::new(dir.x * radii[0], dir.y * radii[1], dir.z * radii[2]));
        }
    }
    verts.push(center - Vec3::new(0.0, radii[1], 0.0));
    let bottom = (verts.len() - 1) as u32;
    let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
    let mut tris = Vec::new();
    for s in 0..segments {
        tris.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            tris.push([a, c, d]);
            tris.push([a, d, b]);
        }
    }
    for s in 0..segments {
        tris.push([bottom, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    (verts, tris)
}

/// Deterministic stand-in rig: an ellipsoid head, two eyeball spheres, a jaw region with
/// skinning falloff, lip/eye regions and an inner-mouth face patch. Blendshape columns are
/// smooth seeded fields on the head surface; eyeballs are unaffected by blendshapes so the
/// eye pivots stay at the eyeball centers.
pub fn procedural_rig(spec: &RigSpec, seed: u64) -> Result<HeadRig> {
    spec.validate()?;
    let [a, b, c] = spec.head_radii;
    let (mut verts, mut tris) = uv_ellipsoid(Vec3::zeros(), spec.head_radii, spec.head_rings, spec.head_segments);
    let head_count = verts.len();
    let head_faces = tris.len();
    let eye_centers = spec.eye_centers();
    let mut eyeballs = [Vec::new(), Vec::new()];
    for (e, center) in eye_centers.iter().enumerate() {
        let base = verts.len() as u32;
        let r = spec.eye_radius;
        let (ev, et) = uv_ellipsoid(*center, [r, r, r], spec.eye_rings, spec.eye_segments);
        eyeballs[e] = (base..base + ev.len() as u32).collect();
        verts.extend(ev);
        tris.extend(et.into_iter().map(|t| t.map(|i| i + base)));
    }
    let nv = verts.len();

    let mouth = spec.mouth_center();
    let neck_pivot = spec.neck_pivot();
    let jaw_pivot = spec.jaw_pivot();

    // skinning
    let mut skin = vec![[0.0; JOINT_COUNT]; nv];
    for (i, p) in verts.iter().enumerate().take(head_count) {
        let neck = if spec.rigid_neck {
            1.0
        } else {
            smoothstep((p.y + b) / (0.45 * b))
        };
        let below = smoothstep((mouth.y + 0.02 * b - p.y) / (0.12 * b));
        let front = smoothstep((p.z - 0.1 * c) / (0.35 * c));
        let jaw = below * front;
        skin[i] = [1.0 - neck, neck * (1.0 - jaw), neck * jaw, 0.0, 0.0];
    }
    for (e, set) in eyeballs.iter().enumerate() {
        for &i in set {
            skin[i as usize][3 + e] = 1.0;
        }
    }

    // part sets
    let eye_reach = 2.0 * spec.eye_radius;
    let eye_region: Vec<u32> = (0..head_count)
        .filter(|&i| eye_centers.iter().any(|ec| (verts[i] - ec).norm() < eye_reach))
        .map(|i| i as u32)
        .collect();
    let lip_reach = 0.3 * a;
    let lip_region: Vec<u32> = (0..head_count)
        .filter(|&i| (verts[i] - mouth).norm() < lip_reach)
        .map(|i| i as u32)
        .collect();
    let mouth_reach = 0.13 * a;
    let inner_mouth_faces: Vec<u32> = (0..head_faces)
        .filter(|&f| {
            let centroid = tris[f].iter().map(|&i| verts[i as usize]).sum::<Vec3>() / 3.0;
            (centroid - mouth).norm() < mouth_reach
        })
        .map(|f| f as u32)
        .collect();

    // blendshape bases
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Vec3> = verts
        .iter()
        .take(head_count)
        .map(|p| Vec3::new(p.x / (a * a), p.y / (b * b), p.z / (c * c)).normalize())
        .collect();
    let random_column = |rng: &mut ChaCha8Rng, amp: f64, focus: Option<(Vec3, f64)>| -> Vec<f64> {
        let dir = loop {
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = d.norm();
            if n > 0.1 && n <= 1.0 {
                break d / n;
            }
        };
        let freq = rng.random_range(2.0..8.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let tangential = rng.random_range(-0.3..0.3);
        let mut col = vec![0.0; 3 * nv];
        for i in 0..head_count {
            let p = verts[i];
            let mut g = (freq * dir.dot(&p) + phase).sin();
            if let Some((center, width)) = focus {
                g *= (-(p - center).norm_squared() / (width * width)).exp();
            }
            let d = (normals[i] + dir * tangential) * (amp * g);
            col[3 * i..3 * i + 3].copy_from_slice(&[d.x, d.y, d.z]);
        }
        col
    };
    let mut shape = Vec::with_capacity(spec.shape_dim);
    for k in 0..spec.shape_dim {
        let amp = spec.basis_scale / (1.0 + k as f64 / 20.0);
        shape.push(random_column(&mut rng, amp, None));
    }
    let mut expr = Vec::with_capacity(spec.expr_dim);
    for k in 0..spec.expr_dim {
        let amp = spec.basis_scale / (1.0 + k as f64 / 10.0);
        let focus = match k % 3 {
            0 | 1 => (mouth, 0.35 * a),
            _ => ((eye_centers[0] + eye_centers[1]) * 0.5 + Vec3::new(0.0, 0.05 * b, 0.0), 0.45 * a),
        };
        expr.push(random_column(&mut rng, amp, Some(focus)));
    }

    let parts = PartSets {
        eyeball_left: eyeballs[0].clone(),
        eyeball_right: eyeballs[1].clone(),
        eye_region,
        lip_region,
        inner_mouth_faces,
        full_head: (0..head_count as u32).collect(),
    };
    HeadRig::new(
        verts,
        tris,
        shape,
        expr,
        [neck_pivot, jaw_pivot, eye_centers[0], eye_centers[1]],
        skin,
        parts,
    )
}

/// Expected vertex count of a procedural rig, straight from the tessellation parameters.
pub fn procedural_vertex_counts(spec: &RigSpec) -> (usize, usize) {
    let head = 2 + (spec.head_rings - 1) * spec.head_segments;
    let eye = 2 + (spec.eye_rings - 1) * spec.eye_segments;
    (head, eye)
}
