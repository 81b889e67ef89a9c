//! Built-in invariant suite behind `headsynth verify`.
//!
//! Every check is deterministic given the seed and reports one row.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::datagen::{self, DatasetConfig, PointFeatures, Range, SamplingRanges};
use crate::deform::{apply_grid, build_sf_grid, DeformationField, FieldConfig, SurfaceField};
use crate::error::{Error, Result};
use crate::geom::{triangle_normal, Aabb, Vec3};
use crate::headmodel::{canonical_pose, procedural_rig, ExpressionCode, HeadRig, PoseCode, RigSpec, ShapeCode};
use crate::imageio::FeatureMap;
use crate::losses::{self, LossTerms, LossWeights};
use crate::motionnet::{self, FeatureGrid, GateSwitch, MotionVector, PhiDims, MOTION_DIM};
use crate::render::{self, Camera, MaskMap, RenderOut, RenderSettings, Sphere};
use crate::triplane::{bake_analytic, AnalyticField, Blob, EllipsoidSpec, Radiance, COLOR_DIM};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRow {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn(u64) -> Result<(bool, String)>;

/// `(suite, name, check)` in execution order.
pub const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("deform", "surface_field_identity", check_sf_identity),
    ("deform", "surface_field_rigid_inversion", check_sf_rigid),
    ("deform", "grid_convergence", check_grid_convergence),
    ("deform", "canonical_null_field", check_null_field),
    ("render", "telescoping_opacity", check_telescoping),
    ("render", "baked_ellipsoid_psnr", check_baked_psnr),
    ("render", "blend_fuse_exact_corners", check_blend_fuse),
    ("motionnet", "gate_off_independence", check_gate_off),
    ("motionnet", "zero_init_gate_on_equals_off", check_zero_init_gate),
    ("motionnet", "attention_row_sums", check_attention_rows),
    ("motionnet", "finite_difference_jacobian", check_jacobian),
    ("losses", "loss_properties", check_losses),
    ("constants", "pipeline_constants", check_constants),
    ("datagen", "sampling_uniformity", check_uniformity),
    ("datagen", "dataset_determinism", check_dataset),
];

pub fn run_verify(seed: u64) -> Vec<VerifyRow> {
    run_selected(seed, |_| true)
}

/// Runs the checks whose name satisfies `filter`.
pub fn run_selected(seed: u64, filter: impl Fn(&str) -> bool) -> Vec<VerifyRow> {
    CHECKS
        .iter()
        .filter(|(_, name, _)| filter(name))
        .map(|(suite, name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f(seed) {
                Ok(r) => r,
                Err(e) => (false, e.to_string()),
            };
            VerifyRow {
                suite,
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn format_table(rows: &[VerifyRow]) -> String {
    let w = rows.iter().map(|r| r.suite.len() + r.name.len() + 1).max().unwrap_or(0);
    let mut s = String::new();
    for r in rows {
        let label = format!("{}/{}", r.suite, r.name);
        s += &format!(
            "{} {label:<w$} {:>7.2}s  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    s += &format!("{} checks, {} failed\n", rows.len(), failed);
    s
}

fn default_rig() -> Result<HeadRig> {
    procedural_rig(&RigSpec::default(), 0)
}

fn zero_codes(rig: &HeadRig) -> (ShapeCode, ExpressionCode) {
    (ShapeCode::zeros(rig.shape_dim()), ExpressionCode::zeros(rig.expr_dim()))
}

fn random_codes(rig: &HeadRig, rng: &mut ChaCha8Rng, scale: f64) -> (ShapeCode, ExpressionCode) {
    (
        ShapeCode((0..rig.shape_dim()).map(|_| rng.random_range(-scale..scale)).collect()),
        ExpressionCode((0..rig.expr_dim()).map(|_| rng.random_range(-scale..scale)).collect()),
    )
}

fn random_in(rng: &mut ChaCha8Rng, b: &Aabb) -> Vec3 {
    Vec3::new(
        rng.random_range(b.min.x..b.max.x),
        rng.random_range(b.min.y..b.max.y),
        rng.random_range(b.min.z..b.max.z),
    )
}

/// Zero neck rotation: the transfer between the posed mesh and itself is the identity.
fn check_sf_identity(seed: u64) -> Result<(bool, String)> {
    let rig = default_rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = random_codes(&rig, &mut rng, 0.5);
    let pose = PoseCode {
        jaw: [0.1, 0.0, 0.0],
        eye: [0.05, 0.1, 0.0],
        ..PoseCode::zero()
    };
    let t = Instant::now();
    let posed = rig.evaluate_mesh(&a, &b, &pose)?;
    let canonical = rig.evaluate_mesh(&a, &b, &pose.without_neck())?;
    let sf = SurfaceField::new(&posed, &canonical)?;
    let bounds = Aabb::from_points(&posed.vertices).scaled(1.2);
    let max = (0..1000)
        .map(|_| {
            let x = random_in(&mut rng, &bounds);
            (sf.map(&x) - x).norm()
        })
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Ok((max < 1e-9 && secs < 1.0, format!("max |sf(x)-x| = {max:.2e}, {secs:.3}s")))
}

/// Points on triangles skinned fully to the neck joint, rotated by 0.3 rad, return to their
/// unrotated positions.
fn check_sf_rigid(seed: u64) -> Result<(bool, String)> {
    let rig = default_rig()?;
    let (a, b) = zero_codes(&rig);
    let pose = PoseCode {
        neck: [0.3, 0.0, 0.0],
        ..PoseCode::zero()
    };
    let posed = rig.evaluate_mesh(&a, &b, &pose)?;
    let canonical = rig.evaluate_mesh(&a, &b, &PoseCode::zero())?;
    let sf = SurfaceField::new(&posed, &canonical)?;
    let rigid: Vec<usize> = (0..posed.triangles.len())
        .filter(|&t| posed.triangles[t].iter().all(|&v| rig.skinning()[v as usize][1] == 1.0))
        .collect();
    if rigid.is_empty() {
        return Err(Error::Validation("no rigidly skinned triangles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0f64;
    for _ in 0..500 {
        let t = rigid[rng.random_range(0..rigid.len())];
        let (u, v) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
        let at = |m: &crate::headmodel::Mesh| {
            let [p, q, r] = m.corners(t);
            p * (1.0 - u - v) + q * u + r * v
        };
        max = max.max((sf.map(&at(&posed)) - at(&canonical)).norm());
    }
    Ok((max < 1e-6, format!("{} rigid triangles, max error {max:.2e}", rigid.len())))
}

/// Near-surface probes: points within 0.02 of the posed surface.
pub fn near_surface_probes(mesh: &crate::headmodel::Mesh, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(0..mesh.triangles.len());
            let [p, q, r] = mesh.corners(t);
            let (u, v) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
            p * (1.0 - u - v) + q * u + r * v + triangle_normal(p, q, r) * rng.random_range(-0.02..0.02)
        })
        .collect()
}

fn check_grid_convergence(seed: u64) -> Result<(bool, String)> {
    let rig = default_rig()?;
    let (a, b) = zero_codes(&rig);
    let pose = PoseCode {
        neck: [0.2, 0.4, 0.1],
        ..PoseCode::zero()
    };
    let posed = rig.evaluate_mesh(&a, &b, &pose)?;
    let sf = SurfaceField::new(&posed, &rig.evaluate_mesh(&a, &b, &pose.without_neck())?)?;
    let probes = near_surface_probes(&posed, 500, &mut ChaCha8Rng::seed_from_u64(seed));
    let errors = [8, 16, 32]
        .iter()
        .map(|&res| {
            let g = build_sf_grid(&rig, &a, &b, &pose, res)?;
            Ok(probes.iter().map(|x| (apply_grid(&g, x) - sf.map(x)).norm()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((
        errors[0] > errors[1] && errors[1] > errors[2],
        format!("max error 8^3 {:.2e}, 16^3 {:.2e}, 32^3 {:.2e}", errors[0], errors[1], errors[2]),
    ))
}

fn check_null_field(seed: u64) -> Result<(bool, String)> {
    let rig = default_rig()?;
    let (a, b) = zero_codes(&rig);
    let field = DeformationField::new(&rig, &a, &b, &canonical_pose(0.2)?, FieldConfig::default())?;
    let radius = rig.template().iter().map(|v| v.norm()).fold(0.0, f64::max);
    let bounds = Aabb::from_points(rig.template()).scaled(1.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = (0..500)
        .map(|_| {
            let d = field.eval(&random_in(&mut rng, &bounds));
            d.dx_head.norm().max(d.dx_part.norm())
        })
        .fold(0.0, f64::max);
    Ok((max < 1e-6 * radius, format!("max |dx| = {max:.2e} (bound {:.2e})", 1e-6 * radius)))
}

fn check_telescoping(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ray = render::Ray {
        origin: Vec3::new(0.0, 0.0, 4.0),
        dir: Vec3::new(0.0, 0.0, -1.0),
    };
    let mut worst = 0.0f64;
    for n in [2usize, 48, 256] {
        for sigma in [0.1, 2.0, 25.0] {
            let s = render::stratified_samples(&ray, 3.0, 5.0, n, &mut rng)?;
            let rad = vec![
                Radiance {
                    sigma,
                    color: [1.0; COLOR_DIM],
                };
                n
            ];
            let px = render::integrate(&s, &rad)?;
            let length: f64 = s.delta.iter().sum();
            let want = 1.0 - (-sigma * length).exp();
            worst = worst.max((px.opacity - want).abs());
        }
    }
    Ok((worst < 1e-13, format!("max |opacity - (1 - e^(-sigma L))| = {worst:.2e}")))
}

/// Head-like ellipsoid spec shared with the acceptance harness.
pub fn probe_ellipsoid() -> EllipsoidSpec {
    let blob = |center, radii, sharpness, color, opaque| Blob {
        center,
        radii,
        sharpness,
        color,
        opaque,
    };
    EllipsoidSpec {
        blobs: vec![
            blob([0.0; 3], [0.3, 0.36, 0.32], 10.0, [0.85, 0.65, 0.55], true),
            blob([0.0, 0.25, -0.08], [0.34, 0.22, 0.34], 4.0, [0.2, 0.12, 0.08], false),
            blob([0.105, 0.06, 0.29], [0.05, 0.04, 0.05], 4.0, [0.3, 0.2, 0.2], false),
            blob([-0.105, 0.06, 0.29], [0.05, 0.04, 0.05], 4.0, [0.3, 0.2, 0.2], false),
            blob([0.0, -0.12, 0.3], [0.08, 0.025, 0.05], 4.0, [0.75, 0.2, 0.25], false),
        ],
    }
}

/// Dense midpoint march of an analytic field through the sphere interval of each pixel.
pub fn march_oracle(spec: &EllipsoidSpec, camera: &Camera, bounds: &Sphere, steps: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(camera.width * camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let ray = camera.ray(px, py);
            let mut acc = [0.0; 3];
            if let Some((near, far)) = bounds.interval(&ray) {
                let d = (far - near) / steps as f64;
                let mut trans = 1.0;
                for i in 0..steps {
                    let (sigma, rgb) = spec.eval(&ray.at(near + (i as f64 + 0.5) * d));
                    let a = 1.0 - (-sigma * d).exp();
                    for k in 0..3 {
                        acc[k] += trans * a * rgb[k];
                    }
                    trans *= 1.0 - a;
                }
            }
            out.push(acc);
        }
    }
    out
}

fn check_baked_psnr(seed: u64) -> Result<(bool, String)> {
    let spec = probe_ellipsoid();
    let t = Instant::now();
    let (tp, dec) = bake_analytic(&AnalyticField::Ellipsoid(spec.clone()), 128, COLOR_DIM)?;
    let cam = render::camera_from_angles(0.1, 0.3, 0.0, 4.0, Vec3::zeros(), 12.0, 64, 64)?;
    let bounds = Sphere {
        center: [0.0; 3],
        radius: 0.475,
    };
    let img = render::render_triplane(&tp, &dec, &crate::deform::IdentityField, &cam, &RenderSettings::new(bounds, seed))?;
    let secs = t.elapsed().as_secs_f64();
    let want: Vec<f64> = march_oracle(&spec, &cam, &bounds, 4096).into_iter().flatten().collect();
    let got: Vec<f64> = img.rgb().into_iter().flatten().collect();
    let p = render::psnr(&got, &want);
    Ok((p > 30.0 && secs < 30.0, format!("PSNR {p:.2} dB, bake+render {secs:.2}s")))
}

fn random_render(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RenderOut {
    let mut r = RenderOut::empty(w, h);
    r.feature.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    r.opacity.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    r.depth.iter_mut().for_each(|v| *v = rng.random_range(3.0..5.0));
    r
}

fn check_blend_fuse(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (16, 16);
    let head = random_render(w, h, &mut rng);
    let part = random_render(w, h, &mut rng);
    let bits = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let mut ok = true;
    for (m, expect) in [(0.0, &head), (1.0, &part)] {
        let f = render::blend(&head, &part, &MaskMap::filled(w, h, m))?;
        ok &= bits(&f.feature.data, &expect.feature.data) && bits(&f.opacity, &expect.opacity) && bits(&f.depth, &expect.depth);
    }
    let mut bg = FeatureMap::zeros(w, h, COLOR_DIM);
    bg.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut fg = head.clone();
    for (i, o) in fg.opacity.iter_mut().enumerate() {
        *o = (i % 2) as f64;
    }
    let lr = render::fuse(&fg, &bg)?;
    for i in 0..w * h {
        let src = if i % 2 == 1 { fg.feature.pixel(i) } else { bg.pixel(i) };
        ok &= bits(lr.pixel(i), src);
    }
    Ok((ok, "mask and opacity in {0, 1} select inputs bitwise".into()))
}

fn random_motion(rng: &mut ChaCha8Rng) -> MotionVector {
    MotionVector((0..MOTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn small_dims() -> PhiDims {
    PhiDims {
        tokens: 16,
        dim: 16,
        ..PhiDims::tiny()
    }
}

fn check_gate_off(seed: u64) -> Result<(bool, String)> {
    let mut p = motionnet::init_phi(small_dims(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for name in p.cross_output_names() {
        if let Some(t) = p.tensor_mut(&name) {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let f = FeatureGrid::random(16, 16, seed);
    let reference = motionnet::phi_forward(&p, &f, &random_motion(&mut rng).0, &random_motion(&mut rng).0, GateSwitch::OFF)?;
    let mut same = 0;
    for _ in 0..100 {
        let out = motionnet::phi_forward(&p, &f, &random_motion(&mut rng).0, &random_motion(&mut rng).0, GateSwitch::OFF)?;
        same += usize::from(out.data.iter().zip(&reference.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    Ok((same == 100, format!("{same}/100 pairs bitwise equal")))
}

fn check_zero_init_gate(seed: u64) -> Result<(bool, String)> {
    let p = motionnet::init_phi(small_dims(), seed)?;
    let f = FeatureGrid::random(16, 16, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (random_motion(&mut rng), random_motion(&mut rng));
    let on = motionnet::phi_forward(&p, &f, &a.0, &b.0, GateSwitch::ON)?;
    let off = motionnet::phi_forward(&p, &f, &a.0, &b.0, GateSwitch::OFF)?;
    let max = on.data.iter().zip(&off.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok((max == 0.0, format!("max |on - off| = {max:.2e}")))
}

fn check_attention_rows(seed: u64) -> Result<(bool, String)> {
    let p = motionnet::init_phi(PhiDims::default(), seed)?;
    let q = FeatureGrid::random(p.dims.tokens, p.dims.dim, seed);
    let kv = FeatureGrid::random(p.dims.motion_tokens, p.dims.dim, seed + 1);
    let mut worst = 0.0f64;
    for block in p.de.blocks.iter().chain(&p.re.blocks) {
        for head in motionnet::attention_weights(&q, &kv, &block.cross, p.dims.heads)? {
            for row in head {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok((worst < 1e-6, format!("max |row sum - 1| = {worst:.2e}")))
}

fn check_jacobian(seed: u64) -> Result<(bool, String)> {
    let mut p = motionnet::init_phi(PhiDims::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in p.cross_output_names() {
        if let Some(t) = p.tensor_mut(&name) {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let dims = p.dims;
    let f = FeatureGrid::random(dims.tokens, dims.dim, seed + 2);
    let (vs, vd) = (random_motion(&mut rng), random_motion(&mut rng));
    let probe: Vec<f64> = (0..dims.tokens * dims.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let names: Vec<(String, usize)> = p.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (name, len) in &names {
        let dir: Vec<f64> = (0..*len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = motionnet::finite_diff_jacobian_check(&p, &f, &vs, &vd, GateSwitch::ON, &probe, name, &dir, 1e-5)?;
        if c.rel_error > worst {
            worst = c.rel_error;
            worst_name.clone_from(name);
        }
    }
    Ok((
        worst < 1e-4,
        format!("{} tensors, max relative error {worst:.2e} ({worst_name})", names.len()),
    ))
}

fn check_losses(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut ok = losses::l1(&a, &b)? == losses::l1(&b, &a)? && losses::l1(&a, &b)? > 0.0 && losses::l1(&a, &a)? == 0.0;
    let w = LossWeights::default();
    let t1 = LossTerms::uniform(rng.random_range(0.0..1.0));
    let t2 = LossTerms { f: t1.f + 1.0, ..t1 };
    let step = losses::total_loss(&t2, &w)?.total - losses::total_loss(&t1, &w)?.total;
    ok &= (step - w.f).abs() < 1e-12;
    let mut mask = MaskMap::filled(4, 4, 0.0);
    mask.mask[5] = 1.0;
    let proj = [(1.5, 1.5), (3.5, 3.5)];
    ok &= losses::loss_part(&[1.0, 2.0], &proj, &mask)? <= losses::loss_part(&[1.5, 2.0], &proj, &mask)?;
    Ok((ok, "l1 symmetric and zero on equal inputs; total linear; part term monotone".into()))
}

fn check_constants(_seed: u64) -> Result<(bool, String)> {
    let r = SamplingRanges::default();
    let c = DatasetConfig::default();
    let w = LossWeights::default();
    let mut failed = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    expect("fov", r.fov_deg == 12.0 && render::DEFAULT_FOV_DEG == 12.0);
    expect("camera pitch", r.camera_pitch == Range::new(-0.25, 0.65));
    expect("camera yaw", r.camera_yaw == Range::new(-0.78, 0.78));
    expect("camera roll", r.camera_roll == Range::new(-0.25, 0.25));
    expect("camera radius", r.camera_radius == Range::new(3.65, 4.45));
    expect(
        "look-at",
        r.look_at_x == Range::new(-0.01, 0.01) && r.look_at_y == Range::new(-0.01, 0.01) && r.look_at_z == Range::new(0.02, 0.04),
    );
    expect("neck pitch", r.neck_pitch == Range::new(-0.2, 0.2));
    expect("neck yaw", r.neck_yaw == Range::new(-0.5, 0.5));
    expect("neck roll", r.neck_roll == Range::new(-0.1, 0.1));
    expect("samples", render::COARSE_SAMPLES == 48 && render::FINE_SAMPLES == 48 && c.coarse_samples == 48 && c.fine_samples == 48);
    expect("point count", datagen::DEFAULT_POINT_COUNT == 4000 && c.point_count == 4000);
    expect("motion dim", MOTION_DIM == 548);
    expect("loss weights", w.as_array() == [1.0, 1.0, 0.1, 1.0, 0.3, 1.0, 0.01]);
    let total = losses::total_loss(&LossTerms::uniform(1.0), &w)?.total;
    expect("total loss example", (total - 4.41).abs() < 1e-12);
    let factors: Vec<u32> = [0.0, 14.99, 15.0, 29.99, 30.0, 44.99, 45.0, 59.99, 60.0, 89.0]
        .iter()
        .map(|&y| datagen::rebalance_factor(y))
        .collect();
    expect("rebalance", factors == [1, 1, 2, 2, 4, 4, 8, 8, 16, 16]);
    let ok = failed.is_empty();
    Ok((ok, if ok { "all constants match".into() } else { format!("mismatch: {}", failed.join(", ")) }))
}

/// Chi-square p-value of `values` against the uniform distribution on `range` over 20 bins.
pub fn uniformity_p_value(values: &[f64], range: Range) -> f64 {
    const BINS: usize = 20;
    let mut counts = [0usize; BINS];
    for v in values {
        let u = (v - range.min) / (range.max - range.min);
        counts[((u * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let expected = values.len() as f64 / BINS as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((BINS - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

fn check_uniformity(seed: u64) -> Result<(bool, String)> {
    let r = SamplingRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 10_000;
    let cams: Vec<_> = (0..n).map(|_| datagen::sample_camera_in(&r, &mut rng)).collect();
    let necks: Vec<_> = (0..n).map(|_| datagen::sample_neck_pose_in(&r, &mut rng)).collect();
    let axes: Vec<(&str, Range, Vec<f64>)> = vec![
        ("pitch", r.camera_pitch, cams.iter().map(|c| c.pitch).collect()),
        ("yaw", r.camera_yaw, cams.iter().map(|c| c.yaw).collect()),
        ("roll", r.camera_roll, cams.iter().map(|c| c.roll).collect()),
        ("radius", r.camera_radius, cams.iter().map(|c| c.radius).collect()),
        ("look_x", r.look_at_x, cams.iter().map(|c| c.look_at[0]).collect()),
        ("look_y", r.look_at_y, cams.iter().map(|c| c.look_at[1]).collect()),
        ("look_z", r.look_at_z, cams.iter().map(|c| c.look_at[2]).collect()),
        ("neck_pitch", r.neck_pitch, necks.iter().map(|v| v[0]).collect()),
        ("neck_yaw", r.neck_yaw, necks.iter().map(|v| v[1]).collect()),
        ("neck_roll", r.neck_roll, necks.iter().map(|v| v[2]).collect()),
    ];
    let mut min_p = 1.0f64;
    let mut min_axis = "";
    let mut inside = true;
    for (name, range, vals) in &axes {
        inside &= vals.iter().all(|v| range.contains(*v));
        let p = uniformity_p_value(vals, *range);
        if p < min_p {
            min_p = p;
            min_axis = name;
        }
    }
    Ok((
        inside && min_p > 0.01,
        format!("{n} draws per axis inside boxes: {inside}; min chi-square p = {min_p:.3} ({min_axis})"),
    ))
}

/// Settings for the small datasets generated inside checks.
pub fn tiny_dataset_config() -> DatasetConfig {
    DatasetConfig {
        resolution: 16,
        bake_resolution: 32,
        point_count: 200,
        grid_resolution: 12,
        ..DatasetConfig::default()
    }
}

fn read_tree(root: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).unwrap_or(&p).display().to_string(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Byte-identical trees for a repeated seed, a passing validation report, per-identity
/// background constancy and recorded features equal to a fresh tri-plane lookup.
fn check_dataset(seed: u64) -> Result<(bool, String)> {
    let rig = procedural_rig(&RigSpec::small(), seed)?;
    let cfg = tiny_dataset_config();
    let tmp = || tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e));
    let dirs = [tmp()?, tmp()?];
    let mut trees = Vec::new();
    for d in &dirs {
        datagen::make_dynamic_set(&rig, &cfg, 2, 2, 2, seed, d.path())?;
        trees.push(read_tree(d.path())?);
    }
    let identical = trees[0] == trees[1];
    let root = dirs[0].path();
    let report = datagen::validate_dataset(root);
    let manifest = datagen::DatasetManifest::load(root.join("manifest.json"))?;
    let mut worst = 0.0f64;
    let geo = datagen::HeadGeometry::from_rig(&rig, cfg.canonical_jaw)?;
    for id in &manifest.identities {
        let baked = datagen::bake_identity(&datagen::head_appearance(&geo, id.seed, cfg.head_sharpness), cfg.bake_resolution, cfg.channels)?;
        for rec in manifest.records.iter().filter(|r| r.identity == id.id) {
            let dir = datagen::record_dir(root, rec);
            let text = std::fs::read_to_string(dir.join("record.json")).map_err(|e| Error::io(dir.join("record.json"), e))?;
            let info: datagen::RecordInfo =
                serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", rec.record)))?;
            let field = DeformationField::new(&rig, &info.shape, &info.expression, &info.pose, cfg.field_config())?;
            let pts = PointFeatures::load(dir.join("points.pts"))?;
            for (x, f) in pts.points.iter().zip(pts.features.chunks_exact(pts.channels)) {
                use crate::deform::Deformation;
                let want = baked.head.sample(&(x + field.deform(x).dx_head));
                worst = worst.max(want.iter().zip(f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
        }
    }
    Ok((
        identical && report.passed() && worst < 1e-6,
        format!(
            "rerun identical: {identical}; validation: {}; max recorded feature error {worst:.2e}",
            if report.passed() { "pass" } else { "fail" }
        ),
    ))
}
