//! C ABI for the headsynth core.
//!
//! Every function returns an [`HsStatus`]; on failure a message is kept per thread and can be
//! read with [`hs_last_error_message`]. Objects are opaque handles created by `*_new`/`*_load`
//! style calls and released with the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use headsynth::datagen::{self, Counts, DatasetConfig, DatasetKind};
use headsynth::deform::{DeformationField, FieldConfig};
use headsynth::geom::Vec3;
use headsynth::headmodel::{procedural_rig, ExpressionCode, HeadRig, PoseCode, RigSpec, ShapeCode, POSE_DIM};
use headsynth::losses::{total_loss, LossTerms, LossWeights};
use headsynth::render::{self, Camera, CameraParams, RenderSettings, Sphere};
use headsynth::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Parse = 4,
    Validation = 5,
    Io = 6,
    Panic = 7,
}

/// Procedural or loaded head rig.
pub struct HsRig(HeadRig);

/// Baked appearance of one identity (head and part tri-planes plus decoder).
pub struct HsIdentity(datagen::BakedIdentity);

/// Deformation field for one shape, expression and pose.
pub struct HsField(DeformationField);

/// Orbit camera; angles in radians, field of view in degrees.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HsCamera {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub radius: f64,
    pub look_at: [f64; 3],
    pub fov_deg: f64,
}

/// Unweighted loss terms; `re_perceptual`, `id` and `adv` are the hook-backed terms.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HsLossTerms {
    pub re_l1: f64,
    pub re_perceptual: f64,
    pub f: f64,
    pub tri: f64,
    pub depth: f64,
    pub opa: f64,
    pub id: f64,
    pub adv: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn fail(status: HsStatus, msg: impl Into<String>) -> HsStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> HsStatus {
    let status = match &e {
        Error::Contract(_) => HsStatus::Contract,
        Error::Parse { .. } => HsStatus::Parse,
        Error::Validation(_) => HsStatus::Validation,
        Error::Io { .. } => HsStatus::Io,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), HsStatus>) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HsStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(HsStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, HsStatus>;
}

impl<T> OrStatus<T> for headsynth::Result<T> {
    fn or_status(self) -> Result<T, HsStatus> {
        self.map_err(from_error)
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, HsStatus> {
    // SAFETY: callers pass either null or a pointer obtained from this library / a valid object.
    unsafe { p.as_ref() }.ok_or_else(|| fail(HsStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, HsStatus> {
    // SAFETY: as above; the caller owns the output slot.
    unsafe { p.as_mut() }.ok_or_else(|| fail(HsStatus::NullPointer, format!("{name} is null")))
}

fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], HsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HsStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], HsStatus> {
    if p.is_null() {
        return Err(fail(HsStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, HsStatus> {
    let c = non_null(p, name)?;
    // SAFETY: non-null, caller guarantees NUL termination.
    let s = unsafe { CStr::from_ptr(c) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(HsStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn into_handle<T>(out: *mut *mut T, value: T) -> Result<(), HsStatus> {
    *out_ptr(out, "out")? = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread (empty after a successful call). The
/// pointer stays valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds the procedural rig (`small` selects the reduced tessellation).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_rig_procedural(small: bool, seed: u64, out: *mut *mut HsRig) -> HsStatus {
    guard(|| {
        let spec = if small { RigSpec::small() } else { RigSpec::default() };
        into_handle(out, HsRig(procedural_rig(&spec, seed).or_status()?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hs_rig_load(path: *const c_char, out: *mut *mut HsRig) -> HsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        into_handle(out, HsRig(HeadRig::load(p).or_status()?))
    })
}

/// # Safety
/// `rig` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hs_rig_save(rig: *const HsRig, path: *const c_char) -> HsStatus {
    guard(|| {
        let rig = non_null(rig, "rig")?;
        rig.0.save(path_arg(path, "path")?).or_status()
    })
}

/// Writes vertex count, triangle count, shape dimension and expression dimension.
///
/// # Safety
/// `rig` must come from this library; `out` must hold 4 writable entries.
#[no_mangle]
pub unsafe extern "C" fn hs_rig_info(rig: *const HsRig, out: *mut usize) -> HsStatus {
    guard(|| {
        let r = &non_null(rig, "rig")?.0;
        slice_mut(out, 4, "out")?.copy_from_slice(&[r.vertex_count(), r.triangles().len(), r.shape_dim(), r.expr_dim()]);
        Ok(())
    })
}

/// # Safety
/// `rig` must be null or come from [`hs_rig_procedural`] / [`hs_rig_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hs_rig_free(rig: *mut HsRig) {
    if !rig.is_null() {
        drop(Box::from_raw(rig));
    }
}

/// Bakes the seeded appearance of one identity at tri-plane resolution `resolution`.
///
/// # Safety
/// `rig` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn hs_identity_bake(rig: *const HsRig, seed: u64, resolution: usize, out: *mut *mut HsIdentity) -> HsStatus {
    guard(|| {
        let rig = &non_null(rig, "rig")?.0;
        let cfg = DatasetConfig::default();
        let geo = datagen::HeadGeometry::from_rig(rig, cfg.canonical_jaw).or_status()?;
        let app = datagen::head_appearance(&geo, seed, cfg.head_sharpness);
        into_handle(out, HsIdentity(datagen::bake_identity(&app, resolution, cfg.channels).or_status()?))
    })
}

/// # Safety
/// `identity` must be null or come from [`hs_identity_bake`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hs_identity_free(identity: *mut HsIdentity) {
    if !identity.is_null() {
        drop(Box::from_raw(identity));
    }
}

/// Builds the deformation field. `alpha`/`beta` must have the rig's shape/expression sizes;
/// `pose` holds 9 values (eye, jaw, neck axis-angles).
///
/// # Safety
/// Pointers must reference the stated number of readable values.
#[no_mangle]
pub unsafe extern "C" fn hs_field_new(
    rig: *const HsRig,
    alpha: *const f64,
    alpha_len: usize,
    beta: *const f64,
    beta_len: usize,
    pose: *const f64,
    grid_resolution: usize,
    out: *mut *mut HsField,
) -> HsStatus {
    guard(|| {
        let rig = &non_null(rig, "rig")?.0;
        let a = ShapeCode(slice(alpha, alpha_len, "alpha")?.to_vec());
        let b = ExpressionCode(slice(beta, beta_len, "beta")?.to_vec());
        let p: [f64; POSE_DIM] = slice(pose, POSE_DIM, "pose")?.try_into().expect("length checked");
        let cfg = FieldConfig {
            grid_resolution,
            ..FieldConfig::default()
        };
        into_handle(out, HsField(DeformationField::new(rig, &a, &b, &PoseCode::from_array(p), cfg).or_status()?))
    })
}

/// Evaluates the head and part offsets at `x` (3 values each).
///
/// # Safety
/// `x` must hold 3 readable values; `dx_head` and `dx_part` 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn hs_field_eval(field: *const HsField, x: *const f64, dx_head: *mut f64, dx_part: *mut f64) -> HsStatus {
    guard(|| {
        let f = &non_null(field, "field")?.0;
        let x = slice(x, 3, "x")?;
        let d = f.eval(&Vec3::new(x[0], x[1], x[2]));
        slice_mut(dx_head, 3, "dx_head")?.copy_from_slice(d.dx_head.as_slice());
        slice_mut(dx_part, 3, "dx_part")?.copy_from_slice(d.dx_part.as_slice());
        Ok(())
    })
}

/// # Safety
/// `field` must be null or come from [`hs_field_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hs_field_free(field: *mut HsField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Renders the blended foreground of `identity` through `field`. Writes `width·height·3`
/// RGB values and `width·height` opacities, rows top to bottom.
///
/// # Safety
/// Handles must come from this library; `rgb` and `opacity` must be writable for the sizes
/// above. `alpha`, `beta` and `pose` as in [`hs_field_new`] (the mask uses the posed mesh).
#[no_mangle]
pub unsafe extern "C" fn hs_render(
    rig: *const HsRig,
    identity: *const HsIdentity,
    field: *const HsField,
    alpha: *const f64,
    alpha_len: usize,
    beta: *const f64,
    beta_len: usize,
    pose: *const f64,
    camera: *const HsCamera,
    width: usize,
    height: usize,
    seed: u64,
    rgb: *mut f64,
    opacity: *mut f64,
) -> HsStatus {
    guard(|| {
        let rig = &non_null(rig, "rig")?.0;
        let id = &non_null(identity, "identity")?.0;
        let field = &non_null(field, "field")?.0;
        let c = non_null(camera, "camera")?;
        let a = ShapeCode(slice(alpha, alpha_len, "alpha")?.to_vec());
        let b = ExpressionCode(slice(beta, beta_len, "beta")?.to_vec());
        let p: [f64; POSE_DIM] = slice(pose, POSE_DIM, "pose")?.try_into().expect("length checked");
        if width == 0 || height == 0 {
            return Err(fail(HsStatus::InvalidArgument, "width and height must be positive"));
        }
        let params = CameraParams {
            pitch: c.pitch,
            yaw: c.yaw,
            roll: c.roll,
            radius: c.radius,
            look_at: c.look_at,
            fov_deg: c.fov_deg,
        };
        let cam = Camera::from_params(&params, width, height).or_status()?;
        let settings = RenderSettings::new(Sphere::for_rig(rig), seed);
        let gh = render::render_genhead(&id.head, &id.part, &id.decoder, field, &cam, &settings).or_status()?;
        let mesh = rig.evaluate_mesh(&a, &b, &PoseCode::from_array(p)).or_status()?;
        let mask = render::rasterize(&mesh, &rig.mask_faces(), rig.template(), &cam).or_status()?;
        let fg = render::blend(&gh.head, &gh.part, &mask).or_status()?;
        let n = width * height;
        for (dst, src) in slice_mut(rgb, 3 * n, "rgb")?.chunks_exact_mut(3).zip(fg.rgb()) {
            dst.copy_from_slice(&src);
        }
        slice_mut(opacity, n, "opacity")?.copy_from_slice(&fg.opacity);
        Ok(())
    })
}

/// Generates a dataset (`is_static != 0` for a static set, which forces one motion).
///
/// # Safety
/// `rig` must come from this library; `out_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_generate(
    rig: *const HsRig,
    is_static: bool,
    identities: usize,
    motions: usize,
    views: usize,
    resolution: usize,
    seed: u64,
    out_dir: *const c_char,
) -> HsStatus {
    guard(|| {
        let rig = &non_null(rig, "rig")?.0;
        let dir = path_arg(out_dir, "out_dir")?;
        let cfg = DatasetConfig {
            resolution,
            ..DatasetConfig::default()
        };
        let (kind, motions) = if is_static { (DatasetKind::Static, 1) } else { (DatasetKind::Dynamic, motions) };
        let counts = Counts {
            identities,
            motions,
            views,
        };
        let plan = datagen::plan_dataset(kind, rig, &cfg, counts, seed).or_status()?;
        datagen::render_plan(rig, &cfg, &plan, &dir).map(|_| ()).or_status()
    })
}

/// Validates a dataset directory. `passed` receives 1 when every check passes; the failing
/// checks are reported through [`hs_last_error_message`] with status `Validation`.
///
/// # Safety
/// `dir` must be NUL-terminated; `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_validate(dir: *const c_char, passed: *mut bool) -> HsStatus {
    guard(|| {
        let d = path_arg(dir, "dir")?;
        let out = out_ptr(passed, "passed")?;
        let report = datagen::validate_dataset(&d);
        *out = report.passed();
        if report.passed() {
            Ok(())
        } else {
            let failures: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
            Err(fail(HsStatus::Validation, failures.join("; ")))
        }
    })
}

/// Weighted total loss. `weights` holds the 7 balancing weights or is null for the defaults.
///
/// # Safety
/// `terms` must be readable; `weights` null or 7 readable values; `total` writable.
#[no_mangle]
pub unsafe extern "C" fn hs_total_loss(terms: *const HsLossTerms, weights: *const f64, total: *mut f64) -> HsStatus {
    guard(|| {
        let t = non_null(terms, "terms")?;
        let w = if weights.is_null() {
            LossWeights::default()
        } else {
            let w = slice(weights, 7, "weights")?;
            LossWeights {
                re: w[0],
                f: w[1],
                tri: w[2],
                depth: w[3],
                opa: w[4],
                id: w[5],
                adv: w[6],
            }
        };
        let terms = LossTerms {
            re_l1: t.re_l1,
            re_perceptual: t.re_perceptual,
            f: t.f,
            tri: t.tri,
            depth: t.depth,
            opa: t.opa,
            id: t.id,
            adv: t.adv,
        };
        *out_ptr(total, "total")? = total_loss(&terms, &w).or_status()?.total;
        Ok(())
    })
}
