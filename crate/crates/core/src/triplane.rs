//! Tri-plane feature fields and the radiance decoder.
//!
//! A tri-plane holds three axis-aligned feature planes over the cube `[-1, 1]^3`. A point
//! projects onto each plane, each plane is sampled bilinearly, and the three features are
//! averaged. Texels sit on a corner-aligned lattice: texel `i` of `R` lies at
//! `-1 + 2 i / (R - 1)`. Plane layout (first coordinate = column, second = row):
//!
//! | plane | column | row |
//! |-------|--------|-----|
//! | 0: XY | x      | y   |
//! | 1: XZ | x      | z   |
//! | 2: YZ | y      | z   |

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub const DEFAULT_RESOLUTION: usize = 256;
pub const DEFAULT_CHANNELS: usize = 32;
/// Width of the decoded color feature; its first three entries are RGB.
pub const COLOR_DIM: usize = 32;
pub const DECODER_HIDDEN: usize = 64;
const MAGIC: &[u8; 4] = b"TPL1";

/// Plane index and the two world axes it spans (column axis, row axis).
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    resolution: usize,
    channels: usize,
    /// plane-major, row-major, channel-last
    data: Vec<f32>,
}

impl TriPlane {
    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        if resolution < 2 || channels == 0 {
            return Err(Error::contract("tri-plane needs resolution >= 2 and at least one channel"));
        }
        Ok(Self {
            resolution,
            channels,
            data: vec![0.0; 3 * resolution * resolution * channels],
        })
    }

    pub fn from_data(resolution: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let mut t = Self::zeros(resolution, channels)?;
        if data.len() != t.data.len() {
            return Err(Error::contract(format!("expected {} values, got {}", t.data.len(), data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("tri-plane values must be finite".into()));
        }
        t.data = data;
        Ok(t)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn offset(&self, plane: usize, row: usize, col: usize) -> usize {
        ((plane * self.resolution + row) * self.resolution + col) * self.channels
    }

    pub fn texel(&self, plane: usize, row: usize, col: usize) -> &[f32] {
        let o = self.offset(plane, row, col);
        &self.data[o..o + self.channels]
    }

    pub fn texel_mut(&mut self, plane: usize, row: usize, col: usize) -> &mut [f32] {
        let o = self.offset(plane, row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// World coordinate of texel index `i` along any axis.
    pub fn texel_coord(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.resolution - 1) as f64
    }

    /// Feature at `x` (mean of the three bilinear plane samples), written into `out`.
    pub fn sample_into(&self, x: &Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.iter_mut().for_each(|v| *v = 0.0);
        let scale = (self.resolution - 1) as f64;
        let cont: [f64; 3] = std::array::from_fn(|a| ((x[a].clamp(-1.0, 1.0) + 1.0) * 0.5 * scale).clamp(0.0, scale));
        let last = self.resolution - 2;
        for (plane, &(ca, ra)) in PLANE_AXES.iter().enumerate() {
            let (u, v) = (cont[ca], cont[ra]);
            let c0 = (u.floor() as usize).min(last);
            let r0 = (v.floor() as usize).min(last);
            let fu = u - c0 as f64;
            let fv = v - r0 as f64;
            let w = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
            let taps = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
            for (wt, (r, c)) in w.iter().zip(taps) {
                if *wt == 0.0 {
                    continue;
                }
                let texel = self.texel(plane, r, c);
                for (o, t) in out.iter_mut().zip(texel) {
                    *o += wt * *t as f64;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= 3.0;
        }
    }

    pub fn sample(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, &mut out);
        out
    }

    /// "TPL1" container: magic, R and C as u32 LE, then 3·R·R·C f32 LE.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read, origin: &str) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|_| Error::parse(origin, "byte 0", "truncated TPL1 header"))?;
        if &header[..4] != MAGIC {
            return Err(Error::parse(origin, "byte 0", "bad magic, expected TPL1"));
        }
        let res = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let ch = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if res < 2 || ch == 0 {
            return Err(Error::parse(origin, "byte 4", format!("invalid header R={res} C={ch}")));
        }
        let n = 3 * res * res * ch;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(origin, e))?;
        if payload.len() != 4 * n {
            return Err(Error::parse(
                origin,
                "byte 12",
                format!("payload has {} bytes, header requires {}", payload.len(), 4 * n),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_data(res, ch, data)
    }
}

/// Payload size in bytes of a "TPL1" file with the given header.
pub fn payload_bytes(resolution: usize, channels: usize) -> usize {
    3 * resolution * resolution * channels * 4
}

pub fn save_triplane(t: &TriPlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    t.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_triplane(path: impl AsRef<Path>) -> Result<TriPlane> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    TriPlane::read_from(std::io::BufReader::new(f), &path.display().to_string())
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Density and color feature of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Radiance {
    pub sigma: f64,
    /// Color features; entries 0..3 are RGB after a sigmoid, the rest are linear.
    pub color: [f64; COLOR_DIM],
}

impl Radiance {
    pub fn rgb(&self) -> [f64; 3] {
        [self.color[0], self.color[1], self.color[2]]
    }
}

/// Fully connected decoder `C -> 64 -> 64 -> 1 + 32` with ReLU hidden activations,
/// softplus on density, sigmoid on the three RGB features and no activation on the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub input_dim: usize,
    /// Row-major `[out][in]` weight matrices and biases of the three layers.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

pub const DECODER_OUT: usize = 1 + COLOR_DIM;

impl DecoderParams {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            input_dim,
            w1: vec![0.0; DECODER_HIDDEN * input_dim],
            b1: vec![0.0; DECODER_HIDDEN],
            w2: vec![0.0; DECODER_HIDDEN * DECODER_HIDDEN],
            b2: vec![0.0; DECODER_HIDDEN],
            w3: vec![0.0; DECODER_OUT * DECODER_HIDDEN],
            b3: vec![0.0; DECODER_OUT],
        }
    }

    /// Uniform ±1/√fan_in weights and biases.
    pub fn random(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim);
        let mut fill = |v: &mut Vec<f64>, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = rng.random_range(-b..=b));
        };
        fill(&mut p.w1, input_dim);
        fill(&mut p.b1, input_dim);
        fill(&mut p.w2, DECODER_HIDDEN);
        fill(&mut p.b2, DECODER_HIDDEN);
        fill(&mut p.w3, DECODER_HIDDEN);
        fill(&mut p.b3, DECODER_HIDDEN);
        p
    }

    /// Exact pass-through for `C = 32`: the hidden layers carry `[relu(f), relu(-f)]`, and
    /// the output is `raw[0] = f[0]` (density), `raw[1 + k] = f[1 + k]` for `k < 31`, and
    /// `raw[32] = 0`.
    pub fn pass_through(input_dim: usize) -> Result<Self> {
        if 2 * input_dim > DECODER_HIDDEN || input_dim > DECODER_OUT {
            return Err(Error::contract(format!("pass-through decoder needs input_dim <= {}", DECODER_HIDDEN / 2)));
        }
        let mut p = Self::zeros(input_dim);
        let c = input_dim;
        for i in 0..c {
            p.w1[i * c + i] = 1.0;
            p.w1[(c + i) * c + i] = -1.0;
            p.w2[i * DECODER_HIDDEN + i] = 1.0;
            p.w2[i * DECODER_HIDDEN + c + i] = -1.0;
            p.w2[(c + i) * DECODER_HIDDEN + i] = -1.0;
            p.w2[(c + i) * DECODER_HIDDEN + c + i] = 1.0;
            p.w3[i * DECODER_HIDDEN + i] = 1.0;
            p.w3[i * DECODER_HIDDEN + c + i] = -1.0;
        }
        Ok(p)
    }

    /// Raw (pre-activation) outputs.
    pub fn forward_raw(&self, feature: &[f64]) -> Result<[f64; DECODER_OUT]> {
        if feature.len() != self.input_dim {
            return Err(Error::contract(format!(
                "decoder expects {} features, got {}",
                self.input_dim,
                feature.len()
            )));
        }
        Ok(self.raw_unchecked(feature))
    }

    /// Forward pass for callers that already checked `feature.len() == input_dim`.
    pub(crate) fn decode_unchecked(&self, feature: &[f64]) -> Radiance {
        debug_assert_eq!(feature.len(), self.input_dim);
        activate(&self.raw_unchecked(feature))
    }

    fn raw_unchecked(&self, feature: &[f64]) -> [f64; DECODER_OUT] {
        let mut h1 = [0.0; DECODER_HIDDEN];
        dense_relu(&self.w1, &self.b1, feature, &mut h1);
        let mut h2 = [0.0; DECODER_HIDDEN];
        dense_relu(&self.w2, &self.b2, &h1, &mut h2);
        let mut out = [0.0; DECODER_OUT];
        for (o, (row, b)) in out.iter_mut().zip(self.w3.chunks_exact(DECODER_HIDDEN).zip(&self.b3)) {
            *o = b + dot(row, &h2);
        }
        out
    }

    pub fn decode(&self, feature: &[f64]) -> Result<Radiance> {
        let raw = self.forward_raw(feature)?;
        Ok(activate(&raw))
    }
}

pub fn activate(raw: &[f64; DECODER_OUT]) -> Radiance {
    let mut color = [0.0; COLOR_DIM];
    for (k, (c, r)) in color.iter_mut().zip(&raw[1..]).enumerate() {
        *c = if k < 3 { sigmoid(*r) } else { *r };
    }
    Radiance {
        sigma: softplus(raw[0]),
        color,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_relu(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64]) {
    let n = input.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        *o = (bias + dot(row, input)).max(0.0);
    }
}

/// Decoded radiance of `decode(sample(x))`.
pub fn decode(params: &DecoderParams, feature: &[f64]) -> Result<Radiance> {
    params.decode(feature)
}

/// Soft ellipsoid `softplus(sharpness · (1 - q(x)))` with `q` the normalized quadratic form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub sharpness: f64,
    pub color: [f64; 3],
    /// Opaque blobs add density; the others only paint color onto opaque ones.
    pub opaque: bool,
}

impl Blob {
    #[inline]
    pub fn level(&self, x: &Vec3) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (x[a] - self.center[a]) / self.radii[a];
            q += d * d;
        }
        self.sharpness * (1.0 - q)
    }
}

/// Parameters of a separable field: density is one soft ellipsoid (a quadratic without
/// cross terms), colors are sums of per-plane trigonometric terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparableSpec {
    pub radii: [f64; 3],
    pub sharpness: f64,
    pub seed: u64,
}

/// Soft ellipsoids: the first opaque blob is the base surface, further blobs add density
/// (if opaque) and blend their color in with weight `sigmoid(level)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub blobs: Vec<Blob>,
}

/// Ground-truth fields that can be baked into a tri-plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticField {
    Zero,
    Separable(SeparableSpec),
    Ellipsoid(EllipsoidSpec),
}

/// One trig term `amp · sin(f1 u + p1) · cos(f2 v + p2)` on a plane.
#[derive(Clone, Copy, Debug)]
struct Wave {
    amp: f64,
    f: [f64; 2],
    p: [f64; 2],
}

impl Wave {
    fn eval(&self, u: f64, v: f64) -> f64 {
        self.amp * (self.f[0] * u + self.p[0]).sin() * (self.f[1] * v + self.p[1]).cos()
    }
}

impl SeparableSpec {
    /// One wave per (channel, plane) for the color channels 1..C.
    fn waves(&self, channels: usize) -> Vec<[Wave; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..channels)
            .map(|_| {
                std::array::from_fn(|_| Wave {
                    amp: rng.random_range(0.2..1.0),
                    f: [rng.random_range(0.5..4.0), rng.random_range(0.5..4.0)],
                    p: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
                })
            })
            .collect()
    }

    /// Per-plane additive terms of each raw channel: `raw_c(x) = Σ_plane term(plane, c, u, v)`.
    fn plane_term(&self, waves: &[[Wave; 3]], plane: usize, channel: usize, u: f64, v: f64) -> f64 {
        if channel == 0 {
            // s(1 - x²/a² - y²/b² - z²/c²): x² on XY, z² on XZ, y² on YZ
            let [a, b, c] = self.radii;
            let s = self.sharpness;
            return match plane {
                0 => s * (1.0 - (u / a).powi(2)),
                1 => -s * (v / c).powi(2),
                _ => -s * (u / b).powi(2),
            };
        }
        waves[channel][plane].eval(u, v)
    }
}

impl AnalyticField {
    /// Raw (pre-activation) channels 0..C at `x`, in the pass-through decoder's layout.
    pub fn raw(&self, x: &Vec3, channels: usize) -> Vec<f64> {
        match self {
            AnalyticField::Zero => vec![0.0; channels],
            AnalyticField::Separable(spec) => {
                let waves = spec.waves(channels);
                (0..channels)
                    .map(|c| {
                        PLANE_AXES
                            .iter()
                            .enumerate()
                            .map(|(p, &(ca, ra))| spec.plane_term(&waves, p, c, x[ca], x[ra]))
                            .sum()
                    })
                    .collect()
            }
            AnalyticField::Ellipsoid(spec) => {
                let mut out = vec![0.0; channels];
                let (sigma, rgb) = spec.eval(x);
                out[0] = softplus_inv(sigma.max(1e-12));
                for k in 0..3.min(channels.saturating_sub(1)) {
                    out[1 + k] = logit(rgb[k].clamp(1e-6, 1.0 - 1e-6));
                }
                out
            }
        }
    }

    /// Ground-truth density and RGB at `x`.
    pub fn radiance(&self, x: &Vec3, channels: usize) -> (f64, [f64; 3]) {
        match self {
            AnalyticField::Ellipsoid(spec) => spec.eval(x),
            _ => {
                let raw = self.raw(x, channels);
                let rgb = std::array::from_fn(|k| if 1 + k < channels { sigmoid(raw[1 + k]) } else { 0.5 });
                (softplus(raw[0]), rgb)
            }
        }
    }
}

impl EllipsoidSpec {
    pub fn eval(&self, x: &Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.5; 3];
        let mut base = true;
        for blob in &self.blobs {
            let level = blob.level(x);
            if blob.opaque {
                sigma += softplus(level);
            }
            if base && blob.opaque {
                rgb = blob.color;
                base = false;
            } else {
                let m = sigmoid(level);
                for k in 0..3 {
                    rgb[k] += m * (blob.color[k] - rgb[k]);
                }
            }
        }
        (sigma, rgb)
    }

    /// Exactly one opaque blob and nothing painted: the raw density is a separable quadratic.
    fn density_is_separable(&self) -> bool {
        self.blobs.iter().filter(|b| b.opaque).count() == 1
    }
}

/// Bakes an analytic field into a tri-plane with a pass-through decoder.
///
/// Separable content is written exactly: each plane stores three times its additive term so
/// the mean over planes reproduces the sum at texel-aligned points. Everything else is fit by
/// weighted backfitting of an additive model `g_xy + g_xz + g_yz` on the `R^3` texel lattice,
/// with weights concentrated on the soft surface of the density.
pub fn bake_analytic(field: &AnalyticField, resolution: usize, channels: usize) -> Result<(TriPlane, DecoderParams)> {
    if channels > DECODER_OUT || channels == 0 {
        return Err(Error::contract(format!("bake supports 1..={} channels", DECODER_HIDDEN / 2)));
    }
    let decoder = DecoderParams::pass_through(channels)?;
    let mut tp = TriPlane::zeros(resolution, channels)?;
    match field {
        AnalyticField::Zero => {}
        AnalyticField::Separable(spec) => {
            let waves = spec.waves(channels);
            for plane in 0..3 {
                for row in 0..resolution {
                    for col in 0..resolution {
                        let (u, v) = (tp.texel_coord(col), tp.texel_coord(row));
                        let texel = tp.texel_mut(plane, row, col);
                        for (c, t) in texel.iter_mut().enumerate() {
                            *t = (3.0 * spec.plane_term(&waves, plane, c, u, v)) as f32;
                        }
                    }
                }
            }
        }
        AnalyticField::Ellipsoid(spec) => bake_ellipsoids(spec, &mut tp),
    }
    Ok((tp, decoder))
}

fn bake_ellipsoids(spec: &EllipsoidSpec, tp: &mut TriPlane) {
    let r = tp.resolution();
    let channels = tp.channels();
    let coords: Vec<f64> = (0..r).map(|i| tp.texel_coord(i)).collect();
    let n = r * r * r;
    let idx = |i: usize, j: usize, k: usize| (k * r + j) * r + i;

    let mut raw = vec![[0.0f64; 4]; n];
    let mut weight = vec![0.0f64; n];
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let x = Vec3::new(coords[i], coords[j], coords[k]);
                let (sigma, rgb) = spec.eval(&x);
                let d = softplus_inv(sigma.max(1e-12));
                raw[idx(i, j, k)] = [
                    d,
                    logit(rgb[0].clamp(1e-6, 1.0 - 1e-6)),
                    logit(rgb[1].clamp(1e-6, 1.0 - 1e-6)),
                    logit(rgb[2].clamp(1e-6, 1.0 - 1e-6)),
                ];
                let p = sigmoid(d);
                weight[idx(i, j, k)] = 1e-3 + 4.0 * p * (1.0 - p);
            }
        }
    }

    let fitted_channels = 4.min(channels);
    for c in 0..fitted_channels {
        if c == 0 && spec.density_is_separable() {
            let blob = spec.blobs.iter().find(|b| b.opaque).unwrap();
            write_quadratic_density(blob, tp, &coords);
            continue;
        }
        let planes = backfit(r, |i, j, k| raw[idx(i, j, k)][c], |i, j, k| {
            if c == 0 {
                1.0
            } else {
                weight[idx(i, j, k)]
            }
        });
        for (plane, g) in planes.iter().enumerate() {
            for row in 0..r {
                for col in 0..r {
                    tp.texel_mut(plane, row, col)[c] = (3.0 * g[row * r + col]) as f32;
                }
            }
        }
    }
}

/// `s(1 - q(x))` split as x²→XY, z²→XZ, y²→YZ (with the center shifted per axis).
fn write_quadratic_density(blob: &Blob, tp: &mut TriPlane, coords: &[f64]) {
    let r = coords.len();
    let s = blob.sharpness;
    let term = |axis: usize, v: f64| ((v - blob.center[axis]) / blob.radii[axis]).powi(2);
    for row in 0..r {
        for col in 0..r {
            let (u, v) = (coords[col], coords[row]);
            tp.texel_mut(0, row, col)[0] = (3.0 * s * (1.0 - term(0, u))) as f32;
            tp.texel_mut(1, row, col)[0] = (-3.0 * s * term(2, v)) as f32;
            tp.texel_mut(2, row, col)[0] = (-3.0 * s * term(1, u)) as f32;
        }
    }
}

/// Weighted least-squares additive fit `f(i,j,k) ≈ g_xy(i,j) + g_xz(i,k) + g_yz(j,k)` by
/// block coordinate descent. Returns the three planes indexed `[row * r + col]` in the
/// tri-plane's own layout.
fn backfit(r: usize, f: impl Fn(usize, usize, usize) -> f64, w: impl Fn(usize, usize, usize) -> f64) -> [Vec<f64>; 3] {
    const SWEEPS: usize = 12;
    let mut xy = vec![0.0; r * r]; // [j * r + i]
    let mut xz = vec![0.0; r * r]; // [k * r + i]
    let mut yz = vec![0.0; r * r]; // [k * r + j]
    let mut num = vec![0.0; r * r];
    let mut den = vec![0.0; r * r];
    for _ in 0..SWEEPS {
        for plane in 0..3 {
            num.iter_mut().for_each(|v| *v = 0.0);
            den.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..r {
                for j in 0..r {
                    for i in 0..r {
                        let wt = w(i, j, k);
                        let (slot, rest) = match plane {
                            0 => (j * r + i, xz[k * r + i] + yz[k * r + j]),
                            1 => (k * r + i, xy[j * r + i] + yz[k * r + j]),
                            _ => (k * r + j, xy[j * r + i] + xz[k * r + i]),
                        };
                        num[slot] += wt * (f(i, j, k) - rest);
                        den[slot] += wt;
                    }
                }
            }
            let target = match plane {
                0 => &mut xy,
                1 => &mut xz,
                _ => &mut yz,
            };
            for (t, (n, d)) in target.iter_mut().zip(num.iter().zip(&den)) {
                *t = if *d > 0.0 { n / d } else { 0.0 };
            }
        }
    }
    [xy, xz, yz]
}
