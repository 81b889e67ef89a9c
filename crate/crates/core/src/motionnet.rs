//! Motion-conditioned token transformer for de-expression and reenactment.
//!
//! Two sub-modules run back to back on a token grid: the first attends to the source motion,
//! the second to the driving motion. Every block is pre-norm:
//! `x += gate · cross(norm(x), motion); x += self(norm(x)); x += mlp(norm(x))`.
//! All arithmetic is generic over [`Scalar`] so the same code runs on `f64` and on forward-mode
//! [`Dual`] numbers for Jacobian-vector products.

use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headmodel::ExpressionCode;

pub const EXPR_PART: usize = 30;
pub const LIP_PART: usize = 512;
pub const EYE_PART: usize = 6;
pub const MOTION_DIM: usize = EXPR_PART + LIP_PART + EYE_PART;
const LN_EPS: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"PHI1";

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `v + d ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.v / o.v, (self.d * o.v - self.v * o.d) / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl Scalar for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
}

/// GELU, tanh approximation.
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::cst((2.0 / std::f64::consts::PI).sqrt());
    T::cst(0.5) * x * (T::cst(1.0) + (c * (x + T::cst(0.044715) * x * x * x)).tanh())
}

/// 548-dim motion code: expression block, lip block, eye block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionVector(pub Vec<f64>);

impl MotionVector {
    pub fn zeros() -> Self {
        Self(vec![0.0; MOTION_DIM])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != MOTION_DIM {
            return Err(Error::contract(format!("motion vector has {} entries, expected {MOTION_DIM}", self.0.len())));
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("motion vector must be finite"));
        }
        Ok(())
    }
}

/// `N × D` token matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T = f64> {
    pub n: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl FeatureGrid<f64> {
    pub fn random(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            n,
            d,
            data: (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiDims {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub motion_tokens: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub motion_hidden: usize,
}

impl Default for PhiDims {
    fn default() -> Self {
        Self {
            tokens: 16 * 16,
            dim: 64,
            heads: 4,
            motion_tokens: 8,
            blocks: 4,
            mlp_hidden: 128,
            motion_hidden: 128,
        }
    }
}

impl PhiDims {
    /// Tiny configuration for derivative checks.
    pub fn tiny() -> Self {
        Self {
            tokens: 4,
            dim: 8,
            heads: 4,
            motion_tokens: 2,
            blocks: 4,
            mlp_hidden: 8,
            motion_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.tokens, self.dim, self.heads, self.motion_tokens, self.blocks, self.mlp_hidden, self.motion_hidden];
        if sizes.contains(&0) {
            return Err(Error::contract("all dimensions must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Dense layer `y = W x + b` with `W` stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f64> {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl Linear<f64> {
    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            w: (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect(),
            b: (0..outputs).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }
}

impl<T: Scalar> Linear<T> {
    fn apply(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for (row, b) in self.w.chunks_exact(self.inputs).zip(&self.b) {
            let mut s = *b;
            for (w, xi) in row.iter().zip(x) {
                s += *w * *xi;
            }
            out.push(s);
        }
    }

    /// Row-wise application to an `n × inputs` matrix.
    fn apply_rows(&self, x: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n * self.outputs);
        let mut buf = Vec::with_capacity(self.outputs);
        for r in 0..n {
            self.apply(&x[r * self.inputs..(r + 1) * self.inputs], &mut buf);
            out.extend_from_slice(&buf);
        }
        out
    }

    fn map<U>(&self, f: &mut impl FnMut(f64) -> U) -> Linear<U>
    where
        T: Scalar,
    {
        Linear {
            inputs: self.inputs,
            outputs: self.outputs,
            w: self.w.iter().map(|v| f(v.value())).collect(),
            b: self.b.iter().map(|v| f(v.value())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T = f64> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn apply_rows(&self, x: &[T], n: usize) -> Vec<T> {
        let d = self.gamma.len();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = T::cst(0.0);
            for v in row {
                mean += *v;
            }
            mean = mean / T::cst(d as f64);
            let mut var = T::cst(0.0);
            for v in row {
                let c = *v - mean;
                var += c * c;
            }
            let inv = T::cst(1.0) / (var / T::cst(d as f64) + T::cst(LN_EPS)).sqrt();
            for ((v, g), b) in row.iter().zip(&self.gamma).zip(&self.beta) {
                out.push((*v - mean) * inv * *g + *b);
            }
        }
        out
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T = f64> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f64> {
    pub norm_cross: LayerNorm<T>,
    pub cross: Attention<T>,
    pub norm_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub norm_mlp: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

/// Maps a motion vector to `motion_tokens × dim` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMlp<T = f64> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubModule<T = f64> {
    pub motion: MotionMlp<T>,
    pub blocks: Vec<Block<T>>,
}

/// Parameters of both sub-modules; each owns its motion MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiParams<T = f64> {
    pub dims: PhiDims,
    pub de: SubModule<T>,
    pub re: SubModule<T>,
}

/// Cross-attention on (`true`) or multiplied by zero (`false`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateSwitch {
    pub on: bool,
}

impl GateSwitch {
    pub const ON: GateSwitch = GateSwitch { on: true };
    pub const OFF: GateSwitch = GateSwitch { on: false };
}

/// Initialization: every weight and bias uniform in `±1/√fan_in`, layer-norm gains 1 and
/// offsets 0, cross-attention output projections (weights and biases) exactly zero.
pub fn init_phi(dims: PhiDims, seed: u64) -> Result<PhiParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.dim;
    let norm = || LayerNorm {
        gamma: vec![1.0; d],
        beta: vec![0.0; d],
    };
    let sub = |rng: &mut ChaCha8Rng| {
        let motion = MotionMlp {
            l1: Linear::random(MOTION_DIM, dims.motion_hidden, rng),
            l2: Linear::random(dims.motion_hidden, dims.motion_tokens * d, rng),
        };
        let blocks = (0..dims.blocks)
            .map(|_| {
                let mut att = |zero_out: bool| Attention {
                    q: Linear::random(d, d, rng),
                    k: Linear::random(d, d, rng),
                    v: Linear::random(d, d, rng),
                    o: if zero_out { Linear::zeros(d, d) } else { Linear::random(d, d, rng) },
                };
                let cross = att(true);
                let self_attn = att(false);
                Block {
                    norm_cross: norm(),
                    cross,
                    norm_self: norm(),
                    self_attn,
                    norm_mlp: norm(),
                    mlp1: Linear::random(d, dims.mlp_hidden, rng),
                    mlp2: Linear::random(dims.mlp_hidden, d, rng),
                }
            })
            .collect();
        SubModule { motion, blocks }
    };
    let de = sub(&mut rng);
    let re = sub(&mut rng);
    Ok(PhiParams { dims, de, re })
}

impl<T: Scalar> PhiParams<T> {
    /// Every tensor in a fixed order, with its dotted name.
    pub fn tensors(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (sn, sub) in [("de", &self.de), ("re", &self.re)] {
            for (ln, l) in [("motion.l1", &sub.motion.l1), ("motion.l2", &sub.motion.l2)] {
                out.push((format!("{sn}.{ln}.w"), &l.w));
                out.push((format!("{sn}.{ln}.b"), &l.b));
            }
            for (bi, b) in sub.blocks.iter().enumerate() {
                let p = format!("{sn}.blocks.{bi}");
                for (nn, n) in [("norm_cross", &b.norm_cross), ("norm_self", &b.norm_self), ("norm_mlp", &b.norm_mlp)] {
                    out.push((format!("{p}.{nn}.gamma"), &n.gamma));
                    out.push((format!("{p}.{nn}.beta"), &n.beta));
                }
                for (an, a) in [("cross", &b.cross), ("self_attn", &b.self_attn)] {
                    for (ln, l) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
                        out.push((format!("{p}.{an}.{ln}.w"), &l.w));
                        out.push((format!("{p}.{an}.{ln}.b"), &l.b));
                    }
                }
                for (ln, l) in [("mlp1", &b.mlp1), ("mlp2", &b.mlp2)] {
                    out.push((format!("{p}.{ln}.w"), &l.w));
                    out.push((format!("{p}.{ln}.b"), &l.b));
                }
            }
        }
        out
    }

    /// Mutable access to the tensor named as in [`PhiParams::tensors`].
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        let (sub_name, rest) = name.split_once('.')?;
        let sub = match sub_name {
            "de" => &mut self.de,
            "re" => &mut self.re,
            _ => return None,
        };
        let parts: Vec<&str> = rest.split('.').collect();
        fn lin<'a, T>(l: &'a mut Linear<T>, field: &str) -> Option<&'a mut Vec<T>> {
            match field {
                "w" => Some(&mut l.w),
                "b" => Some(&mut l.b),
                _ => None,
            }
        }
        match parts.as_slice() {
            ["motion", "l1", f] => lin(&mut sub.motion.l1, f),
            ["motion", "l2", f] => lin(&mut sub.motion.l2, f),
            ["blocks", i, rest @ ..] => {
                let b = sub.blocks.get_mut(i.parse::<usize>().ok()?)?;
                match rest {
                    [n, f] if n.starts_with("norm_") => {
                        let norm = match *n {
                            "norm_cross" => &mut b.norm_cross,
                            "norm_self" => &mut b.norm_self,
                            "norm_mlp" => &mut b.norm_mlp,
                            _ => return None,
                        };
                        match *f {
                            "gamma" => Some(&mut norm.gamma),
                            "beta" => Some(&mut norm.beta),
                            _ => None,
                        }
                    }
                    ["mlp1", f] => lin(&mut b.mlp1, f),
                    ["mlp2", f] => lin(&mut b.mlp2, f),
                    [a, l, f] => {
                        let att = match *a {
                            "cross" => &mut b.cross,
                            "self_attn" => &mut b.self_attn,
                            _ => return None,
                        };
                        let layer = match *l {
                            "q" => &mut att.q,
                            "k" => &mut att.k,
                            "v" => &mut att.v,
                            "o" => &mut att.o,
                            _ => return None,
                        };
                        lin(layer, f)
                    }
                    _ => None,
                }
            }
            _ => None,
        }
    }

    fn map<U>(&self, f: &mut impl FnMut(f64) -> U) -> PhiParams<U> {
        let norm = |n: &LayerNorm<T>, f: &mut dyn FnMut(f64) -> U| LayerNorm {
            gamma: n.gamma.iter().map(|v| f(v.value())).collect(),
            beta: n.beta.iter().map(|v| f(v.value())).collect(),
        };
        let mut sub = |s: &SubModule<T>| SubModule {
            motion: MotionMlp {
                l1: s.motion.l1.map(f),
                l2: s.motion.l2.map(f),
            },
            blocks: s
                .blocks
                .iter()
                .map(|b| Block {
                    norm_cross: norm(&b.norm_cross, f),
                    cross: Attention {
                        q: b.cross.q.map(f),
                        k: b.cross.k.map(f),
                        v: b.cross.v.map(f),
                        o: b.cross.o.map(f),
                    },
                    norm_self: norm(&b.norm_self, f),
                    self_attn: Attention {
                        q: b.self_attn.q.map(f),
                        k: b.self_attn.k.map(f),
                        v: b.self_attn.v.map(f),
                        o: b.self_attn.o.map(f),
                    },
                    norm_mlp: norm(&b.norm_mlp, f),
                    mlp1: b.mlp1.map(f),
                    mlp2: b.mlp2.map(f),
                })
                .collect(),
        };
        let de = sub(&self.de);
        let re = sub(&self.re);
        PhiParams { dims: self.dims, de, re }
    }
}

/// Motion tokens (`motion_tokens × dim`, row-major) for one sub-module.
pub fn expand_motion<T: Scalar>(mlp: &MotionMlp<T>, v: &[T], tokens: usize) -> Result<Vec<T>> {
    if v.len() != mlp.l1.inputs {
        return Err(Error::contract(format!("motion input has {} entries, expected {}", v.len(), mlp.l1.inputs)));
    }
    if !mlp.l2.outputs.is_multiple_of(tokens) {
        return Err(Error::contract("motion MLP output is not a whole number of tokens"));
    }
    let mut h = Vec::new();
    mlp.l1.apply(v, &mut h);
    for x in h.iter_mut() {
        *x = gelu(*x);
    }
    let mut out = Vec::new();
    mlp.l2.apply(&h, &mut out);
    Ok(out)
}

/// Softmax attention weights per head: `[head][query][key]`.
pub fn attention_weights<T: Scalar>(q_in: &FeatureGrid<T>, kv_in: &FeatureGrid<T>, proj: &Attention<T>, heads: usize) -> Result<Vec<Vec<Vec<T>>>> {
    check_attention(q_in, kv_in, proj, heads)?;
    let q = proj.q.apply_rows(&q_in.data, q_in.n);
    let k = proj.k.apply_rows(&kv_in.data, kv_in.n);
    Ok(softmax_weights(&q, &k, q_in.n, kv_in.n, q_in.d, heads))
}

fn check_attention<T: Scalar>(q_in: &FeatureGrid<T>, kv_in: &FeatureGrid<T>, proj: &Attention<T>, heads: usize) -> Result<()> {
    let d = proj.q.inputs;
    if q_in.d != d || kv_in.d != d || heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::contract("attention dimension mismatch"));
    }
    if q_in.data.len() != q_in.n * d || kv_in.data.len() != kv_in.n * d || kv_in.n == 0 {
        return Err(Error::contract("attention inputs have inconsistent shapes"));
    }
    Ok(())
}

fn softmax_weights<T: Scalar>(q: &[T], k: &[T], n: usize, m: usize, d: usize, heads: usize) -> Vec<Vec<Vec<T>>> {
    let dh = d / heads;
    let scale = T::cst(1.0 / (dh as f64).sqrt());
    (0..heads)
        .map(|h| {
            (0..n)
                .map(|i| {
                    let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                    let logits: Vec<T> = (0..m)
                        .map(|j| {
                            let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                            let mut s = T::cst(0.0);
                            for (a, b) in qi.iter().zip(kj) {
                                s += *a * *b;
                            }
                            s * scale
                        })
                        .collect();
                    let max = logits.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<T> = logits.iter().map(|l| (*l - T::cst(max)).exp()).collect();
                    let mut z = T::cst(0.0);
                    for v in &e {
                        z += *v;
                    }
                    e.into_iter().map(|v| v / z).collect()
                })
                .collect()
        })
        .collect()
}

/// Scaled dot-product multi-head attention of `q_in` over `kv_in`, then the output projection.
pub fn attention<T: Scalar>(q_in: &FeatureGrid<T>, kv_in: &FeatureGrid<T>, proj: &Attention<T>, heads: usize) -> Result<FeatureGrid<T>> {
    check_attention(q_in, kv_in, proj, heads)?;
    Ok(attention_unchecked(q_in, kv_in, proj, heads))
}

fn attention_unchecked<T: Scalar>(q_in: &FeatureGrid<T>, kv_in: &FeatureGrid<T>, proj: &Attention<T>, heads: usize) -> FeatureGrid<T> {
    let (n, m, d) = (q_in.n, kv_in.n, q_in.d);
    let dh = d / heads;
    let q = proj.q.apply_rows(&q_in.data, n);
    let k = proj.k.apply_rows(&kv_in.data, m);
    let v = proj.v.apply_rows(&kv_in.data, m);
    let w = softmax_weights(&q, &k, n, m, d, heads);
    let mut mixed = vec![T::cst(0.0); n * d];
    for (h, wh) in w.iter().enumerate() {
        for (i, wi) in wh.iter().enumerate() {
            for (j, a) in wi.iter().enumerate() {
                for c in h * dh..(h + 1) * dh {
                    mixed[i * d + c] += *a * v[j * d + c];
                }
            }
        }
    }
    FeatureGrid {
        n,
        d: proj.o.outputs,
        data: proj.o.apply_rows(&mixed, n),
    }
}

fn add_assign<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += *b;
    }
}

fn run_submodule<T: Scalar>(sub: &SubModule<T>, dims: &PhiDims, x: &mut FeatureGrid<T>, v: &[T], gate: GateSwitch) -> Result<()> {
    let motion = FeatureGrid {
        n: dims.motion_tokens,
        d: dims.dim,
        data: expand_motion(&sub.motion, v, dims.motion_tokens)?,
    };
    for b in &sub.blocks {
        // a closed gate contributes exact zeros, so the branch is skipped outright
        if gate.on {
            let h = FeatureGrid {
                n: x.n,
                d: x.d,
                data: b.norm_cross.apply_rows(&x.data, x.n),
            };
            let c = attention_unchecked(&h, &motion, &b.cross, dims.heads);
            add_assign(&mut x.data, &c.data);
        }
        let h = FeatureGrid {
            n: x.n,
            d: x.d,
            data: b.norm_self.apply_rows(&x.data, x.n),
        };
        let s = attention_unchecked(&h, &h, &b.self_attn, dims.heads);
        add_assign(&mut x.data, &s.data);
        let h = b.norm_mlp.apply_rows(&x.data, x.n);
        let mut hidden = b.mlp1.apply_rows(&h, x.n);
        for v in hidden.iter_mut() {
            *v = gelu(*v);
        }
        let out = b.mlp2.apply_rows(&hidden, x.n);
        add_assign(&mut x.data, &out);
    }
    Ok(())
}

/// Source-motion sub-module followed by driving-motion sub-module.
pub fn phi_forward<T: Scalar>(
    params: &PhiParams<T>,
    f: &FeatureGrid<T>,
    v_source: &[T],
    v_driving: &[T],
    gate: GateSwitch,
) -> Result<FeatureGrid<T>> {
    let dims = &params.dims;
    if f.n != dims.tokens || f.d != dims.dim || f.data.len() != f.n * f.d {
        return Err(Error::contract(format!(
            "feature grid is {}x{}, expected {}x{}",
            f.n, f.d, dims.tokens, dims.dim
        )));
    }
    if v_source.len() != MOTION_DIM || v_driving.len() != MOTION_DIM {
        return Err(Error::contract(format!("motion vectors must have {MOTION_DIM} entries")));
    }
    let mut x = f.clone();
    run_submodule(&params.de, dims, &mut x, v_source, gate)?;
    run_submodule(&params.re, dims, &mut x, v_driving, gate)?;
    Ok(x)
}

/// Seeded affine embedding of FLAME-style codes into the 548-dim motion space.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionEmbedding {
    expr_dim: usize,
    expr: Linear,
    lip: Linear,
    eye: Linear,
}

impl MotionEmbedding {
    /// `expr` maps β to the 30-dim block, `lip` maps `[β, γ_jaw]` to the 512-dim block and
    /// `eye` maps `γ_eye` (the shared gaze rotation) to the 6-dim block. Weights are uniform
    /// in `±1/√fan_in`, biases uniform in `±0.1`.
    pub fn new(expr_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |inputs: usize, outputs: usize| {
            let mut l = Linear::random(inputs, outputs, &mut rng);
            l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.1..=0.1));
            l
        };
        let expr = layer(expr_dim, EXPR_PART);
        let lip = layer(expr_dim + 3, LIP_PART);
        let eye = layer(3, EYE_PART);
        Self { expr_dim, expr, lip, eye }
    }

    /// The output for all-zero codes.
    pub fn bias(&self) -> MotionVector {
        MotionVector(self.expr.b.iter().chain(&self.lip.b).chain(&self.eye.b).copied().collect())
    }

    pub fn embed(&self, beta: &ExpressionCode, eye: [f64; 3], jaw: [f64; 3]) -> Result<MotionVector> {
        if beta.0.len() != self.expr_dim {
            return Err(Error::contract(format!("expression code has {} entries, expected {}", beta.0.len(), self.expr_dim)));
        }
        let mut out = Vec::with_capacity(MOTION_DIM);
        let mut buf = Vec::new();
        self.expr.apply(&beta.0, &mut buf);
        out.extend_from_slice(&buf);
        let lip_in: Vec<f64> = beta.0.iter().copied().chain(jaw).collect();
        self.lip.apply(&lip_in, &mut buf);
        out.extend_from_slice(&buf);
        self.eye.apply(&eye, &mut buf);
        out.extend_from_slice(&buf);
        Ok(MotionVector(out))
    }
}

pub fn synth_motion_vector(beta: &ExpressionCode, eye: [f64; 3], jaw: [f64; 3], seed: u64) -> Result<MotionVector> {
    MotionEmbedding::new(beta.0.len(), seed).embed(beta, eye, jaw)
}

/// Denominator floor of [`JacobianCheck::rel_error`]. Some derivatives vanish identically
/// (key biases shift every logit of a softmax row equally) and the central difference then
/// returns rounding noise near 1e-10.
pub const JACOBIAN_SCALE_FLOOR: f64 = 1e-5;

/// Outcome of a directional derivative check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianCheck {
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, JACOBIAN_SCALE_FLOOR)`
    pub rel_error: f64,
}

/// Compares the forward-mode derivative of `probe · phi_forward` along `direction` in the
/// tensor `tensor` with a central difference at step `step`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_jacobian_check(
    params: &PhiParams,
    f: &FeatureGrid,
    v_source: &MotionVector,
    v_driving: &MotionVector,
    gate: GateSwitch,
    probe: &[f64],
    tensor: &str,
    direction: &[f64],
    step: f64,
) -> Result<JacobianCheck> {
    if probe.len() != f.n * f.d {
        return Err(Error::contract("probe must have one weight per output entry"));
    }
    let mut dual = params.map(&mut |v| Dual::new(v, 0.0));
    let target = dual
        .tensor_mut(tensor)
        .ok_or_else(|| Error::contract(format!("unknown tensor {tensor}")))?;
    if target.len() != direction.len() {
        return Err(Error::contract(format!("direction has {} entries, tensor has {}", direction.len(), target.len())));
    }
    for (t, d) in target.iter_mut().zip(direction) {
        t.d = *d;
    }
    let lift = |x: &[f64]| x.iter().map(|v| Dual::new(*v, 0.0)).collect::<Vec<_>>();
    let fd = FeatureGrid {
        n: f.n,
        d: f.d,
        data: lift(&f.data),
    };
    let out = phi_forward(&dual, &fd, &lift(&v_source.0), &lift(&v_driving.0), gate)?;
    let analytic: f64 = out.data.iter().zip(probe).map(|(o, p)| o.d * p).sum();

    let eval = |sign: f64| -> Result<f64> {
        let mut p = params.clone();
        let t = p.tensor_mut(tensor).expect("checked above");
        for (w, d) in t.iter_mut().zip(direction) {
            *w += sign * step * d;
        }
        let o = phi_forward(&p, f, &v_source.0, &v_driving.0, gate)?;
        Ok(o.data.iter().zip(probe).map(|(a, b)| a * b).sum())
    };
    let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * step);
    let scale = analytic.abs().max(numeric.abs()).max(JACOBIAN_SCALE_FLOOR);
    let rel_error = (analytic - numeric).abs() / scale;
    Ok(JacobianCheck {
        analytic,
        numeric,
        rel_error,
    })
}

impl PhiParams {
    /// "PHI1" container: magic, then u32 LE `tokens, dim, heads, motion_tokens, blocks,
    /// mlp_hidden, motion_hidden, motion_dim`, then every tensor of [`PhiParams::tensors`] in
    /// order as f32 LE.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let d = &self.dims;
        for v in [d.tokens, d.dim, d.heads, d.motion_tokens, d.blocks, d.mlp_hidden, d.motion_hidden, MOTION_DIM] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::new();
        for (_, t) in self.tensors() {
            for v in t {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read, origin: &str) -> Result<Self> {
        let mut head = [0u8; 36];
        r.read_exact(&mut head)
            .map_err(|_| Error::parse(origin, "byte 0", "truncated PHI1 header"))?;
        if &head[..4] != MAGIC {
            return Err(Error::parse(origin, "byte 0", "bad magic, expected PHI1"));
        }
        let u = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let dims = PhiDims {
            tokens: u(0),
            dim: u(1),
            heads: u(2),
            motion_tokens: u(3),
            blocks: u(4),
            mlp_hidden: u(5),
            motion_hidden: u(6),
        };
        if u(7) != MOTION_DIM {
            return Err(Error::parse(origin, "byte 32", format!("motion dimension {} unsupported", u(7))));
        }
        dims.validate()
            .map_err(|e| Error::parse(origin, "byte 4", e.to_string()))?;
        let mut p = init_phi(dims, 0)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(origin, e))?;
        let names: Vec<(String, usize)> = p.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        let total: usize = names.iter().map(|(_, l)| l).sum();
        if payload.len() != total * 4 {
            return Err(Error::parse(origin, "byte 36", format!("payload has {} bytes, expected {}", payload.len(), total * 4)));
        }
        let mut vals = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for (name, len) in names {
            let t = p.tensor_mut(&name).expect("names come from the same layout");
            for slot in t.iter_mut().take(len) {
                *slot = vals.next().expect("length checked");
            }
        }
        if p.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::parse(origin, "payload", "non-finite parameter"));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), &path.display().to_string())
    }

    /// Names of the cross-attention output projections (zero at initialization).
    pub fn cross_output_names(&self) -> Vec<String> {
        self.tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.contains(".cross.o."))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_motion(seed: u64) -> MotionVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionVector((0..MOTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn grid(n: usize, d: usize, seed: u64) -> FeatureGrid {
        FeatureGrid::random(n, d, seed)
    }

    #[test]
    fn init_properties() {
        let mut a = init_phi(PhiDims::tiny(), 3).unwrap();
        assert_eq!(a, init_phi(PhiDims::tiny(), 3).unwrap());
        assert_ne!(a, init_phi(PhiDims::tiny(), 4).unwrap());
        let names = a.cross_output_names();
        assert_eq!(names.len(), 2 * 4 * 2);
        for (name, t) in a.tensors() {
            if names.contains(&name) {
                assert!(t.iter().all(|v| *v == 0.0), "{name}");
            }
        }
        let l = &a.de.blocks[0].mlp1;
        assert!(l.w.iter().all(|v| v.abs() <= 1.0 / (l.inputs as f64).sqrt()));
        assert!(a.tensor_mut("de.blocks.9.mlp1.w").is_none());
        let mut b = a.clone();
        assert!(b.tensor_mut("re.blocks.2.self_attn.k.b").is_some());
    }

    #[test]
    fn expand_motion_matches_loop_oracle() {
        let p = init_phi(PhiDims::default(), 1).unwrap();
        let v = random_motion(2);
        let got = expand_motion(&p.de.motion, &v.0, 8).unwrap();
        let l1 = &p.de.motion.l1;
        let l2 = &p.de.motion.l2;
        let mut h = vec![0.0; l1.outputs];
        for o in 0..l1.outputs {
            let mut s = l1.b[o];
            for i in 0..l1.inputs {
                s += l1.w[o * l1.inputs + i] * v.0[i];
            }
            let c = (2.0 / std::f64::consts::PI).sqrt();
            h[o] = 0.5 * s * (1.0 + (c * (s + 0.044715 * s * s * s)).tanh());
        }
        for o in 0..l2.outputs {
            let mut s = l2.b[o];
            for i in 0..l2.inputs {
                s += l2.w[o * l2.inputs + i] * h[i];
            }
            assert!((got[o] - s).abs() < 1e-6);
        }
        assert_eq!(got.len(), 8 * 64);
        assert!(expand_motion(&p.de.motion, &v.0[..10], 8).is_err());
    }

    #[test]
    fn zero_motion_mlp_gives_bias() {
        let mut p = init_phi(PhiDims::tiny(), 1).unwrap();
        p.de.motion.l1.w.fill(0.0);
        p.de.motion.l1.b.fill(0.0);
        p.de.motion.l2.w.fill(0.0);
        let out = expand_motion(&p.de.motion, &random_motion(1).0, 2).unwrap();
        assert_eq!(out, p.de.motion.l2.b);
    }

    fn attn(d: usize, seed: u64) -> Attention {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Attention {
            q: Linear::random(d, d, &mut rng),
            k: Linear::random(d, d, &mut rng),
            v: Linear::random(d, d, &mut rng),
            o: Linear::random(d, d, &mut rng),
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let a = attn(8, 1);
        let q = grid(5, 8, 2);
        let kv = grid(1, 8, 3);
        let out = attention(&q, &kv, &a, 4).unwrap();
        let mut v = Vec::new();
        a.v.apply(&kv.data, &mut v);
        let mut o = Vec::new();
        a.o.apply(&v, &mut o);
        for i in 0..5 {
            for (x, y) in out.row(i).iter().zip(&o) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_permutation_invariance_and_row_sums() {
        let a = attn(8, 4);
        let q = grid(6, 8, 5);
        let kv = grid(3, 8, 6);
        let mut perm = kv.clone();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            perm.data[dst * 8..(dst + 1) * 8].copy_from_slice(kv.row(src));
        }
        let x = attention(&q, &kv, &a, 4).unwrap();
        let y = attention(&q, &perm, &a, 4).unwrap();
        for (u, v) in x.data.iter().zip(&y.data) {
            assert!((u - v).abs() < 1e-12);
        }
        for head in attention_weights(&q, &kv, &a, 4).unwrap() {
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_logits_average_values() {
        let mut a = attn(8, 7);
        a.q.w.fill(0.0);
        a.q.b.fill(0.0);
        let q = grid(3, 8, 8);
        let kv = grid(4, 8, 9);
        let out = attention(&q, &kv, &a, 2).unwrap();
        let v = a.v.apply_rows(&kv.data, 4);
        let mean: Vec<f64> = (0..8).map(|c| (0..4).map(|j| v[j * 8 + c]).sum::<f64>() / 4.0).collect();
        let mut want = Vec::new();
        a.o.apply(&mean, &mut want);
        for i in 0..3 {
            for (x, y) in out.row(i).iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_properties() {
        let dims = PhiDims {
            tokens: 16,
            dim: 16,
            ..PhiDims::tiny()
        };
        let mut p = init_phi(dims, 11).unwrap();
        let f = grid(16, 16, 12);
        let (a, b, c) = (random_motion(1), random_motion(2), random_motion(3));
        let off = phi_forward(&p, &f, &a.0, &b.0, GateSwitch::OFF).unwrap();
        let off2 = phi_forward(&p, &f, &c.0, &a.0, GateSwitch::OFF).unwrap();
        assert!(off.data.iter().zip(&off2.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        let on = phi_forward(&p, &f, &a.0, &b.0, GateSwitch::ON).unwrap();
        assert_eq!(on, off);
        p.tensor_mut("de.blocks.1.cross.o.w").unwrap()[5] = 0.3;
        let on = phi_forward(&p, &f, &a.0, &b.0, GateSwitch::ON).unwrap();
        assert_ne!(on, off);
        assert!(phi_forward(&p, &grid(15, 16, 1), &a.0, &b.0, GateSwitch::ON).is_err());
    }

    #[test]
    fn motion_embedding_affine() {
        let emb = MotionEmbedding::new(8, 5);
        let z = emb.embed(&ExpressionCode::zeros(8), [0.0; 3], [0.0; 3]).unwrap();
        assert_eq!(z, emb.bias());
        assert_eq!(z.0.len(), MOTION_DIM);
        let b1 = ExpressionCode((0..8).map(|i| i as f64 * 0.1).collect());
        let b2 = ExpressionCode((0..8).map(|i| (i as f64).sin()).collect());
        let mix = ExpressionCode(b1.0.iter().zip(&b2.0).map(|(x, y)| 2.0 * x - 0.5 * y).collect());
        let e = |b: &ExpressionCode| emb.embed(b, [0.0; 3], [0.0; 3]).unwrap().0;
        let (v1, v2, vm) = (e(&b1), e(&b2), e(&mix));
        for i in 0..MOTION_DIM {
            let want = 2.0 * (v1[i] - z.0[i]) - 0.5 * (v2[i] - z.0[i]);
            assert!((vm[i] - z.0[i] - want).abs() < 1e-12);
        }
        assert_eq!(synth_motion_vector(&b1, [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], 5).unwrap(), emb.embed(&b1, [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]).unwrap());
    }

    fn probe(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn jacobian_checks() {
        let mut p = init_phi(PhiDims::tiny(), 21).unwrap();
        // open the cross-attention paths so their weights matter
        for name in p.cross_output_names() {
            let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
            p.tensor_mut(&name).unwrap().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let f = grid(4, 8, 22);
        let (vs, vd) = (random_motion(23), random_motion(24));
        let pr = probe(32, 25);
        for name in ["de.blocks.0.cross.q.w", "re.blocks.2.self_attn.v.w", "de.motion.l1.w", "re.blocks.1.norm_mlp.gamma"] {
            let len = p.tensor_mut(name).unwrap().len();
            let dir = probe(len, 26);
            let c = finite_diff_jacobian_check(&p, &f, &vs, &vd, GateSwitch::ON, &pr, name, &dir, 1e-4).unwrap();
            assert!(c.rel_error < 1e-4, "{name}: {c:?}");
        }
        let last = "re.blocks.3.mlp2.w";
        let len = p.tensor_mut(last).unwrap().len();
        let lin = finite_diff_jacobian_check(&p, &f, &vs, &vd, GateSwitch::OFF, &pr, last, &probe(len, 27), 1e-4).unwrap();
        assert!((lin.analytic - lin.numeric).abs() < 1e-8, "{lin:?}");
        let zero = finite_diff_jacobian_check(&p, &f, &vs, &vd, GateSwitch::ON, &pr, last, &vec![0.0; len], 1e-4).unwrap();
        assert_eq!(zero.analytic, 0.0);
    }

    #[test]
    fn phi1_round_trip() {
        let p = init_phi(PhiDims::tiny(), 30).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = PhiParams::read_from(buf.as_slice(), "mem").unwrap();
        let mut again = Vec::new();
        q.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(PhiParams::read_from(&buf[..40], "mem").is_err());
        let mut bad = buf.clone();
        bad[0] = b'Q';
        assert!(PhiParams::read_from(bad.as_slice(), "mem").is_err());
    }
}
