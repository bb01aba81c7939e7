//! Rank-5 tensors (batch, channel, depth, height, width) and the five layer
//! primitives — conv3d, relu, maxpool3d, channel concat, MSE loss — each with
//! a hand-derived backward pass.
//!
//! Convolutions are stride-1 with "same" zero padding, so spatial dims are
//! preserved at every size; maxpool is a 3^3 stride-1 window whose borders
//! take the in-bounds maximum. Production tensors are f32 with optional f64
//! gradient buffers; every kernel is generic over the element scalar so the
//! gradient-check suite can run the identical code end-to-end in f64, where
//! central differences are meaningful. Weight and bias gradients accumulate
//! in f64 in all instantiations.
//!
//! Conv kernels run as shifted-SAXPY passes over apron-padded plane stacks:
//! each (c_out, c_in, kernel-offset) triple touches one contiguous slab, which
//! is what lets the autovectorizer work. Zero aprons double as the "same"
//! padding. Summation order is fixed, so results are bitwise reproducible and
//! independent of threading one level up.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("kernel dims must be odd, got ({0}, {1}, {2})")]
    EvenKernelDim(usize, usize, usize),
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Shape5, b: Shape5 },
    #[error("batch/spatial mismatch for concat: {a:?} vs {b:?}")]
    ConcatMismatch { a: Shape5, b: Shape5 },
    #[error("value buffer length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Shape5, len: usize },
    #[error("gradient buffer length {len} does not match expected {expected}")]
    GradLengthMismatch { expected: usize, len: usize },
    #[error("weight buffer length {len} does not match kernel geometry {expected}")]
    WeightLengthMismatch { expected: usize, len: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, d, h, w }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.spatial()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn same_batch_spatial(&self, other: &Shape5) -> bool {
        self.n == other.n && self.d == other.d && self.h == other.h && self.w == other.w
    }

    pub fn with_channels(&self, c: usize) -> Shape5 {
        Shape5 { c, ..*self }
    }
}

/// Element scalar for tensor values and activation gradients. Production
/// forward/training runs at f32; the public primitive API carries f64
/// gradient buffers; the gradient-check suite instantiates the same kernels
/// end-to-end at f64. Weight/bias gradients accumulate in f64 regardless.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + core::ops::Add<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::AddAssign
    + core::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    /// Whether this type supports the packed-key pooling fast path.
    const POOL_KEYABLE: bool = false;
    fn from_f32(x: f32) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool {
        self.to_f64().is_finite()
    }
    /// Order-preserving 32-bit image of the value (fast pooling path only).
    fn pool_ord32(self) -> u32 {
        unreachable!("pool_ord32 on a non-keyable scalar")
    }
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const POOL_KEYABLE: bool = true;
    #[inline]
    fn from_f32(x: f32) -> f32 {
        x
    }
    #[inline]
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn pool_ord32(self) -> u32 {
        // branchless order-preserving bijection on the f32 bit pattern
        let b = self.to_bits();
        b ^ ((((b as i32) >> 31) as u32) | 0x8000_0000)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    #[inline]
    fn from_f32(x: f32) -> f64 {
        x as f64
    }
    #[inline]
    fn from_f64(x: f64) -> f64 {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Rank-5 value tensor with an optional same-shape 64-bit gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<V: Scalar = f32> {
    shape: Shape5,
    values: Vec<V>,
    grad: Option<Vec<f64>>,
}

impl<V: Scalar> Tensor5<V> {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 { shape, values: vec![V::ZERO; shape.len()], grad: None }
    }

    pub fn from_vec(shape: Shape5, values: Vec<V>) -> Result<Self, TensorError> {
        if values.len() != shape.len() {
            return Err(TensorError::LengthMismatch { shape, len: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite_val()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Tensor5 { shape, values, grad: None })
    }

    #[inline]
    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    #[inline]
    pub fn values(&self) -> &[V] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [V] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Allocate (zeroed) the gradient buffer if absent and return it.
    pub fn ensure_grad(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.shape.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<(), TensorError> {
        if g.len() != self.shape.len() {
            return Err(TensorError::GradLengthMismatch { expected: self.shape.len(), len: g.len() });
        }
        let buf = self.ensure_grad();
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
        Ok(())
    }

    /// Slice out one batch element as an N=1 tensor (values copied).
    pub fn batch_item(&self, n: usize) -> Tensor5<V> {
        let per = self.shape.c * self.shape.spatial();
        let shape = Shape5 { n: 1, ..self.shape };
        Tensor5 { shape, values: self.values[n * per..(n + 1) * per].to_vec(), grad: None }
    }

    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[V] {
        let sp = self.shape.spatial();
        let base = (n * self.shape.c + c) * sp;
        &self.values[base..base + sp]
    }

}

/// Same-padded stride-1 conv kernel: weights (C_out, C_in, k_d, k_h, k_w),
/// one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub c_out: usize,
    pub c_in: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn new(
        c_out: usize,
        c_in: usize,
        k: (usize, usize, usize),
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let p = ConvParams { c_out, c_in, kd: k.0, kh: k.1, kw: k.2, weights, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            c_out,
            c_in,
            kd: k,
            kh: k,
            kw: k,
            weights: vec![0.0; c_out * c_in * k * k * k],
            bias: vec![0.0; c_out],
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kd % 2 == 0 || self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(TensorError::EvenKernelDim(self.kd, self.kh, self.kw));
        }
        let expected = self.c_out * self.c_in * self.kd * self.kh * self.kw;
        if self.weights.len() != expected {
            return Err(TensorError::WeightLengthMismatch { expected, len: self.weights.len() });
        }
        if self.bias.len() != self.c_out {
            return Err(TensorError::WeightLengthMismatch { expected: self.c_out, len: self.bias.len() });
        }
        if let Some(i) = self.weights.iter().chain(self.bias.iter()).position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(())
    }

    #[inline]
    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.kd == 1 && self.kh == 1 && self.kw == 1
    }
}

// ---------------------------------------------------------------------------
// inner loops
// ---------------------------------------------------------------------------

#[inline]
fn saxpy<G: Scalar>(out: &mut [G], inp: &[G], w: G) {
    for (o, i) in out.iter_mut().zip(inp.iter()) {
        *o += w * *i;
    }
}

/// Dot product accumulated into f64. Eight fixed lanes keep the summation
/// order deterministic while still vectorizing.
#[inline]
fn dot_to_f64<G: Scalar>(a: &[G], g: &[G]) -> f64 {
    debug_assert_eq!(a.len(), g.len());
    let mut lanes = [G::ZERO; 8];
    let mut ia = a.chunks_exact(8);
    let mut ig = g.chunks_exact(8);
    for (ca, cg) in (&mut ia).zip(&mut ig) {
        for j in 0..8 {
            lanes[j] += ca[j] * cg[j];
        }
    }
    let mut tail = G::ZERO;
    for (x, y) in ia.remainder().iter().zip(ig.remainder()) {
        tail += *x * *y;
    }
    let mut s = 0.0f64;
    for l in lanes {
        s += l.to_f64();
    }
    s + tail.to_f64()
}

#[inline]
fn sum_to_f64<G: Scalar>(g: &[G]) -> f64 {
    let mut lanes = [G::ZERO; 8];
    let mut it = g.chunks_exact(8);
    for c in &mut it {
        for j in 0..8 {
            lanes[j] += c[j];
        }
    }
    let mut tail = G::ZERO;
    for &v in it.remainder() {
        tail += v;
    }
    let mut s = 0.0f64;
    for l in lanes {
        s += l.to_f64();
    }
    s + tail.to_f64()
}

// ---------------------------------------------------------------------------
// padded plane stacks
// ---------------------------------------------------------------------------

/// Geometry of an apron-padded plane stack: `d` planes of `(h+2rh) x (w+2rw)`
/// plus one full plane of margin at each end so any in-plane shifted slab
/// access stays in bounds.
#[derive(Clone, Copy)]
struct PadGeom {
    d: usize,
    h: usize,
    w: usize,
    rh: usize,
    rw: usize,
    pw: usize,
    psz: usize,
}

impl PadGeom {
    fn new(d: usize, h: usize, w: usize, rh: usize, rw: usize) -> Self {
        let pw = w + 2 * rw;
        let ph = h + 2 * rh;
        PadGeom { d, h, w, rh, rw, pw, psz: ph * pw }
    }

    #[inline]
    fn margin(&self) -> usize {
        self.psz
    }

    /// Total buffer length for one channel.
    #[inline]
    fn channel_len(&self) -> usize {
        self.d * self.psz + 2 * self.margin()
    }

    /// Start of plane `z` within a channel buffer.
    #[inline]
    fn plane(&self, z: usize) -> usize {
        self.margin() + z * self.psz
    }

    /// Copy an unpadded channel (d*h*w) into a zeroed padded buffer; the f64
    /// routing is exact for every (f32|f64) -> (f32|f64) pairing used here.
    fn pad_channel<S: Scalar, D: Scalar>(&self, src: &[S], dst: &mut [D]) {
        for z in 0..self.d {
            for y in 0..self.h {
                let po = self.plane(z) + (y + self.rh) * self.pw + self.rw;
                let so = (z * self.h + y) * self.w;
                for x in 0..self.w {
                    dst[po + x] = D::from_f64(src[so + x].to_f64());
                }
            }
        }
    }

    /// Read the interior back out, applying bias and optional ReLU.
    fn strip_bias_relu<V: Scalar>(&self, src: &[V], bias: V, relu: bool, dst: &mut [V]) {
        for z in 0..self.d {
            for y in 0..self.h {
                let po = self.plane(z) + (y + self.rh) * self.pw + self.rw;
                let so = (z * self.h + y) * self.w;
                if relu {
                    for x in 0..self.w {
                        let v = src[po + x] + bias;
                        dst[so + x] = if v > V::ZERO { v } else { V::ZERO };
                    }
                } else {
                    for x in 0..self.w {
                        dst[so + x] = src[po + x] + bias;
                    }
                }
            }
        }
    }

    fn strip<G: Scalar>(&self, src: &[G], dst: &mut [G]) {
        for z in 0..self.d {
            for y in 0..self.h {
                let po = self.plane(z) + (y + self.rh) * self.pw + self.rw;
                let so = (z * self.h + y) * self.w;
                dst[so..so + self.w].copy_from_slice(&src[po..po + self.w]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

fn check_conv<V: Scalar>(x: &Tensor5<V>, p: &ConvParams) -> Result<(), TensorError> {
    p.validate()?;
    if x.shape.c != p.c_in {
        return Err(TensorError::ChannelMismatch { input: x.shape.c, kernel: p.c_in });
    }
    Ok(())
}

/// Same-padded stride-1 3-D convolution; output shape (N, C_out, D, H, W).
pub fn conv3d<V: Scalar>(x: &Tensor5<V>, p: &ConvParams) -> Result<Tensor5<V>, TensorError> {
    conv3d_fused(x, p, false)
}

/// conv3d with the following ReLU fused into the output write.
pub(crate) fn conv3d_fused<V: Scalar>(
    x: &Tensor5<V>,
    p: &ConvParams,
    relu: bool,
) -> Result<Tensor5<V>, TensorError> {
    check_conv(x, p)?;
    let s = x.shape;
    let mut out = Tensor5::zeros(s.with_channels(p.c_out));
    if p.is_pointwise() {
        conv1_fwd(x, p, relu, &mut out);
    } else {
        convk_fwd(x, p, relu, &mut out);
    }
    Ok(out)
}

fn conv1_fwd<V: Scalar>(x: &Tensor5<V>, p: &ConvParams, relu: bool, out: &mut Tensor5<V>) {
    let s = x.shape;
    let sp = s.spatial();
    let mut acc = vec![V::ZERO; sp];
    for n in 0..s.n {
        for co in 0..p.c_out {
            let bias = V::from_f32(p.bias[co]);
            acc.iter_mut().for_each(|v| *v = bias);
            for ci in 0..p.c_in {
                let w = p.weights[co * p.c_in + ci];
                if w != 0.0 {
                    saxpy(&mut acc, x.channel(n, ci), V::from_f32(w));
                }
            }
            let dst_base = (n * p.c_out + co) * sp;
            let dst = &mut out.values[dst_base..dst_base + sp];
            if relu {
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = if *a > V::ZERO { *a } else { V::ZERO };
                }
            } else {
                dst.copy_from_slice(&acc);
            }
        }
    }
}

fn convk_fwd<V: Scalar>(x: &Tensor5<V>, p: &ConvParams, relu: bool, out: &mut Tensor5<V>) {
    let s = x.shape;
    let (rd, rh, rw) = (p.kd / 2, p.kh / 2, p.kw / 2);
    let geom = PadGeom::new(s.d, s.h, s.w, rh, rw);
    let clen = geom.channel_len();
    let sp = s.spatial();

    let mut padded_in = vec![V::ZERO; p.c_in * clen];
    let mut padded_out = vec![V::ZERO; clen];

    for n in 0..s.n {
        for ci in 0..p.c_in {
            let seg = &mut padded_in[ci * clen..(ci + 1) * clen];
            seg.iter_mut().for_each(|v| *v = V::ZERO);
            geom.pad_channel(x.channel(n, ci), seg);
        }
        for co in 0..p.c_out {
            padded_out.iter_mut().for_each(|v| *v = V::ZERO);
            for ci in 0..p.c_in {
                let seg = &padded_in[ci * clen..(ci + 1) * clen];
                for kz in 0..p.kd {
                    let dz = kz as isize - rd as isize;
                    let z0 = if dz < 0 { (-dz) as usize } else { 0 };
                    let z1 = if dz > 0 { s.d.saturating_sub(dz as usize) } else { s.d };
                    if z0 >= z1 {
                        continue;
                    }
                    let run = (z1 - z0) * geom.psz;
                    for ky in 0..p.kh {
                        let dy = ky as isize - rh as isize;
                        for kx in 0..p.kw {
                            let dx = kx as isize - rw as isize;
                            let w = p.weights
                                [(((co * p.c_in + ci) * p.kd + kz) * p.kh + ky) * p.kw + kx];
                            if w == 0.0 {
                                continue;
                            }
                            let shift = dy * geom.pw as isize + dx;
                            let src_start =
                                (geom.plane(z0) as isize + dz * geom.psz as isize + shift) as usize;
                            let dst_start = geom.plane(z0);
                            saxpy(
                                &mut padded_out[dst_start..dst_start + run],
                                &seg[src_start..src_start + run],
                                V::from_f32(w),
                            );
                        }
                    }
                }
            }
            let dst_base = (n * p.c_out + co) * sp;
            geom.strip_bias_relu(
                &padded_out,
                V::from_f32(p.bias[co]),
                relu,
                &mut out.values[dst_base..dst_base + sp],
            );
        }
    }
}

/// Gradients produced by [`conv3d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of [`conv3d`]: gradients w.r.t. input, weights, and bias.
/// `grad_out` has the output's shape. Satisfies the adjoint relation with the
/// forward map to first order.
pub fn conv3d_backward<V: Scalar>(
    x: &Tensor5<V>,
    p: &ConvParams,
    grad_out: &[f64],
) -> Result<ConvGrads, TensorError> {
    check_conv(x, p)?;
    let expect = x.shape.with_channels(p.c_out).len();
    if grad_out.len() != expect {
        return Err(TensorError::GradLengthMismatch { expected: expect, len: grad_out.len() });
    }
    let (dx, dw, db) = conv3d_bwd_generic::<V, f64>(x, p, grad_out, true);
    Ok(ConvGrads { input: dx.unwrap(), weights: dw, bias: db })
}

/// Generic backward used by the public API (G = f64), the training path
/// (V = G = f32), and the gradient suite (V = G = f64). Weight/bias grads are
/// f64 regardless.
pub(crate) fn conv3d_bwd_generic<V: Scalar, G: Scalar>(
    x: &Tensor5<V>,
    p: &ConvParams,
    grad_out: &[G],
    want_input: bool,
) -> (Option<Vec<G>>, Vec<f64>, Vec<f64>) {
    if p.is_pointwise() {
        conv1_bwd(x, p, grad_out, want_input)
    } else {
        convk_bwd(x, p, grad_out, want_input)
    }
}

fn conv1_bwd<V: Scalar, G: Scalar>(
    x: &Tensor5<V>,
    p: &ConvParams,
    grad_out: &[G],
    want_input: bool,
) -> (Option<Vec<G>>, Vec<f64>, Vec<f64>) {
    let s = x.shape;
    let sp = s.spatial();
    let mut dw = vec![0.0f64; p.weights.len()];
    let mut db = vec![0.0f64; p.c_out];
    let mut dx = if want_input { Some(vec![G::ZERO; s.len()]) } else { None };
    let mut xg = vec![G::ZERO; sp];
    for n in 0..s.n {
        for ci in 0..p.c_in {
            for (d, &v) in xg.iter_mut().zip(x.channel(n, ci)) {
                *d = G::from_f64(v.to_f64());
            }
            for co in 0..p.c_out {
                let g = &grad_out[(n * p.c_out + co) * sp..(n * p.c_out + co + 1) * sp];
                if ci == 0 {
                    db[co] += sum_to_f64(g);
                }
                dw[co * p.c_in + ci] += dot_to_f64(&xg, g);
                if let Some(dx) = dx.as_mut() {
                    let w = G::from_f32(p.weights[co * p.c_in + ci]);
                    let base = (n * s.c + ci) * sp;
                    saxpy(&mut dx[base..base + sp], g, w);
                }
            }
        }
    }
    (dx, dw, db)
}

fn convk_bwd<V: Scalar, G: Scalar>(
    x: &Tensor5<V>,
    p: &ConvParams,
    grad_out: &[G],
    want_input: bool,
) -> (Option<Vec<G>>, Vec<f64>, Vec<f64>) {
    let s = x.shape;
    let (rd, rh, rw) = (p.kd / 2, p.kh / 2, p.kw / 2);
    let geom = PadGeom::new(s.d, s.h, s.w, rh, rw);
    let clen = geom.channel_len();
    let sp = s.spatial();

    let mut dw = vec![0.0f64; p.weights.len()];
    let mut db = vec![0.0f64; p.c_out];
    let mut dx = if want_input { Some(vec![G::ZERO; s.len()]) } else { None };

    let mut padded_x = vec![G::ZERO; p.c_in * clen];
    let mut padded_g = vec![G::ZERO; clen];
    let mut padded_dx = vec![G::ZERO; if want_input { p.c_in * clen } else { 0 }];

    for n in 0..s.n {
        for ci in 0..p.c_in {
            let seg = &mut padded_x[ci * clen..(ci + 1) * clen];
            seg.iter_mut().for_each(|v| *v = G::ZERO);
            geom.pad_channel(x.channel(n, ci), seg);
        }
        if want_input {
            padded_dx.iter_mut().for_each(|v| *v = G::ZERO);
        }
        for co in 0..p.c_out {
            let g = &grad_out[(n * p.c_out + co) * sp..(n * p.c_out + co + 1) * sp];
            db[co] += sum_to_f64(g);
            padded_g.iter_mut().for_each(|v| *v = G::ZERO);
            geom.pad_channel(g, &mut padded_g);
            for ci in 0..p.c_in {
                let xseg = &padded_x[ci * clen..(ci + 1) * clen];
                for kz in 0..p.kd {
                    let dz = kz as isize - rd as isize;
                    let z0 = if dz < 0 { (-dz) as usize } else { 0 };
                    let z1 = if dz > 0 { s.d.saturating_sub(dz as usize) } else { s.d };
                    if z0 >= z1 {
                        continue;
                    }
                    let run = (z1 - z0) * geom.psz;
                    let g_start = geom.plane(z0);
                    for ky in 0..p.kh {
                        let dy = ky as isize - rh as isize;
                        for kx in 0..p.kw {
                            let dx_off = kx as isize - rw as isize;
                            let widx = (((co * p.c_in + ci) * p.kd + kz) * p.kh + ky) * p.kw + kx;
                            let shift = dy * geom.pw as isize + dx_off;
                            let x_start =
                                (geom.plane(z0) as isize + dz * geom.psz as isize + shift) as usize;
                            // dW = <grad_out, shifted input>; zero aprons of
                            // padded_g cancel the apron terms.
                            dw[widx] += dot_to_f64(
                                &xseg[x_start..x_start + run],
                                &padded_g[g_start..g_start + run],
                            );
                            if want_input {
                                let w = G::from_f32(p.weights[widx]);
                                if w != G::ZERO {
                                    let dseg = &mut padded_dx[ci * clen..(ci + 1) * clen];
                                    let d_start = (geom.plane(z0) as isize
                                        + dz * geom.psz as isize
                                        + shift) as usize;
                                    saxpy(
                                        &mut dseg[d_start..d_start + run],
                                        &padded_g[g_start..g_start + run],
                                        w,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            for ci in 0..p.c_in {
                let base = (n * s.c + ci) * sp;
                geom.strip(&padded_dx[ci * clen..(ci + 1) * clen], &mut dx[base..base + sp]);
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

/// Elementwise max(x, 0).
pub fn relu<V: Scalar>(x: &Tensor5<V>) -> Tensor5<V> {
    let values = x.values.iter().map(|&v| if v > V::ZERO { v } else { V::ZERO }).collect();
    Tensor5 { shape: x.shape, values, grad: None }
}

/// Pass-through where x > 0, zero elsewhere.
pub fn relu_backward<V: Scalar>(x: &Tensor5<V>, grad_out: &[f64]) -> Result<Vec<f64>, TensorError> {
    if grad_out.len() != x.shape.len() {
        return Err(TensorError::GradLengthMismatch { expected: x.shape.len(), len: grad_out.len() });
    }
    Ok(relu_bwd_generic(&x.values, grad_out))
}

pub(crate) fn relu_bwd_generic<V: Scalar, G: Scalar>(x_values: &[V], grad_out: &[G]) -> Vec<G> {
    x_values
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > V::ZERO { g } else { G::ZERO })
        .collect()
}

/// ReLU mask applied in place onto a gradient buffer: keep where the cached
/// post-activation output is positive.
pub(crate) fn relu_mask_inplace<V: Scalar, G: Scalar>(post: &[V], grad: &mut [G]) {
    for (g, &v) in grad.iter_mut().zip(post) {
        if !(v > V::ZERO) {
            *g = G::ZERO;
        }
    }
}

// ---------------------------------------------------------------------------
// maxpool3d
// ---------------------------------------------------------------------------

/// 3^3 stride-1 max pooling with "same" extent; out-of-bounds positions act
/// as negative infinity, so borders take the in-bounds maximum.
pub fn maxpool3d<V: Scalar>(x: &Tensor5<V>) -> Tensor5<V> {
    let mut out = Tensor5::zeros(x.shape);
    for n in 0..x.shape.n {
        for c in 0..x.shape.c {
            let base = (n * x.shape.c + c) * x.shape.spatial();
            pool_separable(
                x.shape,
                x.channel(n, c),
                &mut out.values[base..base + x.shape.spatial()],
            );
        }
    }
    out
}

/// Separable box max: per-axis passes compose to the 3^3 window max.
fn pool_separable<V: Scalar>(s: Shape5, src: &[V], dst: &mut [V]) {
    let (d, h, w) = (s.d, s.h, s.w);
    let mut tmp1 = vec![V::ZERO; d * h * w];
    // along W
    for r in 0..d * h {
        let row = &src[r * w..(r + 1) * w];
        let out = &mut tmp1[r * w..(r + 1) * w];
        for x in 0..w {
            let mut m = row[x];
            if x > 0 && row[x - 1] > m {
                m = row[x - 1];
            }
            if x + 1 < w && row[x + 1] > m {
                m = row[x + 1];
            }
            out[x] = m;
        }
    }
    // along H
    let mut tmp2 = vec![V::ZERO; d * h * w];
    for z in 0..d {
        for y in 0..h {
            let c = &tmp1[(z * h + y) * w..(z * h + y + 1) * w];
            let up = if y > 0 { Some(&tmp1[(z * h + y - 1) * w..(z * h + y) * w]) } else { None };
            let dn =
                if y + 1 < h { Some(&tmp1[(z * h + y + 1) * w..(z * h + y + 2) * w]) } else { None };
            let out = &mut tmp2[(z * h + y) * w..(z * h + y + 1) * w];
            out.copy_from_slice(c);
            if let Some(u) = up {
                for (o, &v) in out.iter_mut().zip(u) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            if let Some(dv) = dn {
                for (o, &v) in out.iter_mut().zip(dv) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    // along D
    let plane = h * w;
    for z in 0..d {
        let out = &mut dst[z * plane..(z + 1) * plane];
        out.copy_from_slice(&tmp2[z * plane..(z + 1) * plane]);
        if z > 0 {
            for (o, &v) in out.iter_mut().zip(&tmp2[(z - 1) * plane..z * plane]) {
                if v > *o {
                    *o = v;
                }
            }
        }
        if z + 1 < d {
            for (o, &v) in out.iter_mut().zip(&tmp2[(z + 1) * plane..(z + 2) * plane]) {
                if v > *o {
                    *o = v;
                }
            }
        }
    }
}

/// maxpool plus, per output voxel, the linear spatial index of the winning
/// input voxel (first in (d,h,w) lexicographic order on ties).
///
/// Runs as three separable first-wins passes (W, then H, then D). Deciding
/// the outer axis last with earliest-candidate-wins reproduces the global
/// (d,h,w)-lex tie-break: a tie across planes resolves to the smaller d, a
/// tie across rows within a plane to the smaller h, and within a row to the
/// smaller w.
///
/// For f32 the passes run on packed u64 keys (order-preserving value image in
/// the high bits, complemented index in the low bits), so every max is a
/// single branchless comparison and the index tie-break comes for free.
pub(crate) fn maxpool3d_with_argmax<V: Scalar>(x: &Tensor5<V>) -> (Tensor5<V>, Vec<u32>) {
    if V::POOL_KEYABLE {
        return maxpool_argmax_keyed(x);
    }
    maxpool_argmax_generic(x)
}

const POOL_IDX_MASK: u64 = 0x7FFF_FFFF;

fn maxpool_argmax_keyed<V: Scalar>(x: &Tensor5<V>) -> (Tensor5<V>, Vec<u32>) {
    let s = x.shape;
    let sp = s.spatial();
    assert!(sp as u64 <= POOL_IDX_MASK, "spatial extent too large for pooling keys");
    let (d, h, w) = (s.d, s.h, s.w);
    let plane = h * w;
    let mut out = Tensor5::zeros(s);
    let mut arg = vec![0u32; s.len()];
    let mut keys = vec![0u64; sp];
    let mut k1 = vec![0u64; sp];
    let mut k2 = vec![0u64; sp];
    for nc in 0..s.n * s.c {
        let src = &x.values[nc * sp..(nc + 1) * sp];
        // keys: value image high, complemented index low; max picks the
        // greater value and the smaller index on ties
        for (i, (k, &v)) in keys.iter_mut().zip(src).enumerate() {
            *k = ((v.pool_ord32() as u64) << 31) | (POOL_IDX_MASK - i as u64);
        }
        // along W
        for r in 0..d * h {
            let row = &keys[r * w..(r + 1) * w];
            let o = &mut k1[r * w..(r + 1) * w];
            o[0] = row[0];
            o[1..].copy_from_slice(&row[..w - 1]);
            for xx in 0..w {
                o[xx] = o[xx].max(row[xx]);
            }
            for xx in 0..w - 1 {
                o[xx] = o[xx].max(row[xx + 1]);
            }
        }
        // along H
        for z in 0..d {
            for y in 0..h {
                let cur = (z * h + y) * w;
                let first = if y > 0 { cur - w } else { cur };
                k2[cur..cur + w].copy_from_slice(&k1[first..first + w]);
                if y > 0 {
                    for i in 0..w {
                        k2[cur + i] = k2[cur + i].max(k1[cur + i]);
                    }
                }
                if y + 1 < h {
                    for i in 0..w {
                        k2[cur + i] = k2[cur + i].max(k1[cur + w + i]);
                    }
                }
            }
        }
        // along D, decoding into outputs
        let vo = &mut out.values[nc * sp..(nc + 1) * sp];
        let ao = &mut arg[nc * sp..(nc + 1) * sp];
        for z in 0..d {
            let cur = z * plane;
            let first = if z > 0 { cur - plane } else { cur };
            // reuse keys[] as the per-plane result buffer
            keys[cur..cur + plane].copy_from_slice(&k2[first..first + plane]);
            if z > 0 {
                for i in 0..plane {
                    keys[cur + i] = keys[cur + i].max(k2[cur + i]);
                }
            }
            if z + 1 < d {
                for i in 0..plane {
                    keys[cur + i] = keys[cur + i].max(k2[cur + plane + i]);
                }
            }
        }
        for i in 0..sp {
            let k = keys[i];
            ao[i] = (POOL_IDX_MASK - (k & POOL_IDX_MASK)) as u32;
            // invert the order-preserving bit transform instead of gathering
            let ord = (k >> 31) as u32;
            let bits = ord ^ ((((!ord) as i32 >> 31) as u32) | 0x8000_0000);
            vo[i] = V::from_f32(f32::from_bits(bits));
        }
        let _ = src;
    }
    (out, arg)
}

fn maxpool_argmax_generic<V: Scalar>(x: &Tensor5<V>) -> (Tensor5<V>, Vec<u32>) {
    let s = x.shape;
    let sp = s.spatial();
    let (d, h, w) = (s.d, s.h, s.w);
    let mut out = Tensor5::zeros(s);
    let mut arg = vec![0u32; s.len()];
    let mut val1 = vec![V::ZERO; sp];
    let mut idx1 = vec![0u32; sp];
    let mut val2 = vec![V::ZERO; sp];
    let mut idx2 = vec![0u32; sp];
    for nc in 0..s.n * s.c {
        let src = &x.values[nc * sp..(nc + 1) * sp];
        // along W: first-wins over {x-1, x, x+1}
        for r in 0..d * h {
            let row = &src[r * w..(r + 1) * w];
            let vo = &mut val1[r * w..(r + 1) * w];
            let io = &mut idx1[r * w..(r + 1) * w];
            let base = (r * w) as u32;
            vo[0] = row[0];
            io[0] = base;
            for xx in 1..w {
                vo[xx] = row[xx - 1];
                io[xx] = base + xx as u32 - 1;
            }
            for xx in 1..w {
                if row[xx] > vo[xx] {
                    vo[xx] = row[xx];
                    io[xx] = base + xx as u32;
                }
            }
            for xx in 0..w - 1 {
                if row[xx + 1] > vo[xx] {
                    vo[xx] = row[xx + 1];
                    io[xx] = base + xx as u32 + 1;
                }
            }
        }
        // along H: first-wins over {y-1, y, y+1} of the W results
        for z in 0..d {
            for y in 0..h {
                let cur = (z * h + y) * w;
                let first = if y > 0 { cur - w } else { cur };
                val2[cur..cur + w].copy_from_slice(&val1[first..first + w]);
                idx2[cur..cur + w].copy_from_slice(&idx1[first..first + w]);
                if y > 0 {
                    for i in 0..w {
                        if val1[cur + i] > val2[cur + i] {
                            val2[cur + i] = val1[cur + i];
                            idx2[cur + i] = idx1[cur + i];
                        }
                    }
                }
                if y + 1 < h {
                    let nxt = cur + w;
                    for i in 0..w {
                        if val1[nxt + i] > val2[cur + i] {
                            val2[cur + i] = val1[nxt + i];
                            idx2[cur + i] = idx1[nxt + i];
                        }
                    }
                }
            }
        }
        // along D: first-wins over {z-1, z, z+1} of the H results
        let plane = h * w;
        let vo = &mut out.values[nc * sp..(nc + 1) * sp];
        let ao = &mut arg[nc * sp..(nc + 1) * sp];
        for z in 0..d {
            let cur = z * plane;
            let first = if z > 0 { cur - plane } else { cur };
            vo[cur..cur + plane].copy_from_slice(&val2[first..first + plane]);
            ao[cur..cur + plane].copy_from_slice(&idx2[first..first + plane]);
            if z > 0 {
                for i in 0..plane {
                    if val2[cur + i] > vo[cur + i] {
                        vo[cur + i] = val2[cur + i];
                        ao[cur + i] = idx2[cur + i];
                    }
                }
            }
            if z + 1 < d {
                let nxt = cur + plane;
                for i in 0..plane {
                    if val2[nxt + i] > vo[cur + i] {
                        vo[cur + i] = val2[nxt + i];
                        ao[cur + i] = idx2[nxt + i];
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Route each output-voxel gradient to its window argmax (first-index
/// tie-break in (d,h,w) order).
pub fn maxpool3d_backward<V: Scalar>(
    x: &Tensor5<V>,
    grad_out: &[f64],
) -> Result<Vec<f64>, TensorError> {
    if grad_out.len() != x.shape.len() {
        return Err(TensorError::GradLengthMismatch { expected: x.shape.len(), len: grad_out.len() });
    }
    let (_, arg) = maxpool3d_with_argmax(x);
    Ok(pool_bwd_scatter(x.shape, &arg, grad_out))
}

pub(crate) fn pool_bwd_scatter<G: Scalar>(s: Shape5, argmax: &[u32], grad_out: &[G]) -> Vec<G> {
    let sp = s.spatial();
    let mut dx = vec![G::ZERO; s.len()];
    for nc in 0..s.n * s.c {
        let base = nc * sp;
        for i in 0..sp {
            let g = grad_out[base + i];
            dx[base + argmax[base + i] as usize] += g;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// concat
// ---------------------------------------------------------------------------

/// Concatenate along the channel axis; `a`'s channels come first.
pub fn concat_channels<V: Scalar>(a: &Tensor5<V>, b: &Tensor5<V>) -> Result<Tensor5<V>, TensorError> {
    if !a.shape.same_batch_spatial(&b.shape) {
        return Err(TensorError::ConcatMismatch { a: a.shape, b: b.shape });
    }
    let sp = a.shape.spatial();
    let mut out = Tensor5::zeros(a.shape.with_channels(a.shape.c + b.shape.c));
    for n in 0..a.shape.n {
        let dst = &mut out.values
            [n * (a.shape.c + b.shape.c) * sp..(n + 1) * (a.shape.c + b.shape.c) * sp];
        dst[..a.shape.c * sp].copy_from_slice(&a.values[n * a.shape.c * sp..(n + 1) * a.shape.c * sp]);
        dst[a.shape.c * sp..].copy_from_slice(&b.values[n * b.shape.c * sp..(n + 1) * b.shape.c * sp]);
    }
    Ok(out)
}

/// Split an upstream gradient back into the two concat inputs.
pub fn concat_channels_backward(
    shape_a: Shape5,
    shape_b: Shape5,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    concat_bwd_generic(shape_a, shape_b, grad_out)
}

pub(crate) fn concat_bwd_generic<G: Scalar>(
    shape_a: Shape5,
    shape_b: Shape5,
    grad_out: &[G],
) -> Result<(Vec<G>, Vec<G>), TensorError> {
    if !shape_a.same_batch_spatial(&shape_b) {
        return Err(TensorError::ConcatMismatch { a: shape_a, b: shape_b });
    }
    let sp = shape_a.spatial();
    let ct = shape_a.c + shape_b.c;
    if grad_out.len() != shape_a.n * ct * sp {
        return Err(TensorError::GradLengthMismatch {
            expected: shape_a.n * ct * sp,
            len: grad_out.len(),
        });
    }
    let mut ga = vec![G::ZERO; shape_a.len()];
    let mut gb = vec![G::ZERO; shape_b.len()];
    for n in 0..shape_a.n {
        let g = &grad_out[n * ct * sp..(n + 1) * ct * sp];
        ga[n * shape_a.c * sp..(n + 1) * shape_a.c * sp].copy_from_slice(&g[..shape_a.c * sp]);
        gb[n * shape_b.c * sp..(n + 1) * shape_b.c * sp].copy_from_slice(&g[shape_a.c * sp..]);
    }
    Ok((ga, gb))
}

// ---------------------------------------------------------------------------
// mse
// ---------------------------------------------------------------------------

/// Mean over all elements of the squared difference.
pub fn mse_loss<V: Scalar>(pred: &Tensor5<V>, target: &Tensor5<V>) -> Result<f64, TensorError> {
    if pred.shape != target.shape {
        return Err(TensorError::ShapeMismatch { a: pred.shape, b: target.shape });
    }
    let mut lanes = [0.0f64; 4];
    let mut ip = pred.values.chunks_exact(4);
    let mut it = target.values.chunks_exact(4);
    for (cp, ct) in (&mut ip).zip(&mut it) {
        for j in 0..4 {
            let d = cp[j].to_f64() - ct[j].to_f64();
            lanes[j] += d * d;
        }
    }
    let mut tail = 0.0f64;
    for (p, t) in ip.remainder().iter().zip(it.remainder()) {
        let d = p.to_f64() - t.to_f64();
        tail += d * d;
    }
    let sum = lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail;
    Ok(sum / pred.shape.len() as f64)
}

/// d(mse)/d(pred) = 2 (pred - target) / count.
pub fn mse_loss_backward<V: Scalar>(
    pred: &Tensor5<V>,
    target: &Tensor5<V>,
) -> Result<Vec<f64>, TensorError> {
    if pred.shape != target.shape {
        return Err(TensorError::ShapeMismatch { a: pred.shape, b: target.shape });
    }
    Ok(mse_bwd_generic(&pred.values, &target.values))
}

pub(crate) fn mse_bwd_generic<V: Scalar, G: Scalar>(pred: &[V], target: &[V]) -> Vec<G> {
    let scale = 2.0 / pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| G::from_f64((p.to_f64() - t.to_f64()) * scale))
        .collect()
}
