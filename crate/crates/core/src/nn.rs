//! A small convolutional network, written by hand: direct channels-last
//! convolutions, max pooling, two dense heads on a shared conv stack, and
//! exact analytic gradients.
//!
//! The scalar type is generic. Training uses `f32` for speed; the gradient
//! tests instantiate the very same code at `f64` so central differences
//! have enough precision to be a real oracle. Inner loops lean on
//! `mul_add`, which LLVM turns into vector FMA when the target has it
//! (`.cargo/config.toml` builds for the native CPU).
//!
//! All loops run in a fixed order and nothing here spawns threads, so a
//! given seed reproduces training bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;

/// Floating-point scalar the network can be instantiated at.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn mul_add(self, a: Self, b: Self) -> Self {
                self.mul_add(a, b)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z.to_f64() >= 0.0 {
        S::ONE / (S::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::ONE + e)
    }
}

/// Probabilities are clamped to this range inside the cross-entropy so the
/// loss stays finite for saturated outputs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const HEAD_COUNT: usize = 2;
pub const OUTPUTS: usize = 3;

/// Architecture descriptor. Every conv layer is stride 1, valid padding,
/// ReLU, then 2x2 max pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Square input side, pixels; channels are fixed at 3.
    pub input_px: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub dense_hidden: usize,
    /// Keep probability of the dropout between the dense layers.
    pub dropout_keep: f64,
}

#[derive(Copy, Clone, Debug)]
struct Stage {
    in_px: usize,
    in_ch: usize,
    k: usize,
    out_ch: usize,
    conv_px: usize,
    pool_px: usize,
}

impl NetSpec {
    /// The policy network: 150x150x3 input, three conv stages, 128-wide
    /// heads.
    pub fn full() -> Self {
        NetSpec {
            input_px: 150,
            conv_channels: vec![8, 16, 32],
            conv_kernels: vec![5, 5, 3],
            dense_hidden: 128,
            dropout_keep: 0.5,
        }
    }

    /// Shrunken variant for finite-difference gradient checks: same code
    /// paths, ~1.6k parameters.
    pub fn reduced() -> Self {
        NetSpec {
            input_px: 16,
            conv_channels: vec![4, 8],
            conv_kernels: vec![3, 3],
            dense_hidden: 16,
            dropout_keep: 0.5,
        }
    }

    fn stages(&self) -> Vec<Stage> {
        assert_eq!(self.conv_channels.len(), self.conv_kernels.len());
        assert!(!self.conv_channels.is_empty());
        assert!(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0);
        let mut px = self.input_px;
        let mut ch = 3;
        let mut out = Vec::new();
        for (&oc, &k) in self.conv_channels.iter().zip(&self.conv_kernels) {
            assert!(px > k, "input {px} too small for {k}x{k} kernel");
            let conv_px = px - k + 1;
            let pool_px = conv_px / 2;
            assert!(pool_px > 0);
            out.push(Stage {
                in_px: px,
                in_ch: ch,
                k,
                out_ch: oc,
                conv_px,
                pool_px,
            });
            px = pool_px;
            ch = oc;
        }
        out
    }

    /// Length of the flattened activation feeding the dense heads.
    pub fn flat_len(&self) -> usize {
        let s = self.stages();
        let last = s.last().unwrap();
        last.pool_px * last.pool_px * last.out_ch
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for s in self.stages() {
            n += s.k * s.k * s.in_ch * s.out_ch + s.out_ch;
        }
        let flat = self.flat_len();
        n + HEAD_COUNT
            * (flat * self.dense_hidden + self.dense_hidden + self.dense_hidden * OUTPUTS + OUTPUTS)
    }

    pub fn input_len(&self) -> usize {
        self.input_px * self.input_px * 3
    }
}

/// Weights `[ky][kx][in_ch][out_ch]` plus per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<S> {
    pub w: Vec<S>,
    pub b: Vec<S>,
}

/// One subtask head: `flat -> hidden` (ReLU, dropout) `-> 3`.
/// Weight layout keeps the output dimension contiguous.
#[derive(Clone, Debug)]
pub struct DenseHead<S> {
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
}

/// Network parameters. The conv stack is stored once and used by both
/// heads, which is what makes it shared: there is no second copy to drift.
#[derive(Clone, Debug)]
pub struct Network<S> {
    pub spec: NetSpec,
    pub convs: Vec<ConvLayer<S>>,
    pub heads: [DenseHead<S>; 2],
}

impl<S: Scalar> Network<S> {
    /// Glorot-uniform weights, zero biases, drawn in a fixed order.
    pub fn init(spec: NetSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut glorot = |n: usize, fan_in: usize, fan_out: usize| -> Vec<S> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n)
                .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * a))
                .collect()
        };
        let convs = spec
            .stages()
            .iter()
            .map(|s| ConvLayer {
                w: glorot(
                    s.k * s.k * s.in_ch * s.out_ch,
                    s.k * s.k * s.in_ch,
                    s.k * s.k * s.out_ch,
                ),
                b: vec![S::ZERO; s.out_ch],
            })
            .collect();
        let flat = spec.flat_len();
        let hidden = spec.dense_hidden;
        let heads = [0, 1].map(|_| DenseHead {
            w1: glorot(flat * hidden, flat, hidden),
            b1: vec![S::ZERO; hidden],
            w2: glorot(hidden * OUTPUTS, hidden, OUTPUTS),
            b2: vec![S::ZERO; OUTPUTS],
        });
        Network { spec, convs, heads }
    }

    /// Same shapes, all zeros; used for gradients and optimizer state.
    pub fn zeroed(spec: NetSpec) -> Self {
        let convs = spec
            .stages()
            .iter()
            .map(|s| ConvLayer {
                w: vec![S::ZERO; s.k * s.k * s.in_ch * s.out_ch],
                b: vec![S::ZERO; s.out_ch],
            })
            .collect();
        let flat = spec.flat_len();
        let hidden = spec.dense_hidden;
        let heads = [0, 1].map(|_| DenseHead {
            w1: vec![S::ZERO; flat * hidden],
            b1: vec![S::ZERO; hidden],
            w2: vec![S::ZERO; hidden * OUTPUTS],
            b2: vec![S::ZERO; OUTPUTS],
        });
        Network { spec, convs, heads }
    }

    pub fn param_slices(&self) -> Vec<&[S]> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(c.w.as_slice());
            v.push(c.b.as_slice());
        }
        for h in &self.heads {
            v.push(h.w1.as_slice());
            v.push(h.b1.as_slice());
            v.push(h.w2.as_slice());
            v.push(h.b2.as_slice());
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v: Vec<&mut [S]> = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.w);
            v.push(&mut c.b);
        }
        for h in &mut self.heads {
            v.push(&mut h.w1);
            v.push(&mut h.b1);
            v.push(&mut h.w2);
            v.push(&mut h.b2);
        }
        v
    }

    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for s in self.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[S]) {
        let mut pos = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        }
        assert_eq!(pos, flat.len(), "flat parameter vector length");
    }

    pub fn zero_all(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(S::ZERO);
        }
    }
}

/// Reusable activation and gradient buffers for one network shape. Holding
/// these outside the network keeps forward/backward allocation-free.
pub struct Workspace<S> {
    /// Post-ReLU conv outputs per stage.
    conv_out: Vec<Vec<S>>,
    /// Post-pool outputs per stage; the last one is the flatten input.
    pooled: Vec<Vec<S>>,
    /// Winning 2x2 cell index per pooled element.
    argmax: Vec<Vec<u8>>,
    hidden_relu: Vec<S>,
    hidden_final: Vec<S>,
    drop_mask: Vec<bool>,
    dropout_sampled: bool,
    d_conv: Vec<Vec<S>>,
    d_pooled: Vec<Vec<S>>,
    d_hidden: Vec<S>,
    /// Per-layer scratch for transposed conv weights used by the
    /// input-gradient pass.
    wt: Vec<Vec<S>>,
}

impl<S: Scalar> Workspace<S> {
    /// FNV-1a hash of the discrete activation pattern the last forward
    /// produced: ReLU on/off bits, pooling argmax choices, dropout mask.
    /// Two forwards with equal fingerprints lie in the same smooth region
    /// of the network, where finite differences are trustworthy.
    pub fn activation_fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for layer in &self.conv_out {
            for v in layer {
                eat((v.to_f64() > 0.0) as u8);
            }
        }
        for layer in &self.argmax {
            for &a in layer {
                eat(a);
            }
        }
        for v in &self.hidden_relu {
            eat((v.to_f64() > 0.0) as u8);
        }
        for &m in &self.drop_mask {
            eat(m as u8);
        }
        eat(self.dropout_sampled as u8);
        h
    }

    pub fn new(spec: &NetSpec) -> Self {
        let stages = spec.stages();
        let conv_out: Vec<Vec<S>> = stages
            .iter()
            .map(|s| vec![S::ZERO; s.conv_px * s.conv_px * s.out_ch])
            .collect();
        let pooled: Vec<Vec<S>> = stages
            .iter()
            .map(|s| vec![S::ZERO; s.pool_px * s.pool_px * s.out_ch])
            .collect();
        let argmax = stages
            .iter()
            .map(|s| vec![0u8; s.pool_px * s.pool_px * s.out_ch])
            .collect();
        let wt = stages
            .iter()
            .map(|s| vec![S::ZERO; s.k * s.k * s.in_ch * s.out_ch])
            .collect();
        Workspace {
            d_conv: conv_out.clone(),
            d_pooled: pooled.clone(),
            conv_out,
            pooled,
            argmax,
            hidden_relu: vec![S::ZERO; spec.dense_hidden],
            hidden_final: vec![S::ZERO; spec.dense_hidden],
            drop_mask: vec![true; spec.dense_hidden],
            dropout_sampled: false,
            d_hidden: vec![S::ZERO; spec.dense_hidden],
            wt,
        }
    }
}

/// Convolution plus fused ReLU, accumulators held in registers. The const
/// channel width turns the innermost loop into straight-line vector code;
/// `conv_forward` dispatches the widths this crate actually uses.
#[inline(always)]
fn conv_fwd_oc<S: Scalar, const OC: usize, const K: usize>(
    input: &[S],
    in_px: usize,
    in_ch: usize,
    w: &[S],
    b: &[S],
    out: &mut [S],
) {
    let out_px = in_px - K + 1;
    let ni = K * in_ch;
    for oy in 0..out_px {
        for ox in 0..out_px {
            let mut acc = [S::ZERO; OC];
            acc.copy_from_slice(b);
            for ky in 0..K {
                let in_row = ((oy + ky) * in_px + ox) * in_ch;
                let irow = &input[in_row..in_row + ni];
                let wrow = &w[ky * ni * OC..(ky * ni + ni) * OC];
                for i in 0..ni {
                    let v = irow[i];
                    let ws = &wrow[i * OC..i * OC + OC];
                    for oc in 0..OC {
                        acc[oc] = v.mul_add(ws[oc], acc[oc]);
                    }
                }
            }
            let o0 = (oy * out_px + ox) * OC;
            let dst = &mut out[o0..o0 + OC];
            for oc in 0..OC {
                dst[oc] = if acc[oc].to_f64() < 0.0 {
                    S::ZERO
                } else {
                    acc[oc]
                };
            }
        }
    }
}

fn conv_forward<S: Scalar>(
    input: &[S],
    in_px: usize,
    in_ch: usize,
    layer: &ConvLayer<S>,
    k: usize,
    out_ch: usize,
    out: &mut [S],
) {
    let (w, b) = (layer.w.as_slice(), layer.b.as_slice());
    match (out_ch, k) {
        (4, 3) => conv_fwd_oc::<S, 4, 3>(input, in_px, in_ch, w, b, out),
        (8, 3) => conv_fwd_oc::<S, 8, 3>(input, in_px, in_ch, w, b, out),
        (8, 5) => conv_fwd_oc::<S, 8, 5>(input, in_px, in_ch, w, b, out),
        (16, 5) => conv_fwd_oc::<S, 16, 5>(input, in_px, in_ch, w, b, out),
        (32, 3) => conv_fwd_oc::<S, 32, 3>(input, in_px, in_ch, w, b, out),
        _ => panic!("unsupported conv shape {out_ch}@{k}x{k}"),
    }
}

/// Weight and bias gradients for one sample. `d_out` must already carry
/// the ReLU mask. Accumulation runs one output row at a time with the
/// per-weight accumulator in registers, so gradient memory is touched only
/// once per row instead of once per pixel.
#[inline(always)]
fn conv_bwd_wgrad_oc<S: Scalar, const OC: usize, const K: usize>(
    input: &[S],
    in_px: usize,
    in_ch: usize,
    d_out: &[S],
    gw: &mut [S],
    gb: &mut [S],
) {
    let out_px = in_px - K + 1;
    let ni = K * in_ch;
    let mut bias = [S::ZERO; OC];
    for oy in 0..out_px {
        let drow = &d_out[oy * out_px * OC..(oy + 1) * out_px * OC];
        for ox in 0..out_px {
            for oc in 0..OC {
                bias[oc] += drow[ox * OC + oc];
            }
        }
        for ky in 0..K {
            let irow = &input[(oy + ky) * in_px * in_ch..(oy + ky + 1) * in_px * in_ch];
            let grow = &mut gw[ky * ni * OC..(ky * ni + ni) * OC];
            for i in 0..ni {
                let mut acc = [S::ZERO; OC];
                for ox in 0..out_px {
                    let v = irow[ox * in_ch + i];
                    let d = &drow[ox * OC..ox * OC + OC];
                    for oc in 0..OC {
                        acc[oc] = v.mul_add(d[oc], acc[oc]);
                    }
                }
                let g = &mut grow[i * OC..i * OC + OC];
                for oc in 0..OC {
                    g[oc] += acc[oc];
                }
            }
        }
    }
    for oc in 0..OC {
        gb[oc] += bias[oc];
    }
}

/// Input gradients via weights transposed to `[ky][kx][oc][ic]`, so the
/// inner loop is again a contiguous broadcast-FMA, this time over input
/// channels.
#[inline(always)]
fn conv_bwd_dgrad_ic<S: Scalar, const IC: usize, const K: usize>(
    wt: &[S],
    in_px: usize,
    out_ch: usize,
    d_out: &[S],
    d_in: &mut [S],
) {
    let out_px = in_px - K + 1;
    d_in.fill(S::ZERO);
    for oy in 0..out_px {
        for ox in 0..out_px {
            let o0 = (oy * out_px + ox) * out_ch;
            let dvec = &d_out[o0..o0 + out_ch];
            for ky in 0..K {
                let in_row = ((oy + ky) * in_px + ox) * IC;
                for kx in 0..K {
                    let mut acc = [S::ZERO; IC];
                    let wrow = &wt[(ky * K + kx) * out_ch * IC..(ky * K + kx + 1) * out_ch * IC];
                    for (oc, &d) in dvec.iter().enumerate() {
                        let ws = &wrow[oc * IC..oc * IC + IC];
                        for ic in 0..IC {
                            acc[ic] = d.mul_add(ws[ic], acc[ic]);
                        }
                    }
                    let dst = &mut d_in[in_row + kx * IC..in_row + (kx + 1) * IC];
                    for ic in 0..IC {
                        dst[ic] += acc[ic];
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and (optionally) input gradients.
/// `wt_scratch` receives the transposed weights when input gradients are
/// requested.
fn conv_backward<S: Scalar>(
    input: &[S],
    in_px: usize,
    in_ch: usize,
    layer: &ConvLayer<S>,
    grad: &mut ConvLayer<S>,
    k: usize,
    out_ch: usize,
    d_out: &[S],
    d_in: Option<(&mut [S], &mut [S])>,
) {
    let (gw, gb) = (&mut grad.w, &mut grad.b);
    match (out_ch, k) {
        (4, 3) => conv_bwd_wgrad_oc::<S, 4, 3>(input, in_px, in_ch, d_out, gw, gb),
        (8, 3) => conv_bwd_wgrad_oc::<S, 8, 3>(input, in_px, in_ch, d_out, gw, gb),
        (8, 5) => conv_bwd_wgrad_oc::<S, 8, 5>(input, in_px, in_ch, d_out, gw, gb),
        (16, 5) => conv_bwd_wgrad_oc::<S, 16, 5>(input, in_px, in_ch, d_out, gw, gb),
        (32, 3) => conv_bwd_wgrad_oc::<S, 32, 3>(input, in_px, in_ch, d_out, gw, gb),
        _ => panic!("unsupported conv shape {out_ch}@{k}x{k}"),
    }
    if let Some((d_in, wt)) = d_in {
        for ky in 0..k {
            for kx in 0..k {
                for ic in 0..in_ch {
                    for oc in 0..out_ch {
                        wt[((ky * k + kx) * out_ch + oc) * in_ch + ic] =
                            layer.w[((ky * k + kx) * in_ch + ic) * out_ch + oc];
                    }
                }
            }
        }
        match (in_ch, k) {
            (4, 3) => conv_bwd_dgrad_ic::<S, 4, 3>(wt, in_px, out_ch, d_out, d_in),
            (8, 5) => conv_bwd_dgrad_ic::<S, 8, 5>(wt, in_px, out_ch, d_out, d_in),
            (16, 3) => conv_bwd_dgrad_ic::<S, 16, 3>(wt, in_px, out_ch, d_out, d_in),
            _ => panic!("unsupported conv shape {in_ch}@{k}x{k}"),
        }
    }
}

fn pool_forward<S: Scalar>(
    input: &[S],
    in_px: usize,
    ch: usize,
    out_px: usize,
    out: &mut [S],
    argmax: &mut [u8],
) {
    for oy in 0..out_px {
        for ox in 0..out_px {
            let o0 = (oy * out_px + ox) * ch;
            for c in 0..ch {
                let mut best = S::from_f64(f64::NEG_INFINITY);
                let mut win = 0u8;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = input[((2 * oy + dy) * in_px + 2 * ox + dx) * ch + c];
                        if v > best {
                            best = v;
                            win = (dy * 2 + dx) as u8;
                        }
                    }
                }
                out[o0 + c] = best;
                argmax[o0 + c] = win;
            }
        }
    }
}

fn pool_backward<S: Scalar>(
    d_out: &[S],
    out_px: usize,
    ch: usize,
    in_px: usize,
    argmax: &[u8],
    d_in: &mut [S],
) {
    d_in.fill(S::ZERO);
    for oy in 0..out_px {
        for ox in 0..out_px {
            let o0 = (oy * out_px + ox) * ch;
            for c in 0..ch {
                let win = argmax[o0 + c] as usize;
                let (dy, dx) = (win / 2, win % 2);
                d_in[((2 * oy + dy) * in_px + 2 * ox + dx) * ch + c] += d_out[o0 + c];
            }
        }
    }
}

/// `out = b + x * W` with `W` laid out `[in][H]`; accumulators live in
/// registers across the whole input sweep.
#[inline(always)]
fn dense_fwd_h<S: Scalar, const H: usize>(x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    let mut acc = [S::ZERO; H];
    acc.copy_from_slice(b);
    for (i, &v) in x.iter().enumerate() {
        let wrow = &w[i * H..i * H + H];
        for j in 0..H {
            acc[j] = v.mul_add(wrow[j], acc[j]);
        }
    }
    out.copy_from_slice(&acc);
}

fn dense_forward<S: Scalar>(x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    match out.len() {
        16 => dense_fwd_h::<S, 16>(x, w, b, out),
        128 => dense_fwd_h::<S, 128>(x, w, b, out),
        _ => panic!("unsupported dense width {}", out.len()),
    }
}

/// Weight gradients and input gradients for the wide dense layer in one
/// sweep. The dot product for `d_x` runs on striped partial sums so the
/// reduction does not serialize.
#[inline(always)]
fn dense_bwd_h<S: Scalar, const H: usize>(
    x: &[S],
    w: &[S],
    d_h: &[S],
    gw: &mut [S],
    d_x: &mut [S],
) {
    const STRIPES: usize = 8;
    let mut dv = [S::ZERO; H];
    dv.copy_from_slice(d_h);
    for (i, &v) in x.iter().enumerate() {
        let wrow = &w[i * H..i * H + H];
        let grow = &mut gw[i * H..i * H + H];
        let mut parts = [S::ZERO; STRIPES];
        let mut j = 0;
        while j < H {
            for l in 0..STRIPES.min(H - j) {
                grow[j + l] = v.mul_add(dv[j + l], grow[j + l]);
                parts[l] = wrow[j + l].mul_add(dv[j + l], parts[l]);
            }
            j += STRIPES;
        }
        let mut acc = S::ZERO;
        for p in parts {
            acc += p;
        }
        d_x[i] = acc;
    }
}

fn dense_backward<S: Scalar>(x: &[S], w: &[S], d_h: &[S], gw: &mut [S], d_x: &mut [S]) {
    match d_h.len() {
        16 => dense_bwd_h::<S, 16>(x, w, d_h, gw, d_x),
        128 => dense_bwd_h::<S, 128>(x, w, d_h, gw, d_x),
        _ => panic!("unsupported dense width {}", d_h.len()),
    }
}


/// What dropout should do on this pass.
pub enum DropoutMode<'a> {
    /// Inference: identity.
    Eval,
    /// Training: sample a fresh keep mask from this stream and scale kept
    /// units by 1/keep, so inference needs no rescaling.
    Sample(&'a mut ChaCha8Rng),
}

impl<S: Scalar> Network<S> {
    /// Runs the network on one image (channels-last, values in [0,1]) for
    /// one head. Returns `[action_x, action_y, termination_prob]`; all
    /// intermediates stay in `ws` for a following `backward`.
    pub fn forward(
        &self,
        input: &[S],
        head: usize,
        dropout: DropoutMode,
        ws: &mut Workspace<S>,
    ) -> [S; OUTPUTS] {
        assert_eq!(input.len(), self.spec.input_len(), "input image shape");
        let stages = self.spec.stages();
        for (li, s) in stages.iter().enumerate() {
            let src: &[S] = if li == 0 { input } else { &ws.pooled[li - 1] };
            conv_forward(
                src,
                s.in_px,
                s.in_ch,
                &self.convs[li],
                s.k,
                s.out_ch,
                &mut ws.conv_out[li],
            );
            pool_forward(
                &ws.conv_out[li],
                s.conv_px,
                s.out_ch,
                s.pool_px,
                &mut ws.pooled[li],
                &mut ws.argmax[li],
            );
        }

        let flat = &ws.pooled[stages.len() - 1];
        let h = self.spec.dense_hidden;
        let hd = &self.heads[head];
        dense_forward(flat, &hd.w1, &hd.b1, &mut ws.hidden_relu);
        for a in &mut ws.hidden_relu {
            if a.to_f64() < 0.0 {
                *a = S::ZERO;
            }
        }

        let keep = self.spec.dropout_keep;
        match dropout {
            DropoutMode::Eval => {
                ws.dropout_sampled = false;
                ws.hidden_final.copy_from_slice(&ws.hidden_relu);
            }
            DropoutMode::Sample(rng) => {
                ws.dropout_sampled = true;
                let scale = S::from_f64(1.0 / keep);
                for j in 0..h {
                    let kept = rng.gen::<f64>() < keep;
                    ws.drop_mask[j] = kept;
                    ws.hidden_final[j] = if kept {
                        ws.hidden_relu[j] * scale
                    } else {
                        S::ZERO
                    };
                }
            }
        }

        let mut out = [S::ZERO; OUTPUTS];
        out.copy_from_slice(&hd.b2);
        for j in 0..h {
            let v = ws.hidden_final[j];
            for o in 0..OUTPUTS {
                out[o] = v.mul_add(hd.w2[j * OUTPUTS + o], out[o]);
            }
        }
        out[2] = sigmoid(out[2]);
        out
    }

    /// Backpropagates from output gradients through the activations left
    /// in `ws` by the most recent `forward`, accumulating into `grad`.
    /// `input` must be the same image that forward saw. `d_out[2]` must be
    /// the gradient with respect to the termination logit (pre-sigmoid);
    /// `output_loss_and_grad` produces it that way.
    pub fn backward(
        &self,
        input: &[S],
        head: usize,
        d_out: [S; OUTPUTS],
        ws: &mut Workspace<S>,
        grad: &mut Network<S>,
    ) {
        let stages = self.spec.stages();
        let h = self.spec.dense_hidden;
        let hd = &self.heads[head];
        let ghd = &mut grad.heads[head];

        for o in 0..OUTPUTS {
            ghd.b2[o] += d_out[o];
        }
        for j in 0..h {
            let mut acc = S::ZERO;
            for o in 0..OUTPUTS {
                ghd.w2[j * OUTPUTS + o] =
                    ws.hidden_final[j].mul_add(d_out[o], ghd.w2[j * OUTPUTS + o]);
                acc = hd.w2[j * OUTPUTS + o].mul_add(d_out[o], acc);
            }
            ws.d_hidden[j] = acc;
        }

        if ws.dropout_sampled {
            let scale = S::from_f64(1.0 / self.spec.dropout_keep);
            for j in 0..h {
                ws.d_hidden[j] = if ws.drop_mask[j] {
                    ws.d_hidden[j] * scale
                } else {
                    S::ZERO
                };
            }
        }
        for j in 0..h {
            if ws.hidden_relu[j].to_f64() <= 0.0 {
                ws.d_hidden[j] = S::ZERO;
            }
        }

        let flat = &ws.pooled[stages.len() - 1];
        let d_flat = &mut ws.d_pooled[stages.len() - 1];
        for j in 0..h {
            ghd.b1[j] += ws.d_hidden[j];
        }
        dense_backward(flat, &hd.w1, &ws.d_hidden, &mut ghd.w1, d_flat);

        for li in (0..stages.len()).rev() {
            let s = &stages[li];
            // Unpool into the conv-output gradient, then mask by ReLU.
            pool_backward(
                &ws.d_pooled[li],
                s.pool_px,
                s.out_ch,
                s.conv_px,
                &ws.argmax[li],
                &mut ws.d_conv[li],
            );
            for (d, &a) in ws.d_conv[li].iter_mut().zip(&ws.conv_out[li]) {
                if a.to_f64() <= 0.0 {
                    *d = S::ZERO;
                }
            }
            if li == 0 {
                // No gradient flows past the input image.
                conv_backward(
                    input,
                    s.in_px,
                    s.in_ch,
                    &self.convs[0],
                    &mut grad.convs[0],
                    s.k,
                    s.out_ch,
                    &ws.d_conv[0],
                    None,
                );
                continue;
            }
            let (d_pooled_prev, _) = ws.d_pooled.split_at_mut(li);
            conv_backward(
                &ws.pooled[li - 1],
                s.in_px,
                s.in_ch,
                &self.convs[li],
                &mut grad.convs[li],
                s.k,
                s.out_ch,
                &ws.d_conv[li],
                Some((d_pooled_prev[li - 1].as_mut_slice(), ws.wt[li].as_mut_slice())),
            );
        }
    }
}

/// Per-sample loss terms, unscaled by batch size.
#[derive(Copy, Clone, Debug, Default)]
pub struct LossTerms {
    pub mse: f64,
    pub ce: f64,
}

impl LossTerms {
    pub fn total(&self, ce_weight: f64) -> f64 {
        self.mse + ce_weight * self.ce
    }
}

/// Squared action error plus clamped binary cross entropy on termination,
/// and the matching output gradients scaled by `inv_batch` (and by
/// `ce_weight` for the termination logit).
pub fn output_loss_and_grad<S: Scalar>(
    pred: [S; OUTPUTS],
    action: [S; 2],
    termination: bool,
    ce_weight: f64,
    inv_batch: f64,
) -> (LossTerms, [S; OUTPUTS]) {
    let dx = pred[0] - action[0];
    let dy = pred[1] - action[1];
    let mse = (dx * dx + dy * dy).to_f64();

    let p = pred[2].to_f64();
    let y = if termination { 1.0 } else { 0.0 };
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ce = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    // d(ce)/d(logit). The clamp is part of the computed loss, so where it
    // is active the gradient is exactly zero.
    let d_logit = if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        0.0
    } else {
        p - y
    };

    let two = S::from_f64(2.0 * inv_batch);
    let d = [
        dx * two,
        dy * two,
        S::from_f64(d_logit * ce_weight * inv_batch),
    ];
    (LossTerms { mse, ce }, d)
}

/// One heavy-ball SGD step: `v = momentum*v - lr*g; w += v`. Gradients for
/// parameters a batch did not touch are zero, which leaves only the decay
/// term, matching the usual per-parameter momentum treatment.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut Network<S>,
    grads: &Network<S>,
    velocity: &mut Network<S>,
    lr: f64,
    momentum: f64,
) {
    let lr = S::from_f64(-lr);
    let m = S::from_f64(momentum);
    let gs = grads.param_slices();
    for ((p, g), v) in params
        .param_slices_mut()
        .into_iter()
        .zip(gs)
        .zip(velocity.param_slices_mut())
    {
        for i in 0..p.len() {
            v[i] = g[i].mul_add(lr, v[i] * m);
            p[i] += v[i];
        }
    }
}

/// Result of one finite-difference sweep over every parameter.
#[derive(Copy, Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose +/-eps interval crosses a ReLU or pooling kink,
    /// where central differences do not estimate the derivative. Detected
    /// by comparing activation fingerprints of the two evaluations.
    pub skipped_nonsmooth: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

/// Checks the analytic gradients of the sample loss against central finite
/// differences at one random parameter/data point, touching every
/// parameter and both heads. The loss is smooth wherever the discrete
/// activation pattern is constant, so parameters whose probe interval
/// changes the pattern are reported in `skipped_nonsmooth` instead of
/// being compared against an invalid difference quotient.
///
/// Instantiated at `f64`; `eps = 1e-4` with `rel_tol = 1e-3` passes with a
/// wide margin when the backward pass is exact.
pub fn check_gradients_fd(spec: &NetSpec, point_seed: u64, eps: f64, rel_tol: f64) -> GradCheck {
    use crate::rng::derive_seed;

    let mut net: Network<f64> = Network::init(spec.clone(), derive_seed(point_seed, 1));
    let mut data_rng = rng_from_seed(derive_seed(point_seed, 2));
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| data_rng.gen::<f64>()).collect() };
    let input_a = draw(spec.input_len());
    let input_b = draw(spec.input_len());
    let action_a = [0.6, -0.8];
    let action_b = [0.0, 0.0];

    let clamp_state = |p: f64| -> u64 {
        if p <= PROB_CLAMP {
            1
        } else if p >= 1.0 - PROB_CLAMP {
            2
        } else {
            0
        }
    };
    let loss_and_fingerprint = |net: &Network<f64>| -> (f64, u64) {
        let mut ws = Workspace::new(spec);
        let pa = net.forward(&input_a, 0, DropoutMode::Eval, &mut ws);
        let (ta, _) = output_loss_and_grad(pa, action_a, true, 1.0, 0.5);
        let fp_a = ws.activation_fingerprint();
        let pb = net.forward(&input_b, 1, DropoutMode::Eval, &mut ws);
        let (tb, _) = output_loss_and_grad(pb, action_b, false, 1.0, 0.5);
        let fp_b = ws.activation_fingerprint();
        let fp = fp_a.rotate_left(17) ^ fp_b ^ (clamp_state(pa[2]) | clamp_state(pb[2]) << 2);
        (0.5 * (ta.total(1.0) + tb.total(1.0)), fp)
    };

    let mut grad: Network<f64> = Network::zeroed(spec.clone());
    let mut ws = Workspace::new(spec);
    let pa = net.forward(&input_a, 0, DropoutMode::Eval, &mut ws);
    let (_, da) = output_loss_and_grad(pa, action_a, true, 1.0, 0.5);
    net.backward(&input_a, 0, da, &mut ws, &mut grad);
    let pb = net.forward(&input_b, 1, DropoutMode::Eval, &mut ws);
    let (_, db) = output_loss_and_grad(pb, action_b, false, 1.0, 0.5);
    net.backward(&input_b, 1, db, &mut ws, &mut grad);
    let analytic = grad.to_flat();

    let mut flat = net.to_flat();
    let mut out = GradCheck {
        checked: 0,
        skipped_nonsmooth: 0,
        failures: 0,
        worst_rel_err: 0.0,
    };
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        net.set_from_flat(&flat);
        let (hi, fp_hi) = loss_and_fingerprint(&net);
        flat[i] = orig - eps;
        net.set_from_flat(&flat);
        let (lo, fp_lo) = loss_and_fingerprint(&net);
        flat[i] = orig;
        if fp_hi != fp_lo {
            out.skipped_nonsmooth += 1;
            continue;
        }
        let numeric = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs();
        let rel = err / analytic[i].abs().max(numeric.abs()).max(1e-12);
        out.checked += 1;
        if err > rel_tol * analytic[i].abs().max(numeric.abs()) + 1e-8 {
            out.failures += 1;
        }
        if rel > out.worst_rel_err && err > 1e-8 {
            out.worst_rel_err = rel;
        }
    }
    net.set_from_flat(&flat);
    out
}
