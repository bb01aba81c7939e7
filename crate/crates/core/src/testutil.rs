//! Test-support oracles, compiled only with the `testutil` feature.
//!
//! Everything here is written as plain nested loops over f64 buffers,
//! deliberately independent of the padded-SAXPY kernels in [`crate::tensor`]:
//! these are the reference implementations the real kernels are checked
//! against, and the 64-bit forward used for central-difference gradient
//! checks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::model::Network;
use crate::tensor::{Shape5, Tensor5};

// ---------------------------------------------------------------------------
// naive reference ops (f64, triple-loop)
// ---------------------------------------------------------------------------

/// Channel-major spatial layout shared by all naive ops:
/// `data[((c * d + z) * h + y) * w + x]` for a single batch element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NaiveShape {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl NaiveShape {
    pub fn len(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Same-padded stride-1 convolution, direct per-output summation.
pub fn naive_conv3d(
    input: &[f64],
    s: NaiveShape,
    c_out: usize,
    k: (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (kd, kh, kw) = k;
    let (rd, rh, rw) = (kd as isize / 2, kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0f64; c_out * s.d * s.h * s.w];
    for co in 0..c_out {
        for z in 0..s.d as isize {
            for y in 0..s.h as isize {
                for x in 0..s.w as isize {
                    let mut acc = bias[co];
                    for ci in 0..s.c {
                        for kz in 0..kd as isize {
                            let iz = z + kz - rd;
                            if iz < 0 || iz >= s.d as isize {
                                continue;
                            }
                            for ky in 0..kh as isize {
                                let iy = y + ky - rh;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                for kx in 0..kw as isize {
                                    let ix = x + kx - rw;
                                    if ix < 0 || ix >= s.w as isize {
                                        continue;
                                    }
                                    let wi = (((co * s.c + ci) * kd + kz as usize) * kh
                                        + ky as usize)
                                        * kw
                                        + kx as usize;
                                    let ii = ((ci * s.d + iz as usize) * s.h + iy as usize) * s.w
                                        + ix as usize;
                                    acc += weights[wi] * input[ii];
                                }
                            }
                        }
                    }
                    let oi = ((co * s.d + z as usize) * s.h + y as usize) * s.w + x as usize;
                    out[oi] = acc;
                }
            }
        }
    }
    out
}

/// 3^3 stride-1 max with out-of-bounds treated as -inf; also returns each
/// output's argmax (first in (d,h,w) order) for kink detection.
pub fn naive_maxpool3d(input: &[f64], s: NaiveShape) -> (Vec<f64>, Vec<u32>) {
    let mut out = vec![0.0f64; s.len()];
    let mut arg = vec![0u32; s.len()];
    let sp = s.d * s.h * s.w;
    for c in 0..s.c {
        for z in 0..s.d as isize {
            for y in 0..s.h as isize {
                for x in 0..s.w as isize {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0u32;
                    for dz in -1..=1isize {
                        let iz = z + dz;
                        if iz < 0 || iz >= s.d as isize {
                            continue;
                        }
                        for dy in -1..=1isize {
                            let iy = y + dy;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for dx in -1..=1isize {
                                let ix = x + dx;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let ii =
                                    ((iz as usize) * s.h + iy as usize) * s.w + ix as usize;
                                let v = input[c * sp + ii];
                                if v > best {
                                    best = v;
                                    best_i = ii as u32;
                                }
                            }
                        }
                    }
                    let oi = ((z as usize) * s.h + y as usize) * s.w + x as usize;
                    out[c * sp + oi] = best;
                    arg[c * sp + oi] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub fn naive_relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn naive_mse(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

// ---------------------------------------------------------------------------
// naive full-network forward (f64) with evaluation signatures
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct NaiveConv {
    pub c_out: usize,
    pub c_in: usize,
    pub k: (usize, usize, usize),
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

/// f64 mirror of a [`Network`], in the network's fixed layer order.
pub struct NaiveNet {
    pub layers: Vec<NaiveConv>,
}

pub fn naive_net_from(net: &Network) -> NaiveNet {
    NaiveNet {
        layers: net
            .layers()
            .iter()
            .map(|(_, l)| NaiveConv {
                c_out: l.params.c_out,
                c_in: l.params.c_in,
                k: (l.params.kd, l.params.kh, l.params.kw),
                weights: l.params.weights.iter().map(|&w| w as f64).collect(),
                bias: l.params.bias.iter().map(|&b| b as f64).collect(),
                relu: l.relu,
            })
            .collect(),
    }
}

/// Piecewise-linearity signature of one evaluation: ReLU activation signs and
/// pool argmax choices, in call order. Two evaluations on the same side of
/// every kink produce equal signatures.
#[derive(PartialEq, Eq, Clone, Default)]
pub struct EvalSig {
    relu: Vec<bool>,
    pool: Vec<u32>,
}

fn apply_conv(l: &NaiveConv, x: &[f64], s: NaiveShape, sig: &mut EvalSig) -> (Vec<f64>, NaiveShape) {
    debug_assert_eq!(l.c_in, s.c);
    let mut y = naive_conv3d(x, s, l.c_out, l.k, &l.weights, &l.bias);
    if l.relu {
        for v in y.iter_mut() {
            sig.relu.push(*v > 0.0);
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
    }
    (y, NaiveShape { c: l.c_out, ..s })
}

fn apply_block(
    layers: &[NaiveConv],
    x: &[f64],
    s: NaiveShape,
    sig: &mut EvalSig,
) -> (Vec<f64>, NaiveShape) {
    let (p1, s1) = apply_conv(&layers[0], x, s, sig);
    let (r3, sr3) = apply_conv(&layers[1], x, s, sig);
    let (p2, s2) = apply_conv(&layers[2], &r3, sr3, sig);
    let (r5, sr5) = apply_conv(&layers[3], x, s, sig);
    let (p3, s3) = apply_conv(&layers[4], &r5, sr5, sig);
    let (pooled, arg) = naive_maxpool3d(x, s);
    sig.pool.extend_from_slice(&arg);
    let (p4, s4) = apply_conv(&layers[5], &pooled, s, sig);
    let c_total = s1.c + s2.c + s3.c + s4.c;
    let mut out = Vec::with_capacity(c_total * s.d * s.h * s.w);
    out.extend_from_slice(&p1);
    out.extend_from_slice(&p2);
    out.extend_from_slice(&p3);
    out.extend_from_slice(&p4);
    (out, NaiveShape { c: c_total, ..s })
}

/// Full forward in f64: returns the model output and the kink signature.
pub fn naive_net_forward(
    nn: &NaiveNet,
    e1: &[f64],
    e2: &[f64],
    spatial: (usize, usize, usize),
) -> (Vec<f64>, EvalSig) {
    let (d, h, w) = spatial;
    let c_in = nn.layers[0].c_in;
    let s_in = NaiveShape { c: c_in, d, h, w };
    let mut sig = EvalSig::default();
    let (s1, ss1) = apply_conv(&nn.layers[0], e1, s_in, &mut sig);
    let (s2, _ss2) = apply_conv(&nn.layers[1], e2, s_in, &mut sig);
    let (a1, sa1) = apply_block(&nn.layers[2..8], &s1, ss1, &mut sig);
    let (a2, sa2) = apply_block(&nn.layers[8..14], &s2, ss1, &mut sig);
    let mut cat = Vec::with_capacity(a1.len() + a2.len());
    cat.extend_from_slice(&a1);
    cat.extend_from_slice(&a2);
    let s_cat = NaiveShape { c: sa1.c + sa2.c, d, h, w };
    let (f, sf) = apply_block(&nn.layers[14..20], &cat, s_cat, &mut sig);
    let (out, _) = apply_conv(&nn.layers[20], &f, sf, &mut sig);
    (out, sig)
}

pub fn naive_net_loss(
    nn: &NaiveNet,
    e1: &[f64],
    e2: &[f64],
    spatial: (usize, usize, usize),
    target: &[f64],
) -> (f64, EvalSig) {
    let (out, sig) = naive_net_forward(nn, e1, e2, spatial);
    (naive_mse(&out, target), sig)
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    /// Coordinates whose analytic/numeric pair was compared.
    pub checked: usize,
    /// Coordinates skipped because the +-h evaluations crossed a ReLU or
    /// argmax kink (the function is not differentiable across the step).
    pub excused_kinks: usize,
    /// Coordinates skipped by the |a|+|n| <= 1e-8 dead-signal guard.
    pub skipped_tiny: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.excused_kinks += other.excused_kinks;
        self.skipped_tiny += other.skipped_tiny;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
        }
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
const DEAD_SIGNAL: f64 = 1e-8;

fn compare(
    analytic: f64,
    f_plus: f64,
    f_minus: f64,
    sig_same: bool,
    h: f64,
    tol: f64,
    report: &mut GradReport,
    what: &str,
) -> Result<(), String> {
    if !sig_same {
        report.excused_kinks += 1;
        return Ok(());
    }
    let numeric = (f_plus - f_minus) / (2.0 * h);
    if analytic.abs() + numeric.abs() <= DEAD_SIGNAL {
        report.skipped_tiny += 1;
        return Ok(());
    }
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    if rel > report.max_rel_err {
        report.max_rel_err = rel;
    }
    report.checked += 1;
    if rel >= tol {
        return Err(alloc::format!(
            "{what}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
        ));
    }
    Ok(())
}

/// Full tiny-network check: analytic gradients from the implementation
/// instantiated at f64 (same kernels as production, higher precision) for
/// every parameter and both inputs, versus central differences on the
/// independent naive f64 forward. f32-forward rounding noise would otherwise
/// swamp small-magnitude coordinates; the f32 instantiation is separately
/// validated by [`grads_f32_vs_f64_max_rel_diff`].
pub fn check_network_gradients(
    net: &Network,
    spatial: (usize, usize, usize),
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradReport, String> {
    let (d, hh, w) = spatial;
    let c_in = net.config.input_channels_per_branch;
    let n_in = c_in * d * hh * w;
    let mut rng = crate::rng::stream(seed, 101, 0);
    let mut draw = |n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
    };
    let e1_f64 = draw(n_in, 1.0);
    let e2_f64 = draw(n_in, 1.0);
    let target_f64 = draw(n_in, 1.0);

    let shape = Shape5::new(1, c_in, d, hh, w);
    let e1 = Tensor5::<f64>::from_vec(shape, e1_f64.clone()).expect("finite");
    let e2 = Tensor5::<f64>::from_vec(shape, e2_f64.clone()).expect("finite");
    let target = Tensor5::<f64>::from_vec(shape, target_f64.clone()).expect("finite");

    let (_, grads, input_grads) = net
        .loss_and_grads::<f64, f64>(&e1, &e2, &target, true)
        .map_err(|e| alloc::format!("forward failed: {e}"))?;
    let (gi1, gi2) = input_grads.expect("input grads requested");

    let mut nn = naive_net_from(net);
    let mut report = GradReport::default();

    // parameters
    for li in 0..nn.layers.len() {
        for (kind, idx_count) in [("w", nn.layers[li].weights.len()), ("b", nn.layers[li].bias.len())]
        {
            for i in 0..idx_count {
                let analytic =
                    if kind == "w" { grads.dw[li][i] } else { grads.db[li][i] };
                let slot = |nn: &mut NaiveNet, v: f64| {
                    if kind == "w" {
                        nn.layers[li].weights[i] = v;
                    } else {
                        nn.layers[li].bias[i] = v;
                    }
                };
                let base = if kind == "w" { nn.layers[li].weights[i] } else { nn.layers[li].bias[i] };
                slot(&mut nn, base + h);
                let (fp, sig_p) = naive_net_loss(&nn, &e1_f64, &e2_f64, spatial, &target_f64);
                slot(&mut nn, base - h);
                let (fm, sig_m) = naive_net_loss(&nn, &e1_f64, &e2_f64, spatial, &target_f64);
                slot(&mut nn, base);
                compare(
                    analytic,
                    fp,
                    fm,
                    sig_p == sig_m,
                    h,
                    tol,
                    &mut report,
                    &alloc::format!("layer {li} {kind}[{i}]"),
                )?;
            }
        }
    }

    // inputs
    for (which, g, base_vec) in [("e1", &gi1, &e1_f64), ("e2", &gi2, &e2_f64)] {
        for i in 0..base_vec.len() {
            let mut plus = base_vec.clone();
            plus[i] += h;
            let mut minus = base_vec.clone();
            minus[i] -= h;
            let (fp, sig_p) = if which == "e1" {
                naive_net_loss(&nn, &plus, &e2_f64, spatial, &target_f64)
            } else {
                naive_net_loss(&nn, &e1_f64, &plus, spatial, &target_f64)
            };
            let (fm, sig_m) = if which == "e1" {
                naive_net_loss(&nn, &minus, &e2_f64, spatial, &target_f64)
            } else {
                naive_net_loss(&nn, &e1_f64, &minus, spatial, &target_f64)
            };
            compare(
                g[i],
                fp,
                fm,
                sig_p == sig_m,
                h,
                tol,
                &mut report,
                &alloc::format!("{which}[{i}]"),
            )?;
        }
    }
    Ok(report)
}

/// Max relative difference between the f32 training-path parameter gradients
/// and the f64-instantiation gradients on the same weights and inputs.
/// Validates the production scalar type against the precision the gradient
/// suite certifies.
pub fn grads_f32_vs_f64_max_rel_diff(
    net: &Network,
    spatial: (usize, usize, usize),
    seed: u64,
) -> f64 {
    let (d, hh, w) = spatial;
    let c_in = net.config.input_channels_per_branch;
    let n_in = c_in * d * hh * w;
    let mut rng = crate::rng::stream(seed, 110, 0);
    let mut draw32 = |n: usize| -> Vec<f32> {
        (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) as f32).collect()
    };
    let shape = Shape5::new(1, c_in, d, hh, w);
    let e1v = draw32(n_in);
    let e2v = draw32(n_in);
    let tv = draw32(n_in);
    let e1_32 = Tensor5::<f32>::from_vec(shape, e1v.clone()).unwrap();
    let e2_32 = Tensor5::<f32>::from_vec(shape, e2v.clone()).unwrap();
    let t_32 = Tensor5::<f32>::from_vec(shape, tv.clone()).unwrap();
    let up = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let e1_64 = Tensor5::<f64>::from_vec(shape, up(&e1v)).unwrap();
    let e2_64 = Tensor5::<f64>::from_vec(shape, up(&e2v)).unwrap();
    let t_64 = Tensor5::<f64>::from_vec(shape, up(&tv)).unwrap();

    let (_, g32, _) = net.loss_and_grads::<f32, f32>(&e1_32, &e2_32, &t_32, false).unwrap();
    let (_, g64, _) = net.loss_and_grads::<f64, f64>(&e1_64, &e2_64, &t_64, false).unwrap();
    let mut worst = 0.0f64;
    for (a_l, b_l) in g32.dw.iter().chain(g32.db.iter()).zip(g64.dw.iter().chain(g64.db.iter())) {
        for (a, b) in a_l.iter().zip(b_l) {
            let denom = a.abs().max(b.abs());
            if denom > 1e-6 {
                worst = worst.max((a - b).abs() / denom);
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// per-primitive gradient checks
// ---------------------------------------------------------------------------

fn rand_dims(rng: &mut impl Rng, max: usize) -> (usize, usize, usize) {
    (rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max))
}

/// conv3d: weighted-output functional L = <u, conv(x)>; checks dL/dx, dL/dw,
/// dL/db against central differences on the naive f64 conv.
pub fn check_conv_gradients(seed: u64, h: f64, tol: f64) -> Result<GradReport, String> {
    let mut rng = crate::rng::stream(seed, 102, 0);
    let (d, hh, w) = rand_dims(&mut rng, 5);
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=3);
    let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap();

    let n_in = c_in * d * hh * w;
    let n_w = c_out * c_in * k * k * k;
    let xs: Vec<f64> = (0..n_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let ws: Vec<f64> = (0..n_w).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * 0.5).collect();
    let bs: Vec<f64> = (0..c_out).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * 0.5).collect();
    let u: Vec<f64> = (0..c_out * d * hh * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

    let shape = Shape5::new(1, c_in, d, hh, w);
    // f32-representable draws so the implementation's f32 kernel parameters
    // and the f64 oracle evaluate the same point exactly
    let ws: Vec<f64> = ws.iter().map(|&v| v as f32 as f64).collect();
    let bs: Vec<f64> = bs.iter().map(|&v| v as f32 as f64).collect();
    let x = Tensor5::<f64>::from_vec(shape, xs.clone()).unwrap();
    let p = crate::tensor::ConvParams::new(
        c_out,
        c_in,
        (k, k, k),
        ws.iter().map(|&v| v as f32).collect(),
        bs.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();

    let grads = crate::tensor::conv3d_backward(&x, &p, &u).map_err(|e| alloc::format!("{e}"))?;
    let s = NaiveShape { c: c_in, d, h: hh, w };
    let f = |xs: &[f64], ws: &[f64], bs: &[f64]| -> f64 {
        naive_conv3d(xs, s, c_out, (k, k, k), ws, bs)
            .iter()
            .zip(&u)
            .map(|(y, uu)| y * uu)
            .sum()
    };

    let mut report = GradReport::default();
    for i in 0..n_in {
        let mut p1 = xs.clone();
        p1[i] += h;
        let mut m1 = xs.clone();
        m1[i] -= h;
        compare(grads.input[i], f(&p1, &ws, &bs), f(&m1, &ws, &bs), true, h, tol, &mut report, "conv dx")?;
    }
    for i in 0..n_w {
        let mut p1 = ws.clone();
        p1[i] += h;
        let mut m1 = ws.clone();
        m1[i] -= h;
        compare(grads.weights[i], f(&xs, &p1, &bs), f(&xs, &m1, &bs), true, h, tol, &mut report, "conv dw")?;
    }
    for i in 0..c_out {
        let mut p1 = bs.clone();
        p1[i] += h;
        let mut m1 = bs.clone();
        m1[i] -= h;
        compare(grads.bias[i], f(&xs, &ws, &p1), f(&xs, &ws, &m1), true, h, tol, &mut report, "conv db")?;
    }
    Ok(report)
}

/// relu: inputs sampled away from the kink at 0.
pub fn check_relu_gradients(seed: u64, h: f64, tol: f64) -> Result<GradReport, String> {
    let mut rng = crate::rng::stream(seed, 103, 0);
    let (d, hh, w) = rand_dims(&mut rng, 5);
    let c = rng.random_range(1..=3);
    let n = c * d * hh * w;
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let m = 0.1 + rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let x = Tensor5::<f64>::from_vec(Shape5::new(1, c, d, hh, w), xs.clone()).unwrap();
    let analytic = crate::tensor::relu_backward(&x, &u).map_err(|e| alloc::format!("{e}"))?;
    let f = |xs: &[f64]| -> f64 { naive_relu(xs).iter().zip(&u).map(|(y, uu)| y * uu).sum() };
    let mut report = GradReport::default();
    for i in 0..n {
        let mut p1 = xs.clone();
        p1[i] += h;
        let mut m1 = xs.clone();
        m1[i] -= h;
        let crosses = xs[i].abs() <= h;
        compare(analytic[i], f(&p1), f(&m1), !crosses, h, tol, &mut report, "relu dx")?;
    }
    Ok(report)
}

/// maxpool: coordinates whose +-h step flips a window argmax are excused.
pub fn check_pool_gradients(seed: u64, h: f64, tol: f64) -> Result<GradReport, String> {
    let mut rng = crate::rng::stream(seed, 104, 0);
    let (d, hh, w) = rand_dims(&mut rng, 5);
    let c = rng.random_range(1..=2);
    let n = c * d * hh * w;
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let x = Tensor5::<f64>::from_vec(Shape5::new(1, c, d, hh, w), xs.clone()).unwrap();
    let analytic = crate::tensor::maxpool3d_backward(&x, &u).map_err(|e| alloc::format!("{e}"))?;
    let s = NaiveShape { c, d, h: hh, w };
    let f = |xs: &[f64]| -> (f64, Vec<u32>) {
        let (y, arg) = naive_maxpool3d(xs, s);
        (y.iter().zip(&u).map(|(v, uu)| v * uu).sum(), arg)
    };
    let mut report = GradReport::default();
    for i in 0..n {
        let mut p1 = xs.clone();
        p1[i] += h;
        let mut m1 = xs.clone();
        m1[i] -= h;
        let (fp, argp) = f(&p1);
        let (fm, argm) = f(&m1);
        compare(analytic[i], fp, fm, argp == argm, h, tol, &mut report, "pool dx")?;
    }
    Ok(report)
}

/// concat: exact split, checked coordinate-wise through the functional.
pub fn check_concat_gradients(seed: u64, h: f64, tol: f64) -> Result<GradReport, String> {
    let mut rng = crate::rng::stream(seed, 105, 0);
    let (d, hh, w) = rand_dims(&mut rng, 5);
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let na = ca * d * hh * w;
    let nb = cb * d * hh * w;
    let xa: Vec<f64> = (0..na).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let xb: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let u: Vec<f64> = (0..na + nb).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let sa = Shape5::new(1, ca, d, hh, w);
    let sb = Shape5::new(1, cb, d, hh, w);
    let (ga, gb) = crate::tensor::concat_channels_backward(sa, sb, &u).map_err(|e| alloc::format!("{e}"))?;
    let f = |xa: &[f64], xb: &[f64]| -> f64 {
        xa.iter().chain(xb.iter()).zip(&u).map(|(v, uu)| v * uu).sum()
    };
    let mut report = GradReport::default();
    for i in 0..na {
        let mut p1 = xa.clone();
        p1[i] += h;
        let mut m1 = xa.clone();
        m1[i] -= h;
        compare(ga[i], f(&p1, &xb), f(&m1, &xb), true, h, tol, &mut report, "concat da")?;
    }
    for i in 0..nb {
        let mut p1 = xb.clone();
        p1[i] += h;
        let mut m1 = xb.clone();
        m1[i] -= h;
        compare(gb[i], f(&xa, &p1), f(&xa, &m1), true, h, tol, &mut report, "concat db")?;
    }
    Ok(report)
}

pub fn check_mse_gradients(seed: u64, h: f64, tol: f64) -> Result<GradReport, String> {
    let mut rng = crate::rng::stream(seed, 106, 0);
    let (d, hh, w) = rand_dims(&mut rng, 5);
    let c = rng.random_range(1..=3);
    let n = c * d * hh * w;
    let shape = Shape5::new(1, c, d, hh, w);
    let ps: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let ts: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let pred = Tensor5::<f64>::from_vec(shape, ps.clone()).unwrap();
    let target = Tensor5::<f64>::from_vec(shape, ts.clone()).unwrap();
    let analytic = crate::tensor::mse_loss_backward(&pred, &target).map_err(|e| alloc::format!("{e}"))?;
    let mut report = GradReport::default();
    for i in 0..n {
        let mut p1 = ps.clone();
        p1[i] += h;
        let mut m1 = ps.clone();
        m1[i] -= h;
        compare(
            analytic[i],
            naive_mse(&p1, &ts),
            naive_mse(&m1, &ts),
            true,
            h,
            tol,
            &mut report,
            "mse dpred",
        )?;
    }
    Ok(report)
}

/// Run all five primitive checks for one seed and merge the reports.
pub fn check_all_primitives(seed: u64, h: f64, tol: f64) -> Result<GradReport, String> {
    let mut total = GradReport::default();
    total.merge(&check_conv_gradients(seed, h, tol)?);
    total.merge(&check_relu_gradients(seed, h, tol)?);
    total.merge(&check_pool_gradients(seed, h, tol)?);
    total.merge(&check_concat_gradients(seed, h, tol)?);
    total.merge(&check_mse_gradients(seed, h, tol)?);
    Ok(total)
}

// ---------------------------------------------------------------------------
// oracle-equivalence helpers (forward only)
// ---------------------------------------------------------------------------

/// Max |impl - naive| over one random conv forward (dims <= 7).
pub fn conv_vs_naive_max_abs_err(seed: u64) -> f64 {
    let mut rng = crate::rng::stream(seed, 107, 0);
    let d = rng.random_range(1..=7);
    let hh = rng.random_range(1..=7);
    let w = rng.random_range(1..=7);
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=3);
    let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap();
    let n_in = c_in * d * hh * w;
    let x_vals: Vec<f32> = (0..n_in).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    let w_vals: Vec<f32> =
        (0..c_out * c_in * k * k * k).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * 0.25).collect();
    let b_vals: Vec<f32> = (0..c_out).map(|_| rng.random::<f32>() - 0.5).collect();
    let x = Tensor5::from_vec(Shape5::new(1, c_in, d, hh, w), x_vals.clone()).unwrap();
    let p = crate::tensor::ConvParams::new(c_out, c_in, (k, k, k), w_vals.clone(), b_vals.clone())
        .unwrap();
    let got = crate::tensor::conv3d(&x, &p).unwrap();
    let want = naive_conv3d(
        &x_vals.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        NaiveShape { c: c_in, d, h: hh, w },
        c_out,
        (k, k, k),
        &w_vals.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &b_vals.iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    got.values()
        .iter()
        .zip(&want)
        .map(|(&g, &n)| (g as f64 - n).abs())
        .fold(0.0, f64::max)
}

/// Max |impl - naive| over one random maxpool forward (dims <= 7).
pub fn pool_vs_naive_max_abs_err(seed: u64) -> f64 {
    let mut rng = crate::rng::stream(seed, 108, 0);
    let d = rng.random_range(1..=7);
    let hh = rng.random_range(1..=7);
    let w = rng.random_range(1..=7);
    let c = rng.random_range(1..=4);
    let n = c * d * hh * w;
    let x_vals: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
    let x = Tensor5::from_vec(Shape5::new(1, c, d, hh, w), x_vals.clone()).unwrap();
    let got = crate::tensor::maxpool3d(&x);
    let (want, _) = naive_maxpool3d(
        &x_vals.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        NaiveShape { c, d, h: hh, w },
    );
    got.values()
        .iter()
        .zip(&want)
        .map(|(&g, &n)| (g as f64 - n).abs())
        .fold(0.0, f64::max)
}

/// Linearity residual of conv: max |conv(ax+by) - (a conv(x) + b conv(y) -
/// (a+b-1) bias-field)|.
pub fn conv_linearity_residual(seed: u64) -> f64 {
    let mut rng = crate::rng::stream(seed, 109, 0);
    let d = rng.random_range(1..=6);
    let hh = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let c_in = rng.random_range(1..=2);
    let c_out = rng.random_range(1..=2);
    let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap();
    let n_in = c_in * d * hh * w;
    let shape = Shape5::new(1, c_in, d, hh, w);
    let xv: Vec<f32> = (0..n_in).map(|_| rng.random::<f32>() - 0.5).collect();
    let yv: Vec<f32> = (0..n_in).map(|_| rng.random::<f32>() - 0.5).collect();
    let (a, b) = (0.75f32, -1.25f32);
    let x = Tensor5::from_vec(shape, xv.clone()).unwrap();
    let y = Tensor5::from_vec(shape, yv.clone()).unwrap();
    let mixed = Tensor5::from_vec(
        shape,
        xv.iter().zip(&yv).map(|(&p, &q)| a * p + b * q).collect(),
    )
    .unwrap();
    let p = crate::tensor::ConvParams::new(
        c_out,
        c_in,
        (k, k, k),
        (0..c_out * c_in * k * k * k).map(|_| (rng.random::<f32>() - 0.5) * 0.5).collect(),
        (0..c_out).map(|_| rng.random::<f32>() - 0.5).collect(),
    )
    .unwrap();
    let cm = crate::tensor::conv3d(&mixed, &p).unwrap();
    let cx = crate::tensor::conv3d(&x, &p).unwrap();
    let cy = crate::tensor::conv3d(&y, &p).unwrap();
    let sp = d * hh * w;
    let mut worst = 0.0f64;
    for co in 0..c_out {
        let bias = p.bias[co] as f64;
        for i in 0..sp {
            let idx = co * sp + i;
            let lhs = cm.values()[idx] as f64;
            let rhs = a as f64 * cx.values()[idx] as f64 + b as f64 * cy.values()[idx] as f64
                - (a as f64 + b as f64 - 1.0) * bias;
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}
