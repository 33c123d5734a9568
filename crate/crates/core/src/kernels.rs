//! Fused CPU kernels for the layers that dominate training time: "same"
//! convolution, training-mode batch normalisation, nearest-neighbour
//! upsampling and the LSTM recurrence.
//!
//! The stock tensor ops build these from many small broadcast kernels (or,
//! for the convolution input gradient, a direct transposed convolution);
//! each op here does one pass forward and one pass backward. Convolutions
//! are im2col/col2im around a GEMM. All ops accept f32 and f64.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

use crate::error::{Error, Result};

trait Float: WithDType + 'static {}
impl Float for f32 {}
impl Float for f64 {}

fn slice<'a, T: Float>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("kernel operands must be contiguous"),
    }
}

fn values<T: Float>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.detach().flatten_all()?.to_vec1::<T>()
}

/// Runs `$body` with `$t` bound to the float type of `$dtype`.
macro_rules! float_dispatch {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
            other => candle_core::bail!("unsupported dtype {other:?}"),
        }
    };
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], kernel: &[usize], stride: usize) -> candle_core::Result<Self> {
        let (&[batch, cin, h, w], &[cout, kc, k, k2]) = (x, kernel) else {
            candle_core::bail!("conv expects NCHW input and OIHW kernel, got {x:?} and {kernel:?}")
        };
        if kc != cin || k != k2 || k % 2 == 0 || stride == 0 {
            candle_core::bail!("incompatible conv input {x:?} / kernel {kernel:?} / stride {stride}")
        }
        let pad = k / 2;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Input row feeding output row `oy` through kernel tap `ky`.
    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad).filter(|&i| i < self.h)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(s).min(self.ow);
        (lo.min(hi), hi)
    }
}

fn im2col<T: Float>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.source_row(oy, ky) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                let (lo, hi) = g.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let Some(iy) = g.source_row(oy, ky) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.ow + lo..oy * g.ow + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `dst (m×n) [+]= a (m×k) · b (k×n)`; `a_t`/`b_t` mark operands
/// stored transposed.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Float>(m: usize, n: usize, k: usize, dst: &mut [T], a: &[T], a_t: bool, b: &[T], b_t: bool, acc: bool) {
    assert!(dst.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    let (a_cs, a_rs) = if a_t { (m as isize, 1) } else { (1, k as isize) };
    let (b_cs, b_rs) = if b_t { (k as isize, 1) } else { (1, n as isize) };
    // SAFETY: the assertion above bounds every strided access.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            acc,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn conv_forward<T: Float>(g: &Geometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); rows * n];
    let mut out = vec![T::zero(); g.batch * g.cout * n];
    for b in 0..g.batch {
        im2col(g, &x[b * g.plane()..], &mut cols);
        matmul(g.cout, n, rows, &mut out[b * g.cout * n..], kernel, false, &cols, false, false);
    }
    out
}

/// `W[o, i, y, x] -> W[i, o, k-1-y, k-1-x]`.
fn flip_kernel<T: Float>(g: &Geometry, kernel: &[T]) -> Vec<T> {
    let k2 = g.k * g.k;
    let mut out = vec![T::zero(); kernel.len()];
    for o in 0..g.cout {
        for i in 0..g.cin {
            let src = &kernel[(o * g.cin + i) * k2..][..k2];
            let dst = &mut out[(i * g.cout + o) * k2..][..k2];
            for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                *d = v;
            }
        }
    }
    out
}

fn conv_backward<T: Float>(g: &Geometry, x: &[T], kernel: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
    let (rows, n) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); rows * n];
    // accumulated transposed, (rows × cout): the long operand then streams
    let mut dk_t = vec![T::zero(); rows * g.cout];
    for b in 0..g.batch {
        im2col(g, &x[b * g.plane()..], &mut cols);
        let gb = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        matmul(rows, g.cout, n, &mut dk_t, &cols, false, gb, true, b > 0);
    }
    let mut dk = vec![T::zero(); g.cout * rows];
    for (r, chunk) in dk_t.chunks(g.cout).enumerate() {
        for (o, &v) in chunk.iter().enumerate() {
            dk[o * rows + r] = v;
        }
    }
    let dx = if g.stride == 1 {
        // the input gradient of a stride-1 "same" convolution is itself one
        let flipped = Geometry { cin: g.cout, cout: g.cin, ..*g };
        conv_forward(&flipped, grad, &flip_kernel(g, kernel))
    } else {
        let mut dcols = vec![T::zero(); rows * n];
        let mut dx = vec![T::zero(); g.batch * g.plane()];
        for b in 0..g.batch {
            let gb = &grad[b * g.cout * n..(b + 1) * g.cout * n];
            matmul(rows, n, g.cout, &mut dcols, kernel, true, gb, false, false);
            col2im(g, &dcols, &mut dx[b * g.plane()..(b + 1) * g.plane()]);
        }
        dx
    };
    (dx, dk)
}

struct Conv {
    stride: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride)?;
        let out = float_dispatch!(s1.dtype(), T => {
            T::to_cpu_storage_owned(conv_forward::<T>(&g, slice(s1, l1)?, slice(s2, l2)?))
        });
        Ok((out, Shape::from((g.batch, g.cout, g.oh, g.ow))))
    }

    fn bwd(&self, x: &Tensor, kernel: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), kernel.dims(), self.stride)?;
        let (dx, dk) = float_dispatch!(x.dtype(), T => {
            let (dx, dk) = conv_backward::<T>(&g, &values(x)?, &values(kernel)?, &values(grad)?);
            (Tensor::from_vec(dx, x.shape(), x.device())?, Tensor::from_vec(dk, kernel.shape(), x.device())?)
        });
        Ok((Some(dx), Some(dk)))
    }
}

/// Convolution with padding `k / 2`, no bias.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    if x.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv expects NCHW input and OIHW kernel, got {:?} and {:?}",
            x.dims(),
            kernel.dims()
        )));
    }
    if x.dims()[1] != kernel.dims()[1] {
        return Err(Error::Shape(format!(
            "conv input has {} channels, kernel expects {}",
            x.dims()[1],
            kernel.dims()[1]
        )));
    }
    Ok(x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv { stride })?)
}

// ---------------------------------------------------------------------------
// batch normalisation

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let data = x.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let planes = || (0..b).flat_map(|i| &data[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        let m = planes().sum::<f64>() / n;
        mean[ch] = m;
        var[ch] = planes().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    Ok((mean, var))
}

/// `y = (x - μ_c) · inv_std_c · γ_c + β_c` with statistics fixed at
/// construction; the backward pass differentiates through the statistics as
/// if they were computed from `x` in the graph.
struct Normalize {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Normalize {
    fn forward<T: Float>(&self, dims: &[usize], x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let (c, hw) = (dims[1], dims[2] * dims[3]);
        let mut out = Vec::with_capacity(x.len());
        for (i, plane) in x.chunks(hw).enumerate() {
            let ch = i % c;
            let scale = self.inv_std[ch] * gamma[ch].to_f64();
            let shift = beta[ch].to_f64() - self.mean[ch] * scale;
            out.extend(plane.iter().map(|&v| T::from_f64(v.to_f64() * scale + shift)));
        }
        out
    }

    fn backward<T: Float>(&self, dims: &[usize], x: &[T], gamma: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (b, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let n = (b * hw) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (i, (xp, gp)) in x.chunks(hw).zip(grad.chunks(hw)).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.inv_std[ch]);
            for (&xv, &gv) in xp.iter().zip(gp) {
                let g = gv.to_f64();
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * (xv.to_f64() - m) * s;
            }
        }
        let mut dx = Vec::with_capacity(x.len());
        for (i, (xp, gp)) in x.chunks(hw).zip(grad.chunks(hw)).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.inv_std[ch]);
            let k = gamma[ch].to_f64() * s / n;
            dx.extend(xp.iter().zip(gp).map(|(&xv, &gv)| {
                let xhat = (xv.to_f64() - m) * s;
                T::from_f64(k * (n * gv.to_f64() - sum_dy[ch] - xhat * sum_dy_xhat[ch]))
            }));
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(sum_dy_xhat), cast(sum_dy))
    }
}

impl CustomOp3 for Normalize {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = float_dispatch!(s1.dtype(), T => {
            T::to_cpu_storage_owned(self.forward::<T>(l1.dims(), slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?))
        });
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = float_dispatch!(x.dtype(), T => {
            let (dx, dg, db) = self.backward::<T>(x.dims(), &values(x)?, &values(gamma)?, &values(grad)?);
            (
                Tensor::from_vec(dx, x.shape(), x.device())?,
                Tensor::from_vec(dg, gamma.shape(), x.device())?,
                Tensor::from_vec(db, beta.shape(), x.device())?,
            )
        });
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Training-mode batch normalisation of NCHW `x` with per-channel affine
/// `gamma`, `beta: (C,)`. Returns the output and the batch statistics
/// (mean, biased variance).
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "batch norm over {c} channels got affine shapes {:?} / {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let (mean, var) = channel_stats(x)?;
    let op = Normalize {
        inv_std: var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        mean: mean.clone(),
    };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    Ok((y, mean, var))
}

// ---------------------------------------------------------------------------
// upsampling

struct Upsample2x;

impl Upsample2x {
    fn forward<T: Float>(dims: &[usize], x: &[T]) -> Vec<T> {
        let (h, w) = (dims[2], dims[3]);
        let mut out = Vec::with_capacity(4 * x.len());
        for plane in x.chunks(h * w) {
            for row in plane.chunks(w) {
                let start = out.len();
                for &v in row {
                    out.extend([v, v]);
                }
                out.extend_from_within(start..start + 2 * w);
            }
        }
        out
    }

    fn backward<T: Float>(dims: &[usize], grad: &[T]) -> Vec<T> {
        let (h, w) = (dims[2], dims[3]);
        let ow = 2 * w;
        let mut dx = Vec::with_capacity(grad.len() / 4);
        for plane in grad.chunks(4 * h * w) {
            for r in 0..h {
                let (top, bottom) = (&plane[2 * r * ow..][..ow], &plane[(2 * r + 1) * ow..][..ow]);
                dx.extend((0..w).map(|c| top[2 * c] + top[2 * c + 1] + bottom[2 * c] + bottom[2 * c + 1]));
            }
        }
        dx
    }
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l.dims();
        let out = float_dispatch!(s.dtype(), T => T::to_cpu_storage_owned(Self::forward::<T>(d, slice(s, l)?)));
        Ok((out, Shape::from((d[0], d[1], 2 * d[2], 2 * d[3]))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dx = float_dispatch!(x.dtype(), T => {
            Tensor::from_vec(Self::backward::<T>(x.dims(), &values(grad)?), x.shape(), x.device())?
        });
        Ok(Some(dx))
    }
}

/// Nearest-neighbour 2× upsampling of an NCHW tensor.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

// ---------------------------------------------------------------------------
// recurrence

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Whole-sequence LSTM recurrence over precomputed input gates. Gate order
/// is (input, forget, cell, output). Where `mask` is false the state is
/// carried through unchanged and the output is zero.
struct Recurrence {
    batch: usize,
    len: usize,
    hidden: usize,
    mask: Vec<bool>,
    reverse: bool,
}

/// Per-step activations kept for the backward pass.
struct StepTrace<T> {
    t: usize,
    gates: Vec<T>,
    c_prev: Vec<T>,
    c: Vec<T>,
    h_prev: Vec<T>,
}

impl Recurrence {
    fn order(&self) -> Vec<usize> {
        if self.reverse {
            (0..self.len).rev().collect()
        } else {
            (0..self.len).collect()
        }
    }

    fn forward<T: Float>(&self, gx: &[T], w: &[T], mut trace: Option<&mut Vec<StepTrace<T>>>) -> Vec<T> {
        let (b, l, hd) = (self.batch, self.len, self.hidden);
        let g4 = 4 * hd;
        let mut out = vec![T::zero(); b * l * hd];
        let mut h = vec![T::zero(); b * hd];
        let mut c = vec![T::zero(); b * hd];
        let mut pre = vec![T::zero(); b * g4];
        for t in self.order() {
            for bi in 0..b {
                pre[bi * g4..(bi + 1) * g4].copy_from_slice(&gx[(bi * l + t) * g4..][..g4]);
            }
            matmul(b, g4, hd, &mut pre, &h, false, w, true, true);
            let (h_prev, c_prev) = (h.clone(), c.clone());
            for bi in 0..b {
                let p = &mut pre[bi * g4..(bi + 1) * g4];
                for j in 0..hd {
                    p[j] = T::from_f64(logistic(p[j].to_f64()));
                    p[hd + j] = T::from_f64(logistic(p[hd + j].to_f64()));
                    p[2 * hd + j] = T::from_f64(p[2 * hd + j].to_f64().tanh());
                    p[3 * hd + j] = T::from_f64(logistic(p[3 * hd + j].to_f64()));
                }
                if !self.mask[bi * l + t] {
                    continue;
                }
                for j in 0..hd {
                    let k = bi * hd + j;
                    let cn = p[hd + j].to_f64() * c[k].to_f64() + p[j].to_f64() * p[2 * hd + j].to_f64();
                    c[k] = T::from_f64(cn);
                    h[k] = T::from_f64(p[3 * hd + j].to_f64() * cn.tanh());
                    out[(bi * l + t) * hd + j] = h[k];
                }
            }
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(StepTrace {
                    t,
                    gates: pre.clone(),
                    c_prev,
                    c: c.clone(),
                    h_prev,
                });
            }
        }
        out
    }

    fn backward<T: Float>(&self, gx: &[T], w: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
        let (b, l, hd) = (self.batch, self.len, self.hidden);
        let g4 = 4 * hd;
        let mut trace = Vec::with_capacity(l);
        self.forward(gx, w, Some(&mut trace));
        let mut dgx = vec![T::zero(); gx.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut dh = vec![T::zero(); b * hd];
        let mut dc = vec![T::zero(); b * hd];
        let mut dpre = vec![T::zero(); b * g4];
        for step in trace.iter().rev() {
            let t = step.t;
            let mut dh_next = vec![T::zero(); b * hd];
            let mut dc_next = dc.clone();
            dpre.fill(T::zero());
            for bi in 0..b {
                if !self.mask[bi * l + t] {
                    dh_next[bi * hd..(bi + 1) * hd].copy_from_slice(&dh[bi * hd..(bi + 1) * hd]);
                    continue;
                }
                let gates = &step.gates[bi * g4..(bi + 1) * g4];
                let dp = &mut dpre[bi * g4..(bi + 1) * g4];
                for j in 0..hd {
                    let k = bi * hd + j;
                    let (i, f, g, o) = (
                        gates[j].to_f64(),
                        gates[hd + j].to_f64(),
                        gates[2 * hd + j].to_f64(),
                        gates[3 * hd + j].to_f64(),
                    );
                    let tc = step.c[k].to_f64().tanh();
                    let dht = dh[k].to_f64() + grad[(bi * l + t) * hd + j].to_f64();
                    let dct = dc[k].to_f64() + dht * o * (1.0 - tc * tc);
                    dp[j] = T::from_f64(dct * g * i * (1.0 - i));
                    dp[hd + j] = T::from_f64(dct * step.c_prev[k].to_f64() * f * (1.0 - f));
                    dp[2 * hd + j] = T::from_f64(dct * i * (1.0 - g * g));
                    dp[3 * hd + j] = T::from_f64(dht * tc * o * (1.0 - o));
                    dc_next[k] = T::from_f64(dct * f);
                }
                dgx[(bi * l + t) * g4..][..g4].copy_from_slice(dp);
            }
            matmul(b, hd, g4, &mut dh_next, &dpre, false, w, false, true);
            matmul(g4, hd, b, &mut dw, &dpre, true, &step.h_prev, false, true);
            dh = dh_next;
            dc = dc_next;
        }
        (dgx, dw)
    }
}

impl CustomOp2 for Recurrence {
    fn name(&self) -> &'static str {
        "lstm-sequence"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = float_dispatch!(s1.dtype(), T => {
            T::to_cpu_storage_owned(self.forward::<T>(slice(s1, l1)?, slice(s2, l2)?, None))
        });
        Ok((out, Shape::from((self.batch, self.len, self.hidden))))
    }

    fn bwd(&self, gx: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (dgx, dw) = float_dispatch!(gx.dtype(), T => {
            let (dgx, dw) = self.backward::<T>(&values(gx)?, &values(w)?, &values(grad)?);
            (Tensor::from_vec(dgx, gx.shape(), gx.device())?, Tensor::from_vec(dw, w.shape(), gx.device())?)
        });
        Ok((Some(dgx), Some(dw)))
    }
}

/// Runs an LSTM over input gates `(B, L, 4H)` with recurrent weights
/// `w_hh: (4H, H)`, returning masked hidden states `(B, L, H)`. `mask` is
/// row-major `(B, L)`; `reverse` reads the sequence right to left.
pub fn lstm_sequence(gates_x: &Tensor, w_hh: &Tensor, mask: &[bool], reverse: bool) -> Result<Tensor> {
    let (b, l, g4) = gates_x.dims3()?;
    let hidden = g4 / 4;
    if g4 % 4 != 0 || w_hh.dims() != [g4, hidden] || mask.len() != b * l {
        return Err(Error::Shape(format!(
            "lstm gates {:?}, recurrent weights {:?}, mask of {}",
            gates_x.dims(),
            w_hh.dims(),
            mask.len()
        )));
    }
    let op = Recurrence {
        batch: b,
        len: l,
        hidden,
        mask: mask.to_vec(),
        reverse,
    };
    Ok(gates_x.contiguous()?.apply_op2(&w_hh.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use candle_core::Var;

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn var(shape: &[usize], std: f64, dtype: DType) -> Var {
        let t = Tensor::randn(0f64, std, shape, &device()).unwrap().to_dtype(dtype).unwrap();
        Var::from_tensor(&t).unwrap()
    }

    fn tolerance(dtype: DType) -> f64 {
        if dtype == DType::F64 {
            1e-11
        } else {
            1e-4
        }
    }

    /// Value and gradients of `sum(f(inputs) · probe)` must agree between
    /// the fused op and the composite reference.
    fn agree(inputs: &[&Var], fused: Tensor, reference: Tensor, dtype: DType) {
        let tol = tolerance(dtype);
        assert_eq!(fused.dims(), reference.dims());
        assert!(max_diff(&fused, &reference) < tol);
        let probe = Tensor::randn(0f64, 1.0, fused.shape(), &device()).unwrap().to_dtype(dtype).unwrap();
        let ga = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in inputs {
            let d = max_diff(ga.get(v).unwrap(), gb.get(v).unwrap());
            assert!(d < tol * 10.0, "gradient mismatch {d}");
        }
    }

    fn check_conv(b: usize, cin: usize, cout: usize, side: usize, k: usize, stride: usize, dtype: DType) {
        let x = var(&[b, cin, side, side], 1.0, dtype);
        let w = var(&[cout, cin, k, k], 0.3, dtype);
        let fused = conv2d_same(&x, &w, stride).unwrap();
        let reference = x.conv2d(&w, k / 2, stride, 1, 1).unwrap();
        agree(&[&x, &w], fused, reference, dtype);
    }

    #[test]
    fn conv_matches_stock_convolution() {
        check_conv(2, 3, 4, 7, 3, 1, DType::F64);
        check_conv(3, 5, 2, 8, 3, 1, DType::F32);
        check_conv(1, 2, 3, 6, 1, 1, DType::F64);
        check_conv(1, 2, 2, 9, 5, 1, DType::F64);
        check_conv(2, 3, 4, 8, 3, 2, DType::F64);
        check_conv(2, 4, 3, 16, 3, 2, DType::F32);
        check_conv(1, 2, 2, 7, 3, 2, DType::F64);
    }

    #[test]
    fn conv_channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros((1, 3, 4, 4), DType::F32, &device()).unwrap();
        let w = Tensor::zeros((2, 2, 3, 3), DType::F32, &device()).unwrap();
        assert!(matches!(conv2d_same(&x, &w, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_matches_composite_formula() {
        for dtype in [DType::F64, DType::F32] {
            let x = var(&[3, 4, 5, 6], 2.0, dtype);
            let x = Var::from_tensor(&(x.as_tensor() + 1.5).unwrap()).unwrap();
            let gamma = var(&[4], 1.0, dtype);
            let beta = var(&[4], 1.0, dtype);
            let (fused, mean, var_) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
            let m = x.mean_keepdim((0, 2, 3)).unwrap();
            let centered = x.broadcast_sub(&m).unwrap();
            let v = centered.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
            let reference = centered
                .broadcast_div(&(v.clone() + 1e-5).unwrap().sqrt().unwrap())
                .unwrap()
                .broadcast_mul(&gamma.reshape((1, 4, 1, 1)).unwrap())
                .unwrap()
                .broadcast_add(&beta.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            let expect_mean = m.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
            let expect_var = v.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in mean.iter().zip(&expect_mean).chain(var_.iter().zip(&expect_var)) {
                assert!((a - b).abs() < tolerance(dtype));
            }
            agree(&[&x, &gamma, &beta], fused, reference, dtype);
        }
    }

    #[test]
    fn upsample_matches_broadcast_reference() {
        for dtype in [DType::F64, DType::F32] {
            let x = var(&[2, 3, 4, 5], 1.0, dtype);
            let reference = x
                .reshape((2, 3, 4, 1, 5, 1))
                .unwrap()
                .broadcast_as((2, 3, 4, 2, 5, 2))
                .unwrap()
                .reshape((2, 3, 8, 10))
                .unwrap();
            agree(&[&x], upsample_nearest2x(&x).unwrap(), reference, dtype);
        }
    }
}
