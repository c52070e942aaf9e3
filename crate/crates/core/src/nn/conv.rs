//! 2-D convolution as a candle custom op: im2col + gemm for the forward pass and
//! for both backward products. Single-threaded gemm keeps results bit-reproducible.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

/// Boundary handling for the implicit padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zeros,
    /// Mirror without repeating the edge sample; folds periodically for large offsets.
    Reflect,
}

/// Mirror index `i` into `0..n` (reflect-101 convention, periodic beyond one fold).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source offset within one input plane for every (ky, kx, oy, ox); `u32::MAX` marks a zero pad.
    fn gather_table(&self) -> Vec<u32> {
        let (ho, wo) = self.out_hw();
        let mut table = Vec::with_capacity(self.k * self.k * ho * wo);
        for ky in 0..self.k {
            for kx in 0..self.k {
                for oy in 0..ho {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.h
                            && (ix as usize) < self.w;
                        let src = match (inside, self.mode) {
                            (true, _) => Some(iy as usize * self.w + ix as usize),
                            (false, PadMode::Zeros) => None,
                            (false, PadMode::Reflect) => {
                                Some(reflect_index(iy, self.h) * self.w + reflect_index(ix, self.w))
                            }
                        };
                        table.push(src.map_or(u32::MAX, |s| s as u32));
                    }
                }
            }
        }
        table
    }
}

trait Real: Copy + Default + std::ops::AddAssign + 'static {
    fn one() -> Self;
}
impl Real for f32 {
    fn one() -> Self {
        1.0
    }
}
impl Real for f64 {
    fn one() -> Self {
        1.0
    }
}

fn im2col<T: Real>(geo: &Geometry, table: &[u32], input: &[T], cols: &mut [T]) {
    let hw_in = geo.h * geo.w;
    let span = table.len();
    for c in 0..geo.c_in {
        let plane = &input[c * hw_in..(c + 1) * hw_in];
        let dst = &mut cols[c * span..(c + 1) * span];
        for (d, &src) in dst.iter_mut().zip(table) {
            *d = if src == u32::MAX {
                T::default()
            } else {
                plane[src as usize]
            };
        }
    }
}

fn col2im<T: Real>(geo: &Geometry, table: &[u32], cols: &[T], grad_in: &mut [T]) {
    let hw_in = geo.h * geo.w;
    let span = table.len();
    for c in 0..geo.c_in {
        let plane = &mut grad_in[c * hw_in..(c + 1) * hw_in];
        let src = &cols[c * span..(c + 1) * span];
        for (&v, &dst) in src.iter().zip(table) {
            if dst != u32::MAX {
                plane[dst as usize] += v;
            }
        }
    }
}

/// dst(m×n) = [dst +] lhs(m×k) · rhs(k×n), with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_strides: (isize, isize),
    rhs: &[T],
    rhs_strides: (isize, isize),
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: slices cover every index reachable through the given strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_strides.1,
            lhs_strides.0,
            rhs.as_ptr(),
            rhs_strides.1,
            rhs_strides.0,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn conv_forward<T: Real>(geo: &Geometry, input: &[T], weight: &[T]) -> Vec<T> {
    let (ho, wo) = geo.out_hw();
    let hw_out = ho * wo;
    let patch = geo.patch();
    let mut out = vec![T::default(); geo.n * geo.c_out * hw_out];
    let table = geo.gather_table();
    let mut cols = vec![T::default(); if geo.is_pointwise() { 0 } else { patch * hw_out }];
    let in_per = geo.c_in * geo.h * geo.w;
    for b in 0..geo.n {
        let x = &input[b * in_per..(b + 1) * in_per];
        let cols_ref: &[T] = if geo.is_pointwise() {
            x
        } else {
            im2col(geo, &table, x, &mut cols);
            &cols
        };
        let dst = &mut out[b * geo.c_out * hw_out..(b + 1) * geo.c_out * hw_out];
        matmul(
            geo.c_out,
            hw_out,
            patch,
            dst,
            false,
            weight,
            (patch as isize, 1),
            cols_ref,
            (hw_out as isize, 1),
        );
    }
    out
}

fn conv_input_grad<T: Real>(geo: &Geometry, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let (ho, wo) = geo.out_hw();
    let hw_out = ho * wo;
    let patch = geo.patch();
    let in_per = geo.c_in * geo.h * geo.w;
    let mut grad_in = vec![T::default(); geo.n * in_per];
    let table = geo.gather_table();
    let mut cols = vec![T::default(); patch * hw_out];
    for b in 0..geo.n {
        let g = &grad_out[b * geo.c_out * hw_out..(b + 1) * geo.c_out * hw_out];
        let gi = &mut grad_in[b * in_per..(b + 1) * in_per];
        if geo.is_pointwise() {
            matmul(
                patch,
                hw_out,
                geo.c_out,
                gi,
                false,
                weight,
                (1, patch as isize),
                g,
                (hw_out as isize, 1),
            );
        } else {
            matmul(
                patch,
                hw_out,
                geo.c_out,
                &mut cols,
                false,
                weight,
                (1, patch as isize),
                g,
                (hw_out as isize, 1),
            );
            col2im(geo, &table, &cols, gi);
        }
    }
    grad_in
}

fn conv_weight_grad<T: Real>(geo: &Geometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let (ho, wo) = geo.out_hw();
    let hw_out = ho * wo;
    let patch = geo.patch();
    let in_per = geo.c_in * geo.h * geo.w;
    let mut grad_w = vec![T::default(); geo.c_out * patch];
    let table = geo.gather_table();
    let mut cols = vec![T::default(); if geo.is_pointwise() { 0 } else { patch * hw_out }];
    for b in 0..geo.n {
        let x = &input[b * in_per..(b + 1) * in_per];
        let cols_ref: &[T] = if geo.is_pointwise() {
            x
        } else {
            im2col(geo, &table, x, &mut cols);
            &cols
        };
        let g = &grad_out[b * geo.c_out * hw_out..(b + 1) * geo.c_out * hw_out];
        matmul(
            geo.c_out,
            patch,
            hw_out,
            &mut grad_w,
            b > 0,
            g,
            (hw_out as isize, 1),
            cols_ref,
            (1, hw_out as isize),
        );
    }
    grad_w
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

macro_rules! dispatch2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let $a = contiguous(x, $l1)?;
                let $b = contiguous(y, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let $a = contiguous(x, $l1)?;
                let $b = contiguous(y, $l2)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported dtype combination", $name),
        }
    };
}

struct ConvFwd(Geometry);
struct ConvInputGrad(Geometry);
struct ConvWeightGrad(Geometry);

impl CustomOp2 for ConvFwd {
    fn name(&self) -> &'static str {
        "lh-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let geo = &self.0;
        let (ho, wo) = geo.out_hw();
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |x, w| conv_forward(geo, x, w));
        Ok((out, Shape::from((geo.n, geo.c_out, ho, wo))))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gi = if input.track_op() {
            Some(grad.apply_op2_no_bwd(weight, &ConvInputGrad(self.0))?)
        } else {
            None
        };
        let gw = if weight.track_op() {
            Some(input.apply_op2_no_bwd(&grad, &ConvWeightGrad(self.0))?)
        } else {
            None
        };
        Ok((gi, gw))
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "lh-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let geo = &self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |g, w| conv_input_grad(geo, g, w));
        Ok((out, Shape::from((geo.n, geo.c_in, geo.h, geo.w))))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "lh-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let geo = &self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |x, g| conv_weight_grad(geo, x, g));
        Ok((out, Shape::from((geo.c_out, geo.c_in, geo.k, geo.k))))
    }
}

/// Square-kernel convolution of `x` (N,C,H,W) with `weight` (O,C,K,K); no bias.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> candle_core::Result<Tensor> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, wc, kh, kw) = weight.dims4()?;
    if wc != c_in || kh != kw {
        candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", weight.dims(), x.dims());
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        candle_core::bail!("conv2d: kernel {kh} does not fit {h}x{w} with padding {padding}");
    }
    let geo = Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        pad: padding,
        mode,
    };
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, ConvFwd(geo))
}
