//! Differentiable fixed-weight spatial operators: nearest upsampling and a separable
//! Gaussian blur with reflect boundaries (depthwise, per channel).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use super::conv::reflect_index;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected a contiguous operand"),
    }
}

macro_rules! dispatch1 {
    ($name:expr, $s:expr, $l:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(x) => {
                let $a = contiguous(x, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(x) => {
                let $a = contiguous(x, $l)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported dtype", $name),
        }
    };
}

/// Normalized 1-D Gaussian taps for `sigma`, radius ⌈3σ⌉.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Blurs each `h×w` plane of `data` in place (reflect boundary), separably.
/// `adjoint` applies the transposed operator instead.
pub fn blur_planes<T>(data: &mut [T], h: usize, w: usize, taps: &[f64], adjoint: bool)
where
    T: Copy + Into<f64> + FromF64,
{
    let radius = (taps.len() / 2) as isize;
    let mut line = vec![0f64; h.max(w)];
    let mut out = vec![0f64; h.max(w)];
    for plane in data.chunks_mut(h * w) {
        // rows
        for y in 0..h {
            for x in 0..w {
                line[x] = plane[y * w + x].into();
            }
            filter_line(&line[..w], &mut out[..w], taps, radius, adjoint);
            for x in 0..w {
                plane[y * w + x] = T::from_f64(out[x]);
            }
        }
        // columns
        for x in 0..w {
            for y in 0..h {
                line[y] = plane[y * w + x].into();
            }
            filter_line(&line[..h], &mut out[..h], taps, radius, adjoint);
            for y in 0..h {
                plane[y * w + x] = T::from_f64(out[y]);
            }
        }
    }
}

fn filter_line(src: &[f64], dst: &mut [f64], taps: &[f64], radius: isize, adjoint: bool) {
    let n = src.len();
    dst.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        for (k, &t) in taps.iter().enumerate() {
            let j = reflect_index(i as isize + k as isize - radius, n);
            if adjoint {
                dst[j] += t * src[i];
            } else {
                dst[i] += t * src[j];
            }
        }
    }
}

pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}
impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}
impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

struct Blur {
    taps: Vec<f64>,
    adjoint: bool,
}

impl CustomOp1 for Blur {
    fn name(&self) -> &'static str {
        "lh-gaussian-blur"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, h, w) = l.shape().dims4()?;
        let out = dispatch1!(self.name(), s, l, |x| {
            let mut v = x.to_vec();
            blur_planes(&mut v, h, w, &self.taps, self.adjoint);
            v
        });
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let adj = Blur {
            taps: self.taps.clone(),
            adjoint: !self.adjoint,
        };
        Ok(Some(grad.contiguous()?.apply_op1(adj)?))
    }
}

/// Depthwise Gaussian blur of an (N,C,H,W) tensor with reflect boundaries.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Blur {
        taps: gaussian_taps(sigma),
        adjoint: false,
    })
}

struct Upsample(usize);
struct BlockSum(usize);

impl CustomOp1 for Upsample {
    fn name(&self) -> &'static str {
        "lh-upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let f = self.0;
        let (n, c, h, w) = l.shape().dims4()?;
        let out = dispatch1!(self.name(), s, l, |x| {
            let mut v = Vec::with_capacity(x.len() * f * f);
            for plane in x.chunks(h * w) {
                for y in 0..h * f {
                    let row = &plane[(y / f) * w..(y / f + 1) * w];
                    for &val in row {
                        for _ in 0..f {
                            v.push(val);
                        }
                    }
                }
            }
            v
        });
        Ok((out, Shape::from((n, c, h * f, w * f))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum(self.0))?))
    }
}

impl CustomOp1 for BlockSum {
    fn name(&self) -> &'static str {
        "lh-block-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let f = self.0;
        let (n, c, h, w) = l.shape().dims4()?;
        let (ho, wo) = (h / f, w / f);
        macro_rules! sum {
            ($x:expr) => {{
                let mut v = vec![Default::default(); n * c * ho * wo];
                for (p, plane) in $x.chunks(h * w).enumerate() {
                    for y in 0..ho * f {
                        for x in 0..wo * f {
                            v[p * ho * wo + (y / f) * wo + x / f] += plane[y * w + x];
                        }
                    }
                }
                v
            }};
        }
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(sum!(contiguous(x, l)?)),
            CpuStorage::F64(x) => CpuStorage::F64(sum!(contiguous(x, l)?)),
            _ => candle_core::bail!("block-sum: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, ho, wo))))
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(Upsample(factor))
}

/// Area-average downsampling by an integer factor (dims must divide).
pub fn avg_pool(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    x.avg_pool2d(factor)
}

/// log σ(x) = −softplus(−x), computed stably.
pub fn log_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    // −(max(−x,0) + log(1 + exp(−|x|)))
    let relu_neg = x.neg()?.relu()?;
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    (relu_neg + soft)?.neg()
}
