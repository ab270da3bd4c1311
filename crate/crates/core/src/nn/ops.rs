//! Convolution, transposed convolution, max pooling and instance normalization
//! with their backward passes.
//!
//! Convolutions are lowered to GEMM over im2col buffers. A [`Geometry`]
//! relates a "wide" grid A (convolution input, transposed-convolution output)
//! to a "narrow" grid B (convolution output, transposed-convolution input);
//! output voxel `b` reads A at `b * stride - pad + k`. Three kernels cover all
//! six passes:
//!
//! * [`gather`]: A → B (conv forward, transposed-conv data gradient)
//! * [`scatter`]: B → A (conv data gradient, transposed-conv forward)
//! * [`weight_grad`]: (A, B) → weights
//!
//! Work is split into fixed z-slabs of B. Slab boundaries do not depend on the
//! thread count and partial results are combined in slab order, so results are
//! bit-identical no matter how many threads run.

use std::ops::Range;

use rayon::prelude::*;

use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Kernel extent, stride and zero padding per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub a: [usize; 3],
    pub b: [usize; 3],
    pub shape: ConvShape,
}

impl Geometry {
    /// Convolution over an A grid of `a` voxels.
    pub fn conv(a: [usize; 3], shape: ConvShape) -> Result<Self> {
        let mut b = [0; 3];
        for i in 0..3 {
            let span = a[i] + 2 * shape.pad[i];
            if span < shape.kernel[i] {
                return Err(Error::ShapeMismatch(format!(
                    "input extent {} (padded {span}) smaller than kernel {}",
                    a[i], shape.kernel[i]
                )));
            }
            b[i] = (span - shape.kernel[i]) / shape.stride[i] + 1;
        }
        Ok(Geometry { a, b, shape })
    }

    /// Transposed convolution from a B grid of `b` voxels.
    pub fn transposed(b: [usize; 3], shape: ConvShape, output_pad: [usize; 3]) -> Result<Self> {
        let mut a = [0; 3];
        for i in 0..3 {
            let full = (b[i] - 1) * shape.stride[i] + shape.kernel[i] + output_pad[i];
            if full <= 2 * shape.pad[i] {
                return Err(Error::ShapeMismatch(format!("transposed conv output on axis {i} is empty")));
            }
            a[i] = full - 2 * shape.pad[i];
        }
        Ok(Geometry { a, b, shape })
    }

    fn a_plane(&self) -> usize {
        self.a.iter().product()
    }

    fn b_plane(&self) -> usize {
        self.b.iter().product()
    }

    /// Fixed partition of B's z-planes so one im2col slab stays near 2M elements.
    fn slabs(&self, rows: usize) -> Vec<Range<usize>> {
        const TARGET: usize = 1 << 21;
        let plane = self.b[0] * self.b[1];
        let per = (TARGET / (rows * plane).max(1)).max(1);
        (0..self.b[2]).step_by(per).map(|z| z..(z + per).min(self.b[2])).collect()
    }

    /// Valid `b` range along an axis for kernel offset `k` (A index in bounds).
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.shape.stride[axis];
        let p = self.shape.pad[axis] as isize;
        let n_a = self.a[axis] as isize;
        let n_b = self.b[axis];
        let off = k as isize - p;
        // need 0 <= b*s + off < n_a
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let hi_excl = if n_a - off <= 0 {
            0
        } else {
            (((n_a - off) as usize).div_ceil(s)).min(n_b)
        };
        (lo.min(n_b), hi_excl.max(lo.min(n_b)))
    }
}

/// im2col for B z-planes `zs`: rows are (channel, kz, ky, kx), columns B positions.
fn im2col<T: Real>(src: &[T], channels: usize, g: &Geometry, zs: Range<usize>, col: &mut [T]) {
    let [kx_n, ky_n, kz_n] = g.shape.kernel;
    let [sx, sy, sz] = g.shape.stride;
    let [px, py, pz] = g.shape.pad;
    let [ax_n, ay_n, az_n] = g.a;
    let [bx_n, by_n, _] = g.b;
    let cols = bx_n * by_n * zs.len();
    let a_plane = g.a_plane();
    let mut row = 0;
    for c in 0..channels {
        let chan = &src[c * a_plane..(c + 1) * a_plane];
        for kz in 0..kz_n {
            for ky in 0..ky_n {
                for kx in 0..kx_n {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    row += 1;
                    let (x_lo, x_hi) = g.valid_range(0, kx);
                    let mut i = 0;
                    for bz in zs.clone() {
                        let az = (bz * sz + kz) as isize - pz as isize;
                        for by in 0..by_n {
                            let ay = (by * sy + ky) as isize - py as isize;
                            let line = &mut dst[i..i + bx_n];
                            i += bx_n;
                            if az < 0 || az >= az_n as isize || ay < 0 || ay >= ay_n as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let base = ax_n * (ay as usize + ay_n * az as usize);
                            line[..x_lo].fill(T::zero());
                            line[x_hi..].fill(T::zero());
                            if x_hi > x_lo {
                                let a0 = (x_lo * sx + kx) - px;
                                if sx == 1 {
                                    line[x_lo..x_hi].copy_from_slice(&chan[base + a0..base + a0 + (x_hi - x_lo)]);
                                } else {
                                    for (j, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                                        *v = chan[base + a0 + j * sx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds an im2col-shaped buffer back onto the A grid.
fn col2im<T: Real>(col: &[T], channels: usize, g: &Geometry, zs: Range<usize>, dst: &mut [T]) {
    let [kx_n, ky_n, kz_n] = g.shape.kernel;
    let [sx, sy, sz] = g.shape.stride;
    let [px, py, pz] = g.shape.pad;
    let [ax_n, ay_n, az_n] = g.a;
    let [bx_n, by_n, _] = g.b;
    let cols = bx_n * by_n * zs.len();
    let a_plane = g.a_plane();
    let mut row = 0;
    for c in 0..channels {
        let chan = &mut dst[c * a_plane..(c + 1) * a_plane];
        for kz in 0..kz_n {
            for ky in 0..ky_n {
                for kx in 0..kx_n {
                    let src = &col[row * cols..(row + 1) * cols];
                    row += 1;
                    let (x_lo, x_hi) = g.valid_range(0, kx);
                    if x_hi <= x_lo {
                        continue;
                    }
                    let mut i = 0;
                    for bz in zs.clone() {
                        let az = (bz * sz + kz) as isize - pz as isize;
                        for by in 0..by_n {
                            let ay = (by * sy + ky) as isize - py as isize;
                            let line = &src[i..i + bx_n];
                            i += bx_n;
                            if az < 0 || az >= az_n as isize || ay < 0 || ay >= ay_n as isize {
                                continue;
                            }
                            let base = ax_n * (ay as usize + ay_n * az as usize);
                            let a0 = (x_lo * sx + kx) - px;
                            if sx == 1 {
                                let out = &mut chan[base + a0..base + a0 + (x_hi - x_lo)];
                                for (o, &v) in out.iter_mut().zip(&line[x_lo..x_hi]) {
                                    *o = *o + v;
                                }
                            } else {
                                for (j, &v) in line[x_lo..x_hi].iter().enumerate() {
                                    let o = &mut chan[base + a0 + j * sx];
                                    *o = *o + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A (`channels` planes) → B (`out_channels` planes) with weights `[out, channels * taps]`.
pub fn gather<T: Real>(src: &[T], channels: usize, g: &Geometry, w: &[T], out_channels: usize) -> Vec<T> {
    let rows = channels * g.shape.taps();
    assert_eq!(src.len(), channels * g.a_plane());
    assert_eq!(w.len(), out_channels * rows);
    let b_plane = g.b_plane();
    let plane_xy = g.b[0] * g.b[1];
    let slabs = g.slabs(rows);
    let parts: Vec<Vec<T>> = slabs
        .par_iter()
        .map(|zs| {
            let cols = plane_xy * zs.len();
            let mut col = vec![T::zero(); rows * cols];
            im2col(src, channels, g, zs.clone(), &mut col);
            let mut out = vec![T::zero(); out_channels * cols];
            gemm(
                T::one(),
                MatRef::row_major(w, out_channels, rows),
                MatRef::row_major(&col, rows, cols),
                T::zero(),
                MatMut::row_major(&mut out, out_channels, cols),
            );
            out
        })
        .collect();
    let mut out = vec![T::zero(); out_channels * b_plane];
    for (zs, part) in slabs.iter().zip(&parts) {
        let cols = plane_xy * zs.len();
        let start = zs.start * plane_xy;
        for m in 0..out_channels {
            out[m * b_plane + start..m * b_plane + start + cols].copy_from_slice(&part[m * cols..(m + 1) * cols]);
        }
    }
    out
}

/// B (`in_channels` planes) → A (`channels` planes), the adjoint of [`gather`].
pub fn scatter<T: Real>(src: &[T], in_channels: usize, g: &Geometry, w: &[T], channels: usize) -> Vec<T> {
    let rows = channels * g.shape.taps();
    let b_plane = g.b_plane();
    assert_eq!(src.len(), in_channels * b_plane);
    assert_eq!(w.len(), in_channels * rows);
    let plane_xy = g.b[0] * g.b[1];
    let slabs = g.slabs(rows);
    let mut out = vec![T::zero(); channels * g.a_plane()];
    let group = rayon::current_num_threads().max(1);
    for chunk in slabs.chunks(group) {
        let cols_bufs: Vec<Vec<T>> = chunk
            .par_iter()
            .map(|zs| {
                let cols = plane_xy * zs.len();
                let start = zs.start * plane_xy;
                let mut col = vec![T::zero(); rows * cols];
                gemm(
                    T::one(),
                    MatRef::row_major(w, in_channels, rows).t(),
                    MatRef::strided(&src[start..], in_channels, cols, b_plane, 1),
                    T::zero(),
                    MatMut::row_major(&mut col, rows, cols),
                );
                col
            })
            .collect();
        for (zs, col) in chunk.iter().zip(&cols_bufs) {
            col2im(col, channels, g, zs.clone(), &mut out);
        }
    }
    out
}

/// Weight gradient `[b_channels, a_channels * taps]` from A values and B gradients.
pub fn weight_grad<T: Real>(a_src: &[T], a_channels: usize, g: &Geometry, b_grad: &[T], b_channels: usize) -> Vec<T> {
    let rows = a_channels * g.shape.taps();
    let b_plane = g.b_plane();
    assert_eq!(a_src.len(), a_channels * g.a_plane());
    assert_eq!(b_grad.len(), b_channels * b_plane);
    let plane_xy = g.b[0] * g.b[1];
    let slabs = g.slabs(rows);
    let mut total = vec![T::zero(); b_channels * rows];
    let group = rayon::current_num_threads().max(1);
    for chunk in slabs.chunks(group) {
        let parts: Vec<Vec<T>> = chunk
            .par_iter()
            .map(|zs| {
                let cols = plane_xy * zs.len();
                let start = zs.start * plane_xy;
                let mut col = vec![T::zero(); rows * cols];
                im2col(a_src, a_channels, g, zs.clone(), &mut col);
                // computed transposed: packing the long im2col rows is much
                // cheaper than packing its columns
                let mut part = vec![T::zero(); rows * b_channels];
                gemm(
                    T::one(),
                    MatRef::row_major(&col, rows, cols),
                    MatRef::strided(&b_grad[start..], b_channels, cols, b_plane, 1).t(),
                    T::zero(),
                    MatMut::row_major(&mut part, rows, b_channels),
                );
                part
            })
            .collect();
        for part in &parts {
            for (r, row) in part.chunks(b_channels).enumerate() {
                for (m, &p) in row.iter().enumerate() {
                    total[m * rows + r] = total[m * rows + r] + p;
                }
            }
        }
    }
    total
}

/// Max pooling; returns the pooled tensor and the flat A index of each maximum.
pub fn max_pool<T: Real>(x: &Tensor<T>, shape: ConvShape) -> Result<(Tensor<T>, Vec<u32>)> {
    let g = Geometry::conv(x.dims(), shape)?;
    let a_plane = g.a_plane();
    let b_plane = g.b_plane();
    let c = x.channels();
    let mut out = vec![T::zero(); c * b_plane];
    let mut arg = vec![0u32; c * b_plane];
    out.par_chunks_mut(b_plane)
        .zip(arg.par_chunks_mut(b_plane))
        .enumerate()
        .for_each(|(ch, (o, am))| {
            let src = x.channel(ch);
            let mut i = 0;
            for bz in 0..g.b[2] {
                for by in 0..g.b[1] {
                    for bx in 0..g.b[0] {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for kz in 0..shape.kernel[2] {
                            let az = (bz * shape.stride[2] + kz) as isize - shape.pad[2] as isize;
                            if az < 0 || az >= g.a[2] as isize {
                                continue;
                            }
                            for ky in 0..shape.kernel[1] {
                                let ay = (by * shape.stride[1] + ky) as isize - shape.pad[1] as isize;
                                if ay < 0 || ay >= g.a[1] as isize {
                                    continue;
                                }
                                for kx in 0..shape.kernel[0] {
                                    let ax = (bx * shape.stride[0] + kx) as isize - shape.pad[0] as isize;
                                    if ax < 0 || ax >= g.a[0] as isize {
                                        continue;
                                    }
                                    let idx = ax as usize + g.a[0] * (ay as usize + g.a[1] * az as usize);
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        o[i] = best;
                        am[i] = best_idx as u32;
                        i += 1;
                    }
                }
            }
        });
    debug_assert!(a_plane <= u32::MAX as usize);
    Ok((Tensor::from_vec(c, g.b, out), arg))
}

pub fn max_pool_backward<T: Real>(grad: &Tensor<T>, arg: &[u32], a_dims: [usize; 3]) -> Tensor<T> {
    let a_plane: usize = a_dims.iter().product();
    let mut out = Tensor::zeros(grad.channels(), a_dims);
    out.data_mut()
        .par_chunks_mut(a_plane)
        .enumerate()
        .for_each(|(ch, dst)| {
            let g = grad.channel(ch);
            let am = &arg[ch * g.len()..(ch + 1) * g.len()];
            for (&v, &idx) in g.iter().zip(am) {
                dst[idx as usize] = dst[idx as usize] + v;
            }
        });
    out
}

pub const NORM_EPS: f64 = 1e-5;

/// Statistics saved by [`instance_norm`] for the backward pass, one entry per
/// (channel, group).
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub group: usize,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Instance normalization with per-channel affine `scale`/`shift`.
///
/// Each channel is normalized in contiguous groups of `group` voxels: the whole
/// plane for 3D nets, one xy-slice for 2D nets whose slices are stacked along z.
pub fn instance_norm<T: Real>(x: &Tensor<T>, group: usize, scale: &[T], shift: &[T]) -> (Tensor<T>, NormStats<T>) {
    let plane = x.plane();
    assert!(group > 0 && plane % group == 0);
    let per_channel = plane / group;
    let mut out = Tensor::zeros(x.channels(), x.dims());
    let stats: Vec<(T, T)> = out
        .data_mut()
        .par_chunks_mut(group)
        .zip(x.data().par_chunks(group))
        .enumerate()
        .map(|(gi, (dst, src))| {
            let ch = gi / per_channel;
            let n = group as f64;
            let mean = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
            let var = src.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            let (m, s) = (T::from_f64(mean).unwrap(), T::from_f64(inv).unwrap());
            let (g, b) = (scale[ch], shift[ch]);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m) * s * g + b;
            }
            (m, s)
        })
        .collect();
    let (mean, inv_std) = stats.into_iter().unzip();
    (out, NormStats { group, mean, inv_std })
}

/// Returns (input gradient, scale gradient, shift gradient).
pub fn instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    stats: &NormStats<T>,
    scale: &[T],
    grad: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let group = stats.group;
    let per_channel = x.plane() / group;
    let nf = T::from_usize(group).unwrap();
    let mut dx = Tensor::zeros(x.channels(), x.dims());
    let per: Vec<(T, T)> = dx
        .data_mut()
        .par_chunks_mut(group)
        .zip(x.data().par_chunks(group).zip(grad.data().par_chunks(group)))
        .enumerate()
        .map(|(gi, (dst, (xs, gs)))| {
            let ch = gi / per_channel;
            let (m, s) = (stats.mean[gi], stats.inv_std[gi]);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&g, &v) in gs.iter().zip(xs) {
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * (v - m) * s;
            }
            let k = scale[ch] * s;
            let mg = sum_g / nf;
            let mgx = sum_gx / nf;
            for ((d, &g), &v) in dst.iter_mut().zip(gs).zip(xs) {
                let xh = (v - m) * s;
                *d = k * (g - mg - xh * mgx);
            }
            (sum_gx, sum_g)
        })
        .collect();
    let mut dscale = vec![T::zero(); x.channels()];
    let mut dshift = vec![T::zero(); x.channels()];
    for (gi, (a, b)) in per.into_iter().enumerate() {
        dscale[gi / per_channel] = dscale[gi / per_channel] + a;
        dshift[gi / per_channel] = dshift[gi / per_channel] + b;
    }
    (dx, dscale, dshift)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], c: usize, g: &Geometry, w: &[f64], m: usize) -> Vec<f64> {
        let [kx, ky, kz] = g.shape.kernel;
        let bp: usize = g.b.iter().product();
        let ap: usize = g.a.iter().product();
        let mut out = vec![0.0; m * bp];
        for o in 0..m {
            for bz in 0..g.b[2] {
                for by in 0..g.b[1] {
                    for bx in 0..g.b[0] {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dz in 0..kz {
                                for dy in 0..ky {
                                    for dx in 0..kx {
                                        let az = (bz * g.shape.stride[2] + dz) as isize - g.shape.pad[2] as isize;
                                        let ay = (by * g.shape.stride[1] + dy) as isize - g.shape.pad[1] as isize;
                                        let ax = (bx * g.shape.stride[0] + dx) as isize - g.shape.pad[0] as isize;
                                        if az < 0
                                            || ay < 0
                                            || ax < 0
                                            || az >= g.a[2] as isize
                                            || ay >= g.a[1] as isize
                                            || ax >= g.a[0] as isize
                                        {
                                            continue;
                                        }
                                        let ai = ax as usize + g.a[0] * (ay as usize + g.a[1] * az as usize);
                                        let wi = (((o * c + ci) * kz + dz) * ky + dy) * kx + dx;
                                        acc += w[wi] * x[ci * ap + ai];
                                    }
                                }
                            }
                        }
                        out[o * bp + bx + g.b[0] * (by + g.b[1] * bz)] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    fn shapes() -> Vec<(Geometry, usize, usize)> {
        let s = |k: usize, st: usize, p: usize| ConvShape {
            kernel: [k; 3],
            stride: [st; 3],
            pad: [p; 3],
        };
        vec![
            (Geometry::conv([5, 6, 7], s(3, 1, 1)).unwrap(), 2, 3),
            (Geometry::conv([8, 8, 8], s(7, 2, 3)).unwrap(), 1, 2),
            (Geometry::conv([6, 5, 4], s(1, 2, 0)).unwrap(), 3, 2),
            (Geometry::transposed([3, 4, 2], s(3, 2, 1), [1; 3]).unwrap(), 2, 2),
            (Geometry::transposed([3, 3, 3], s(2, 2, 0), [0; 3]).unwrap(), 2, 1),
            (
                Geometry::conv(
                    [9, 7, 1],
                    ConvShape {
                        kernel: [3, 3, 1],
                        stride: [2, 2, 1],
                        pad: [1, 1, 0],
                    },
                )
                .unwrap(),
                5,
                2,
            ),
        ]
    }

    #[test]
    fn gather_matches_naive_convolution() {
        for (i, (g, c, m)) in shapes().into_iter().enumerate() {
            let x = pseudo(c * g.a.iter().product::<usize>(), i as u64);
            let w = pseudo(m * c * g.shape.taps(), 100 + i as u64);
            let got = gather(&x, c, &g, &w, m);
            let want = naive_conv(&x, c, &g, &w, m);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "shape {i}");
            }
        }
    }

    #[test]
    fn scatter_and_weight_grad_are_adjoints_of_gather() {
        // <gather(x), y> == <x, scatter(y)> and d<gather(x; w), y>/dw == weight_grad(x, y)
        for (i, (g, c, m)) in shapes().into_iter().enumerate() {
            let x = pseudo(c * g.a.iter().product::<usize>(), 7 + i as u64);
            let y = pseudo(m * g.b.iter().product::<usize>(), 17 + i as u64);
            let w = pseudo(m * c * g.shape.taps(), 27 + i as u64);
            let gx = gather(&x, c, &g, &w, m);
            let sy = scatter(&y, m, &g, &w, c);
            let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&sy).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "shape {i}: {lhs} vs {rhs}");
            let dw = weight_grad(&x, c, &g, &y, m);
            for (j, &d) in dw.iter().enumerate() {
                let mut e = vec![0.0; w.len()];
                e[j] = 1.0;
                let want: f64 = gather(&x, c, &g, &e, m).iter().zip(&y).map(|(a, b)| a * b).sum();
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transposed_output_extent() {
        let s = ConvShape {
            kernel: [3; 3],
            stride: [2; 3],
            pad: [1; 3],
        };
        assert_eq!(Geometry::transposed([4, 4, 4], s, [1; 3]).unwrap().a, [8; 3]);
        assert_eq!(Geometry::transposed([4, 4, 4], ConvShape { stride: [1; 3], ..s }, [0; 3]).unwrap().a, [4; 3]);
    }

    #[test]
    fn slab_split_does_not_change_results() {
        // big enough to force several slabs
        let g = Geometry::conv(
            [40, 40, 40],
            ConvShape {
                kernel: [3; 3],
                stride: [1; 3],
                pad: [1; 3],
            },
        )
        .unwrap();
        assert!(g.slabs(4 * 27).len() > 1);
        let x = pseudo(4 * 64000, 3);
        let w = pseudo(2 * 4 * 27, 4);
        let got = gather(&x, 4, &g, &w, 2);
        // compare a few voxels against the naive convolution on the same data
        let want = naive_conv(&x, 4, &g, &w, 2);
        for i in (0..got.len()).step_by(997) {
            assert!((got[i] - want[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn max_pool_picks_window_maximum_and_routes_gradient() {
        let x = Tensor::from_vec(1, [4, 4, 1], (0..16).map(|i| ((i * 7) % 16) as f64).collect());
        let shape = ConvShape {
            kernel: [3, 3, 1],
            stride: [2, 2, 1],
            pad: [1, 1, 0],
        };
        let (y, arg) = max_pool(&x, shape).unwrap();
        assert_eq!(y.dims(), [2, 2, 1]);
        for (k, &v) in y.data().iter().enumerate() {
            assert_eq!(x.data()[arg[k] as usize], v);
        }
        let g = max_pool_backward(&Tensor::from_vec(1, [2, 2, 1], vec![1.0; 4]), &arg, [4, 4, 1]);
        assert_eq!(g.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn instance_norm_ignores_positive_affine_input_scaling() {
        let x = Tensor::from_vec(2, [3, 3, 3], pseudo(54, 9).iter().map(|v| 10.0 * v).collect());
        let scale = [1.3, 0.7];
        let shift = [0.1, -0.2];
        let (y, _) = instance_norm(&x, 27, &scale, &shift);
        let scaled = Tensor::from_vec(2, [3, 3, 3], x.data().iter().map(|v| 4.0 * v + 2.5).collect());
        let (y2, _) = instance_norm(&scaled, 27, &scale, &shift);
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let x = Tensor::from_vec(2, [2, 2, 3], pseudo(24, 11));
        let scale = [1.2, -0.4];
        let shift = [0.3, 0.0];
        let probe = pseudo(24, 12);
        let loss = |t: &Tensor<f64>| {
            let (y, _) = instance_norm(t, 4, &scale, &shift);
            y.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, stats) = instance_norm(&x, 4, &scale, &shift);
        let (dx, _, _) = instance_norm_backward(&x, &stats, &scale, &Tensor::from_vec(2, [2, 2, 3], probe.clone()));
        let h = 1e-6;
        for i in 0..24 {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
        }
    }
}
