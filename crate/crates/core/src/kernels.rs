//! Raw compute kernels on flat slices.
//!
//! The convolution has two forward paths that are both always available:
//! a patch-gather (im2col) path backed by a small GEMM microkernel, used
//! everywhere, and a six-nested-loop reference path used as the second
//! route in tests. Loop orders are fixed, so results are bit-identical
//! across runs within one build.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d", "kernel extent must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn patch_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Multiply-accumulate count of this convolution.
    pub fn macs(&self) -> u64 {
        (self.cout * self.patch_rows() * self.out_pixels()) as u64
    }
}

/// Gather input patches into a `[cin*kh*kw, h_out*w_out]` matrix
/// (zero padding outside the input).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let rows = g.patch_rows();
    let cols = g.out_pixels();
    let mut out = vec![T::zero(); rows * cols];
    for c in 0..g.cin {
        let src_chan = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for i in 0..g.h_out {
                    let si = (i * g.stride + u) as isize - g.pad as isize;
                    if si < 0 || si as usize >= g.h {
                        continue; // stays zero
                    }
                    let src_row = &src_chan[si as usize * g.w..(si as usize + 1) * g.w];
                    let dst_row = &mut dst[i * g.w_out..(i + 1) * g.w_out];
                    if g.stride == 1 {
                        // contiguous copy of the in-bounds span
                        let sj0 = v as isize - g.pad as isize;
                        let j_lo = (-sj0).max(0) as usize;
                        let j_hi = ((g.w as isize - sj0).min(g.w_out as isize)).max(0) as usize;
                        if j_lo < j_hi {
                            let s0 = (sj0 + j_lo as isize) as usize;
                            dst_row[j_lo..j_hi].copy_from_slice(&src_row[s0..s0 + (j_hi - j_lo)]);
                        }
                    } else {
                        for j in 0..g.w_out {
                            let sj = (j * g.stride + v) as isize - g.pad as isize;
                            if sj >= 0 && (sj as usize) < g.w {
                                dst_row[j] = src_row[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add the patch matrix back into input layout (adjoint of im2col).
pub fn col2im_add<T: Scalar>(patches: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.out_pixels();
    for c in 0..g.cin {
        let dst_chan = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let src = &patches[row * cols..(row + 1) * cols];
                for i in 0..g.h_out {
                    let si = (i * g.stride + u) as isize - g.pad as isize;
                    if si < 0 || si as usize >= g.h {
                        continue;
                    }
                    let dst_row = &mut dst_chan[si as usize * g.w..(si as usize + 1) * g.w];
                    let src_row = &src[i * g.w_out..(i + 1) * g.w_out];
                    for j in 0..g.w_out {
                        let sj = (j * g.stride + v) as isize - g.pad as isize;
                        if sj >= 0 && (sj as usize) < g.w {
                            dst_row[sj as usize] += src_row[j];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m, :] += sum_k a[m, k] * b[k, :]`, `a: [m, k]`, `b: [k, n]`.
/// The k-loop is unrolled 4-wide so the output row stays in registers.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let a0 = a_row[kk];
            let a1 = a_row[kk + 1];
            let a2 = a_row[kk + 2];
            let a3 = a_row[kk + 3];
            let b0 = &b[kk * n..kk * n + n];
            let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
            let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
            let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
            for j in 0..n {
                out_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let av = a_row[kk];
            let b_row = &b[kk * n..kk * n + n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
            kk += 1;
        }
    }
}

/// `out[m, k] += dot(a[m, :], b[k, :])`, `a: [m, n]`, `b: [k, n]`
/// (i.e. `a * b^T`). Used for weight gradients.
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut s0 = T::zero();
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            let mut s3 = T::zero();
            let mut j = 0;
            while j + 4 <= n {
                s0 += a_row[j] * b_row[j];
                s1 += a_row[j + 1] * b_row[j + 1];
                s2 += a_row[j + 2] * b_row[j + 2];
                s3 += a_row[j + 3] * b_row[j + 3];
                j += 4;
            }
            let mut s = (s0 + s1) + (s2 + s3);
            while j < n {
                s += a_row[j] * b_row[j];
                j += 1;
            }
            out[i * k + kk] += s;
        }
    }
}

/// Patch-gather convolution forward. `x: [cin, h, w]`,
/// `w: [cout, cin, kh, kw]`, `b: [cout]` -> `[cout, h_out, w_out]`.
pub fn conv2d_im2col<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let patches = im2col(x, g);
    conv2d_from_patches(&patches, w, b, g)
}

pub fn conv2d_from_patches<T: Scalar>(patches: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.out_pixels();
    let mut out = vec![T::zero(); g.cout * cols];
    for (o, chunk) in out.chunks_exact_mut(cols).enumerate() {
        chunk.fill(b[o]);
    }
    gemm_acc(w, patches, &mut out, g.cout, g.patch_rows(), cols);
    out
}

/// Reference convolution: six nested loops, plain zero-pad semantics.
pub fn conv2d_reference<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.cout * g.out_pixels()];
    for o in 0..g.cout {
        for i in 0..g.h_out {
            for j in 0..g.w_out {
                let mut acc = b[o];
                for c in 0..g.cin {
                    for u in 0..g.kh {
                        for v in 0..g.kw {
                            let si = (i * g.stride + u) as isize - g.pad as isize;
                            let sj = (j * g.stride + v) as isize - g.pad as isize;
                            if si >= 0
                                && (si as usize) < g.h
                                && sj >= 0
                                && (sj as usize) < g.w
                            {
                                let xv = x[(c * g.h + si as usize) * g.w + sj as usize];
                                let wv = w[((o * g.cin + c) * g.kh + u) * g.kw + v];
                                acc += xv * wv;
                            }
                        }
                    }
                }
                out[(o * g.h_out + i) * g.w_out + j] = acc;
            }
        }
    }
    out
}

/// Convolution backward: gradients for input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.patch_rows();
    let cols = g.out_pixels();

    // db[o] = sum over output pixels
    let mut db = vec![T::zero(); g.cout];
    for o in 0..g.cout {
        let mut s = T::zero();
        for v in &dy[o * cols..(o + 1) * cols] {
            s += *v;
        }
        db[o] = s;
    }

    // dw = dy * patches^T  (patches recomputed from x, trading time for memory)
    let patches = im2col(x, g);
    let mut dw = vec![T::zero(); g.cout * rows];
    gemm_nt_acc(dy, &patches, &mut dw, g.cout, rows, cols);

    // dpatches = w^T * dy, then scatter back into input layout
    let mut wt = vec![T::zero(); rows * g.cout];
    for o in 0..g.cout {
        for r in 0..rows {
            wt[r * g.cout + o] = w[o * rows + r];
        }
    }
    let mut dpatches = vec![T::zero(); rows * cols];
    gemm_acc(&wt, dy, &mut dpatches, rows, g.cout, cols);
    let mut dx = vec![T::zero(); g.cin * g.h * g.w];
    col2im_add(&dpatches, g, &mut dx);

    (dx, dw, db)
}

/// Max pooling. Ties break on the first index in row-major order, which
/// fixes gradient routing deterministically. Returns the pooled map and
/// the flat argmax index (within the channel) per output cell.
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<u32>, usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "k and stride must be positive"));
    }
    if k > h || k > w {
        return Err(Error::invalid(
            "max_pool2d",
            format!("window {k} larger than input {h}x{w}"),
        ));
    }
    let h_out = (h - k) / stride + 1;
    let w_out = (w - k) / stride + 1;
    let mut out = vec![T::zero(); c * h_out * w_out];
    let mut arg = vec![0u32; c * h_out * w_out];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h_out {
            for j in 0..w_out {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for u in 0..k {
                    let row = (i * stride + u) * w + j * stride;
                    for v in 0..k {
                        let val = src[row + v];
                        if val > best {
                            best = val;
                            best_idx = (row + v) as u32;
                        }
                    }
                }
                let oi = (ch * h_out + i) * w_out + j;
                out[oi] = best;
                arg[oi] = best_idx;
            }
        }
    }
    Ok((out, arg, h_out, w_out))
}

pub fn max_pool2d_backward<T: Scalar>(
    dy: &[T],
    arg: &[u32],
    c: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oi in ch * h_out * w_out..(ch + 1) * h_out * w_out {
            dx[base + arg[oi] as usize] += dy[oi];
        }
    }
    dx
}

/// Bilinear resize with the half-pixel (align-corners-false) convention:
/// source coordinate = (dst + 0.5) * scale - 0.5, clamped to the edges.
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    let (ws, hs) = (w as f64 / ow as f64, h as f64 / oh as f64);
    // precompute per-axis source indices and blend weights
    let axis = |n_out: usize, n_in: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = axis(ow, w, ws);
    let ys = axis(oh, h, hs);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let fy = T::from_f64(fy);
            let row = &mut dst[i * ow..(i + 1) * ow];
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                row[j] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: distributes each output gradient onto
/// the four source corners it was blended from.
pub fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    let (ws, hs) = (w as f64 / ow as f64, h as f64 / oh as f64);
    for ch in 0..c {
        let src = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let sy = ((i as f64 + 0.5) * hs - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = T::from_f64(sy - y0 as f64);
            for j in 0..ow {
                let sx = ((j as f64 + 0.5) * ws - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = T::from_f64(sx - x0 as f64);
                let g = src[i * ow + j];
                let one = T::one();
                dst[y0 * w + x0] += g * (one - fy) * (one - fx);
                dst[y0 * w + x1] += g * (one - fy) * fx;
                dst[y1 * w + x0] += g * fy * (one - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(cin: usize, cout: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> ConvGeom {
        ConvGeom::new(cin, cout, h, w, k, k, s, p).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let g = geom(1, 1, 3, 3, 1, 1, 0);
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let y = conv2d_im2col(&x, &[1.0], &[0.0], &g);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_hand_example() {
        // 3x3 ramp, 2x2 kernel [[1,0],[0,1]] -> [[6,8],[12,14]]
        let g = ConvGeom::new(1, 1, 3, 3, 2, 2, 1, 0).unwrap();
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let y = conv2d_im2col(&x, &w, &[0.0], &g);
        assert_eq!(y, vec![6.0, 8.0, 12.0, 14.0]);
        let yr = conv2d_reference(&x, &w, &[0.0], &g);
        assert_eq!(yr, vec![6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv_shape_formula() {
        let g = geom(3, 16, 8, 8, 3, 1, 1);
        assert_eq!((g.h_out, g.w_out), (8, 8));
        let g = geom(1, 1, 7, 5, 3, 2, 0);
        assert_eq!((g.h_out, g.w_out), (3, 2));
    }

    #[test]
    fn im2col_matches_reference_on_random_shapes() {
        let mut rng = crate::rng::SubRng::derive(42, &[100]);
        for _ in 0..40 {
            let cin = rng.range_usize(1, 4);
            let cout = rng.range_usize(1, 5);
            let h = rng.range_usize(3, 12);
            let w = rng.range_usize(3, 12);
            let k = rng.range_usize(1, 4.min(h).min(w));
            let stride = rng.range_usize(1, 2);
            let pad = rng.range_usize(0, 2);
            let g = ConvGeom::new(cin, cout, h, w, k, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..cin * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wgt: Vec<f64> = (0..cout * g.patch_rows())
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let a = conv2d_im2col(&x, &wgt, &b, &g);
            let r = conv2d_reference(&x, &wgt, &b, &g);
            for (u, v) in a.iter().zip(&r) {
                assert!((u - v).abs() < 1e-12, "mismatch at geom {g:?}");
            }
        }
    }

    #[test]
    fn pool_hand_examples() {
        let (y, _, _, _) = max_pool2d(&[1.0f32, 2.0, 3.0, 4.0], 1, 2, 2, 2, 2).unwrap();
        assert_eq!(y, vec![4.0]);
        // 4x4 ramp 0..15, k=2 s=2 -> [[5,7],[13,15]]
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let (y, _, ho, wo) = max_pool2d(&x, 1, 4, 4, 2, 2).unwrap();
        assert_eq!((ho, wo), (2, 2));
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn pool_constant_input() {
        let (y, _, _, _) = max_pool2d(&[2.5f32; 36], 1, 6, 6, 3, 3).unwrap();
        assert!(y.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pool_rejects_zero_params() {
        assert!(max_pool2d(&[0.0f32; 4], 1, 2, 2, 0, 1).is_err());
        assert!(max_pool2d(&[0.0f32; 4], 1, 2, 2, 1, 0).is_err());
    }

    #[test]
    fn pool_tie_routes_to_first_index() {
        let x = vec![7.0f32, 7.0, 7.0, 7.0];
        let (_, arg, _, _) = max_pool2d(&x, 1, 2, 2, 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = vec![0.0f64, 1.0, 2.0, 3.0];
        let y = resize_bilinear(&x, 1, 2, 2, 2, 2);
        assert_eq!(y, x);
        let c = resize_bilinear(&[5.0f64; 9], 1, 3, 3, 7, 11);
        assert!(c.iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn resize_hand_example() {
        // 1x1x2 input [0,1] -> 1x1x4 output [0, 0.25, 0.75, 1]
        let y = resize_bilinear(&[0.0f64, 1.0], 1, 1, 2, 1, 4);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }
}
