//! Raw numeric kernels behind the tape ops.
//!
//! Matrix products go through `matrixmultiply`; everything else is
//! written directly. Batch-level parallelism uses fixed chunk
//! boundaries so results do not depend on the worker count.

use rayon::prelude::*;

/// Row-major matrix product `c[m,n] += a[m,k] * b[k,n]` (c overwritten
/// when `beta` is 0).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] but with `a` transposed: `c[m,n] += a[k,m]^T * b[k,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_at(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] but with `b` transposed: `c[m,n] += a[m,k] * b[n,k]^T`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_bt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry of a convolution or pooling op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output size and padding for `same` semantics at a given stride.
pub fn same_geom(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> ConvGeom {
    let out_h = h.div_ceil(stride);
    let out_w = w.div_ceil(stride);
    let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
    let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
    ConvGeom {
        out_h,
        out_w,
        pad_top: pad_h / 2,
        pad_left: pad_w / 2,
    }
}

/// Output size for `valid` semantics (no padding).
pub fn valid_geom(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Option<ConvGeom> {
    if kh > h || kw > w {
        return None;
    }
    Some(ConvGeom {
        out_h: (h - kh) / stride + 1,
        out_w: (w - kw) / stride + 1,
        pad_top: 0,
        pad_left: 0,
    })
}

/// Unrolls one image `[C, H, W]` into `[out_h*out_w, C*kh*kw]` patches.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: ConvGeom,
    col: &mut [f64],
) {
    let patch = c * kh * kw;
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(col.len(), geom.out_h * geom.out_w * patch);
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * patch;
            for ch in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                        let dst = row + (ch * kh + ky) * kw + kx;
                        col[dst] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            img[(ch * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatters patch gradients back onto one image, adding into `img_grad`.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: ConvGeom,
    img_grad: &mut [f64],
) {
    let patch = c * kh * kw;
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * patch;
            for ch in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img_grad[(ch * h + iy as usize) * w + ix as usize] +=
                            col[row + (ch * kh + ky) * kw + kx];
                    }
                }
            }
        }
    }
}

/// Per-channel mean and population variance over the batch rows
/// `range` of a `[B, C, H, W]` tensor.
pub fn channel_moments(
    data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    range: std::ops::Range<usize>,
) -> Vec<(f64, f64)> {
    let plane = h * w;
    let stride = c * plane;
    let n = (range.len() * plane) as f64;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for b in range.clone() {
            let base = b * stride + ch * plane;
            for v in &data[base..base + plane] {
                sum += v;
            }
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for b in range.clone() {
            let base = b * stride + ch * plane;
            for v in &data[base..base + plane] {
                let d = v - mean;
                sq += d * d;
            }
        }
        out.push((mean, sq / n));
    }
    out
}

/// Count-weighted combination of per-shard `(count, mean, var)` into the
/// moments of the concatenated data (parallel-variance formula).
///
/// Shards are folded left to right, so the reduction order is fixed by
/// the input order.
pub fn combine_moments(shards: &[(usize, f64, f64)]) -> (f64, f64) {
    debug_assert!(!shards.is_empty());
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for &(count, s_mean, s_var) in shards {
        let sn = count as f64;
        if sn == 0.0 {
            continue;
        }
        let delta = s_mean - mean;
        let total = n + sn;
        m2 += s_var * sn + delta * delta * n * sn / total;
        mean += delta * sn / total;
        n = total;
    }
    (mean, m2 / n)
}

/// Applies `f` to fixed-size batch chunks in parallel. Chunk boundaries
/// depend only on `chunk`, never on the thread count.
pub fn par_batch_chunks<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    per_item: usize,
    chunk: usize,
    f: F,
) {
    data.par_chunks_mut(per_item * chunk)
        .enumerate()
        .for_each(|(i, slab)| f(i * chunk, slab));
}
