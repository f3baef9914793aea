//! Raw compute kernels: GEMM wrappers, convolution lowering, pooling.
//!
//! Convolutions are lowered to GEMM via `im2col`: each 5x5 (generally KxK)
//! receptive field becomes a column, so the convolution is a single
//! `[F, C*K*K] x [C*K*K, H*W]` product per sample. The backward pass reuses
//! the same lowering: `col2im_add` is the exact adjoint of `im2col`.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use super::Scalar;

/// `c = alpha * a.b + beta * c` for contiguous row-major matrices.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm dst size");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
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

/// `c = alpha * transpose(a).b + beta * c` where `a` is stored as `k x m`.
pub fn gemm_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), k * m, "gemm_tn lhs size");
    assert_eq!(b.len(), k * n, "gemm_tn rhs size");
    assert_eq!(c.len(), m * n, "gemm_tn dst size");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
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

/// `c = alpha * a.transpose(b) + beta * c` where `b` is stored as `n x k`.
pub fn gemm_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm_nt lhs size");
    assert_eq!(b.len(), n * k, "gemm_nt rhs size");
    assert_eq!(c.len(), m * n, "gemm_nt dst size");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
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

/// Lower one sample `[C, H, W]` to columns `[C*K*K, H*W]` for a stride-1,
/// zero-padded convolution that preserves the spatial size (`pad = K/2`).
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), c * hw);
    debug_assert_eq!(cols.len(), c * k * k * hw);
    let mut row = 0usize;
    for ci in 0..c {
        let xc = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst_row = &mut cols[row * hw..(row + 1) * hw];
                let lo = pad.saturating_sub(kx);
                let hi = (w + pad - kx).min(w);
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    let dst = &mut dst_row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &xc[(iy as usize) * w..(iy as usize + 1) * w];
                    dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let src_lo = lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image, used to
/// route convolution gradients to the input.
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    x: &mut [T],
) {
    let hw = h * w;
    debug_assert_eq!(x.len(), c * hw);
    debug_assert_eq!(cols.len(), c * k * k * hw);
    let mut row = 0usize;
    for ci in 0..c {
        let xc = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let src_row = &cols[row * hw..(row + 1) * hw];
                let lo = pad.saturating_sub(kx);
                let hi = (w + pad - kx).min(w);
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let src = &src_row[y * w + lo..y * w + hi];
                    let dst_lo = (iy as usize) * w + lo + kx - pad;
                    let dst = &mut xc[dst_lo..dst_lo + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2x2 max pooling with stride 2 over `[N, C, H, W]` (`H`, `W` even).
/// `argmax` records, per output element, the flat index of the winning
/// input element; ties go to the first element in row-major scan order.
pub fn maxpool2<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (ho, wo) = (h / 2, w / 2);
    debug_assert_eq!(x.len(), n * c * h * w);
    debug_assert_eq!(out.len(), n * c * ho * wo);
    debug_assert_eq!(argmax.len(), out.len());
    let mut o = 0usize;
    for img in 0..n * c {
        let base = img * h * w;
        for y in 0..ho {
            for xo in 0..wo {
                let i00 = base + (2 * y) * w + 2 * xo;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = x[best];
                for &i in &candidates[1..] {
                    if x[i] > best_v {
                        best_v = x[i];
                        best = i;
                    }
                }
                out[o] = best_v;
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
}

/// Per-channel mean and biased variance over `[N, C, S]` (`S` = spatial
/// positions per channel, 1 for dense features). Accumulated in f64.
pub fn bn_moments<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let (mut a, mut b) = (0.0f64, 0.0f64);
            for si in 0..s {
                let v = x[base + si].as_f64();
                a += v;
                b += v * v;
            }
            sum[ci] += a;
            sumsq[ci] += b;
        }
    }
    let m = (n * s) as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / m).collect();
    let var: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| (sq / m - mu * mu).max(0.0))
        .collect();
    (mean, var)
}
