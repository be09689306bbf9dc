//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! Every reduction accumulates in a fixed left-to-right order so results are
//! reproducible bit for bit.

use crate::tensor::Scalar;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product with four interleaved accumulators.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: F = ac.remainder().iter().zip(bc.remainder()).fold(F::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(arow, brow);
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub fn gemm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Same-padded, stride-1 2-D convolution.
///
/// `input: cin×h×w`, `kernels: cout×cin×k×k`, `bias: cout`, `out: cout×h×w`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<F: Scalar>(
    input: &[F],
    kernels: &[F],
    bias: &[F],
    out: &mut [F],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let wv = kernels[((co * cin + ci) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let (y0, y1) = valid_range(h, dy);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &inp[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        let dst = &mut o[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    input: &[F],
    kernels: &[F],
    grad_out: &[F],
    grad_in: &mut [F],
    grad_k: &mut [F],
    grad_b: &mut [F],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    for co in 0..cout {
        let go = &grad_out[co * plane..(co + 1) * plane];
        grad_b[co] = grad_b[co] + go.iter().fold(F::zero(), |a, &v| a + v);
        for ci in 0..cin {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = kernels[widx];
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let (y0, y1) = valid_range(h, dy);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let off = sy * w + (x0 as isize + dx) as usize;
                        let g = &go[y * w + x0..y * w + x1];
                        let src = &inp[off..off + (x1 - x0)];
                        for (&gv, &sv) in g.iter().zip(src) {
                            acc = acc + gv * sv;
                        }
                        let gi = &mut grad_in[ci * plane + off..ci * plane + off + (x1 - x0)];
                        for (d, &gv) in gi.iter_mut().zip(g) {
                            *d = *d + wv * gv;
                        }
                    }
                    grad_k[widx] = grad_k[widx] + acc;
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` along an axis of length `n` whose source
/// `pos + delta` stays inside `[0, n)`.
fn valid_range(n: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (n as isize - delta.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_borders() {
        assert_eq!(valid_range(5, -1), (1, 5));
        assert_eq!(valid_range(5, 1), (0, 4));
        assert_eq!(valid_range(5, 0), (0, 5));
        assert_eq!(valid_range(2, 3), (0, 0));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2x3
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ stored as 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }
}
