//! Forward and backward kernels over `[batch, channel, h, w]` buffers.

use alloc::vec;
use alloc::vec::Vec;

use super::ConvLayer;
use crate::math;

/// Range of output indices `i` in `0..len` for which `i + d` stays in bounds.
#[inline]
fn valid(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Row and column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Strides(isize, isize);

impl Strides {
    /// Row-major `rows × cols`.
    fn row_major(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// The transpose of a row-major matrix with `cols` columns.
    fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }
}

/// `c ← a·b + beta·c` for an `m×k` matrix `a` and a `k×n` matrix `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Strides, b: &[f64], sb: Strides, beta: f64, c: &mut [f64], sc: Strides) {
    let extent = |rows: usize, cols: usize, s: Strides| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, sa) && b.len() >= extent(k, n, sb) && c.len() >= extent(m, n, sc));
    // SAFETY: the assertion keeps every strided access inside the slices, and
    // `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin·k·k, ld]` columns with zero
/// padding, writing the first `h·w` entries of each row.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, col: &mut [f64], ld: usize) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..cin {
        let xin = &x[ci * plane..][..plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid(w, dx);
                let row = &mut col[((ci * k + ky) * k + kx) * ld..][..plane];
                row.fill(0.0);
                let sx0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&xin[sy * w + sx0..][..x1 - x0]);
                }
            }
        }
    }
}

/// Adds columns laid out as by [`im2col`] back onto a `[cin, h, w]` image
/// gradient.
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, ld: usize, gx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..cin {
        let dst = &mut gx[ci * plane..][..plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid(w, dx);
                let row = &col[((ci * k + ky) * k + kx) * ld..][..plane];
                let sx0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let d = &mut dst[sy * w + sx0..][..x1 - x0];
                    for (dv, &g) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *dv += g;
                    }
                }
            }
        }
    }
}

/// Unfolds a whole batch: column `b·h·w + p` holds pixel `p` of image `b`.
fn im2col_batch(x: &[f64], [n, cin, h, w]: [usize; 4], k: usize) -> Vec<f64> {
    let plane = h * w;
    let ld = n * plane;
    let mut col = vec![0.0; cin * k * k * ld];
    for b in 0..n {
        im2col(&x[b * cin * plane..][..cin * plane], cin, h, w, k, &mut col[b * plane..], ld);
    }
    col
}

/// `out = conv(x, w) + b` with `k/2` zero padding. `out` is overwritten.
pub(crate) fn conv_forward(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    params: &[f64],
    layer: &ConvLayer,
    out: &mut [f64],
) {
    debug_assert_eq!(cin, layer.cin);
    let k = layer.k;
    let cout = layer.cout;
    let plane = h * w;
    let kk = cin * k * k;
    let weights = &params[layer.w_off..layer.b_off];
    let bias = &params[layer.b_off..layer.b_off + cout];
    let col = im2col_batch(x, [n, cin, h, w], k);
    // [cout, n·plane], then scattered into [n, cout, plane].
    let mut y = vec![0.0; cout * n * plane];
    gemm(
        cout,
        kk,
        n * plane,
        weights,
        Strides::row_major(kk),
        &col,
        Strides::row_major(n * plane),
        0.0,
        &mut y,
        Strides::row_major(n * plane),
    );
    for b in 0..n {
        for co in 0..cout {
            let src = &y[co * n * plane + b * plane..][..plane];
            let dst = &mut out[(b * cout + co) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias[co];
            }
        }
    }
}

/// Accumulates parameter gradients and, when `gx` is given, input gradients.
pub(crate) fn conv_backward(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    params: &[f64],
    layer: &ConvLayer,
    gout: &[f64],
    gparams: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    let k = layer.k;
    let cout = layer.cout;
    let plane = h * w;
    let ld = n * plane;
    let kk = cin * k * k;
    let weights = &params[layer.w_off..layer.b_off];
    let (gw, rest) = gparams[layer.w_off..].split_at_mut(layer.b_off - layer.w_off);
    let gb = &mut rest[..cout];
    // Output gradient as [cout, n·plane].
    let mut g = vec![0.0; cout * ld];
    for b in 0..n {
        for co in 0..cout {
            let src = &gout[(b * cout + co) * plane..][..plane];
            gb[co] += src.iter().sum::<f64>();
            g[co * ld + b * plane..][..plane].copy_from_slice(src);
        }
    }
    let mut col = im2col_batch(x, [n, cin, h, w], k);
    gemm(
        cout,
        ld,
        kk,
        &g,
        Strides::row_major(ld),
        &col,
        Strides::transposed(ld),
        1.0,
        gw,
        Strides::row_major(kk),
    );
    if let Some(gx) = gx {
        gemm(
            kk,
            cout,
            ld,
            weights,
            Strides::transposed(kk),
            &g,
            Strides::row_major(ld),
            0.0,
            &mut col,
            Strides::row_major(ld),
        );
        for b in 0..n {
            col2im(&col[b * plane..], cin, h, w, k, ld, &mut gx[b * cin * plane..][..cin * plane]);
        }
    }
}

pub(crate) fn elu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { math::exp(v) - 1.0 };
    }
}

/// Gradient of ELU expressed through its output.
pub(crate) fn elu_backward(y: &[f64], gout: &[f64], gx: &mut [f64]) {
    for ((gi, &yv), &g) in gx.iter_mut().zip(y).zip(gout) {
        *gi += if yv > 0.0 { g } else { g * (yv + 1.0) };
    }
}

pub(crate) fn avg_pool_forward(x: &[f64], [n, c, h, w]: [usize; 4], out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..][..w];
            let r1 = &src[(2 * y + 1) * w..][..w];
            for xx in 0..ow {
                dst[y * ow + xx] =
                    0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
}

pub(crate) fn avg_pool_backward(gout: &[f64], [n, c, h, w]: [usize; 4], gx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..n * c {
        let g = &gout[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] += 0.25 * g[(y / 2) * ow + xx / 2];
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling; `shape` is the input shape.
pub(crate) fn upsample_forward(x: &[f64], [n, c, h, w]: [usize; 4], out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
}

pub(crate) fn upsample_backward(gout: &[f64], [n, c, h, w]: [usize; 4], gx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let g = &gout[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += g[y * ow + xx];
            }
        }
    }
}

/// Channel-wise concatenation of two batches with equal spatial size.
pub(crate) fn concat_forward(a: &[f64], ca: usize, b: &[f64], cb: usize, n: usize, plane: usize, out: &mut [f64]) {
    let c = ca + cb;
    for i in 0..n {
        out[i * c * plane..][..ca * plane].copy_from_slice(&a[i * ca * plane..][..ca * plane]);
        out[(i * c + ca) * plane..][..cb * plane].copy_from_slice(&b[i * cb * plane..][..cb * plane]);
    }
}

pub(crate) fn concat_backward(
    gout: &[f64],
    ca: usize,
    cb: usize,
    n: usize,
    plane: usize,
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let c = ca + cb;
    if let Some(ga) = ga {
        for i in 0..n {
            for (d, s) in ga[i * ca * plane..][..ca * plane]
                .iter_mut()
                .zip(&gout[i * c * plane..][..ca * plane])
            {
                *d += s;
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..n {
            for (d, s) in gb[i * cb * plane..][..cb * plane]
                .iter_mut()
                .zip(&gout[(i * c + ca) * plane..][..cb * plane])
            {
                *d += s;
            }
        }
    }
}

/// Per-pixel softmax over the channel axis.
pub(crate) fn softmax_forward(x: &[f64], [n, c, h, w]: [usize; 4], out: &mut [f64]) {
    let plane = h * w;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * plane + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = math::exp(x[base + ch * plane + p] - m);
                out[base + ch * plane + p] = e;
                z += e;
            }
            let inv = 1.0 / z;
            for ch in 0..c {
                out[base + ch * plane + p] *= inv;
            }
        }
    }
}

pub(crate) fn softmax_backward(y: &[f64], [n, c, h, w]: [usize; 4], gout: &[f64], gx: &mut [f64]) {
    let plane = h * w;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut s = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + p;
                s += gout[i] * y[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                gx[i] += y[i] * (gout[i] - s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(x: &[f64], [n, cin, h, w]: [usize; 4], wt: &[f64], bias: &[f64], cout: usize, k: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; n * cout * h * w];
        for b in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    s += wt[((co * cin + ci) * k + ky) * k + kx]
                                        * x[((b * cin + ci) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[((b * cout + co) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn setup(cin: usize, cout: usize, k: usize) -> (ConvLayer, Vec<f64>) {
        let nw = cout * cin * k * k;
        let layer = ConvLayer {
            w_off: 3,
            b_off: 3 + nw,
            cin,
            cout,
            k,
        };
        (layer, pseudo(3 + nw + cout, 7))
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(n, cin, cout, h, w, k) in &[(2, 3, 5, 7, 11, 3), (1, 4, 8, 8, 8, 3), (2, 6, 3, 5, 9, 1), (1, 1, 1, 1, 1, 3)] {
            let (layer, params) = setup(cin, cout, k);
            let x = pseudo(n * cin * h * w, 11);
            let want = naive_forward(&x, [n, cin, h, w], &params[layer.w_off..layer.b_off], &params[layer.b_off..], cout, k);
            let mut got = vec![f64::NAN; want.len()];
            conv_forward(&x, [n, cin, h, w], &params, &layer, &mut got);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // For a linear map L, <L(x), g> = <x, Lᵀ(g)> and its derivative in
        // each weight equals the forward map of x with a unit kernel.
        for &(n, cin, cout, h, w, k) in &[(2, 3, 5, 7, 11, 3), (1, 4, 8, 8, 8, 3), (2, 6, 3, 5, 9, 1)] {
            let (layer, params) = setup(cin, cout, k);
            let x = pseudo(n * cin * h * w, 11);
            let g = pseudo(n * cout * h * w, 13);
            let mut gp = vec![0.0; params.len()];
            let mut gx = vec![0.0; x.len()];
            conv_backward(&x, [n, cin, h, w], &params, &layer, &g, &mut gp, Some(&mut gx));
            for i in 0..params.len() {
                let mut e = vec![0.0; params.len()];
                e[i] = 1.0;
                let mut y = vec![0.0; g.len()];
                conv_forward(&x, [n, cin, h, w], &e, &layer, &mut y);
                let want: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                assert!((gp[i] - want).abs() < 1e-10, "param {i}: {} vs {want}", gp[i]);
            }
            let mut zero_bias = params.clone();
            zero_bias[layer.b_off..].fill(0.0);
            let mut y = vec![0.0; g.len()];
            conv_forward(&x, [n, cin, h, w], &zero_bias, &layer, &mut y);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}
