//! Forward and backward kernels for the spatial ops.
//!
//! Convolutions run as im2col followed by a single-threaded GEMM per sample.
//! The parallel loops only split work by sample and kernel gradients sum
//! samples in index order, so results are bit-identical for any thread count.

use std::ops::Range;

use rayon::prelude::*;

/// Geometry of a 2-D convolution over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Loop indices `i` in `0..count` with `i * stride + k - pad` inside `0..bound`.
fn valid_range(count: usize, bound: usize, stride: usize, k: usize, pad: usize) -> Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = bound as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return 0..0;
    }
    let hi = (top as usize / stride + 1).min(count);
    lo.min(hi)..hi
}

/// The convolution seen from its transposed side: a transposed convolution
/// with IOKK kernel is the input gradient of this one, with the same memory.
fn swapped(g: &ConvGeom) -> ConvGeom {
    ConvGeom {
        n: g.n,
        in_c: g.out_c,
        in_h: g.out_h,
        in_w: g.out_w,
        out_c: g.in_c,
        out_h: g.in_h,
        out_w: g.in_w,
        k: g.k,
        stride: g.stride,
        pad: g.pad,
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with row/column
/// strides so transposes are free views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one sample (`in_c x in_h x in_w`) into `cols`, laid out
/// `(in_c * k * k) x (out_h * out_w)`; out-of-image taps are zero.
fn im2col(src: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    for ic in 0..g.in_c {
        let plane = &src[ic * in_plane..][..in_plane];
        for kh in 0..g.k {
            let rows = valid_range(g.out_h, g.in_h, g.stride, kh, g.pad);
            for kw in 0..g.k {
                let cols_range = valid_range(g.out_w, g.in_w, g.stride, kw, g.pad);
                let row = &mut cols[((ic * g.k + kh) * g.k + kw) * out_plane..][..out_plane];
                if rows.len() < g.out_h || cols_range.len() < g.out_w {
                    row.fill(0.0);
                }
                for oh in rows.clone() {
                    let ih = oh * g.stride + kh - g.pad;
                    let src_row = &plane[ih * g.in_w..][..g.in_w];
                    let dst = &mut row[oh * g.out_w..][..g.out_w];
                    for ow in cols_range.clone() {
                        dst[ow] = src_row[ow * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into one zeroed sample,
/// in the same (channel, kernel row, kernel column) order.
fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    for ic in 0..g.in_c {
        let plane = &mut dst[ic * in_plane..][..in_plane];
        for kh in 0..g.k {
            let rows = valid_range(g.out_h, g.in_h, g.stride, kh, g.pad);
            for kw in 0..g.k {
                let cols_range = valid_range(g.out_w, g.in_w, g.stride, kw, g.pad);
                let row = &cols[((ic * g.k + kh) * g.k + kw) * out_plane..][..out_plane];
                for oh in rows.clone() {
                    let ih = oh * g.stride + kh - g.pad;
                    let src = &row[oh * g.out_w..][..g.out_w];
                    let dst_row = &mut plane[ih * g.in_w..][..g.in_w];
                    for ow in cols_range.clone() {
                        dst_row[ow * g.stride + kw - g.pad] += src[ow];
                    }
                }
            }
        }
    }
}

/// Cross-correlation `out[n,o] = sum_i in[n,i] * w[o,i]` with kernel layout OIKK.
pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_sample = g.in_c * g.in_h * g.in_w;
    let red = g.in_c * g.k * g.k;
    let mut out = vec![0.0; g.n * g.out_c * out_plane];
    if out.is_empty() {
        return out;
    }
    out.par_chunks_mut(g.out_c * out_plane)
        .enumerate()
        .for_each_init(
            || vec![0.0; red * out_plane],
            |cols, (n, dst)| {
                im2col(&input[n * in_sample..][..in_sample], g, cols);
                gemm((g.out_c, red, out_plane), kernel, (red, 1), cols, (out_plane, 1), 0.0, dst);
            },
        );
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub(crate) fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_sample = g.in_c * g.in_h * g.in_w;
    let red = g.in_c * g.k * g.k;
    let mut grad_in = vec![0.0; g.n * in_sample];
    if grad_in.is_empty() {
        return grad_in;
    }
    grad_in
        .par_chunks_mut(in_sample)
        .enumerate()
        .for_each_init(
            || vec![0.0; red * out_plane],
            |cols, (n, dst)| {
                let go = &grad_out[n * g.out_c * out_plane..][..g.out_c * out_plane];
                gemm((red, g.out_c, out_plane), kernel, (1, red), go, (out_plane, 1), 0.0, cols);
                col2im(cols, g, dst);
            },
        );
    grad_in
}

/// Gradient of [`conv2d_forward`] with respect to its OIKK kernel. Samples
/// are accumulated in index order.
pub(crate) fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_sample = g.in_c * g.in_h * g.in_w;
    let red = g.in_c * g.k * g.k;
    let mut grad_k = vec![0.0; g.out_c * red];
    let mut cols = vec![0.0; red * out_plane];
    for n in 0..g.n {
        im2col(&input[n * in_sample..][..in_sample], g, &mut cols);
        let go = &grad_out[n * g.out_c * out_plane..][..g.out_c * out_plane];
        gemm((g.out_c, out_plane, red), go, (out_plane, 1), &cols, (1, out_plane), 1.0, &mut grad_k);
    }
    grad_k
}

/// Transposed convolution with kernel layout IOKK (`in_c` = rows of the kernel).
///
/// `g` describes the op from the transposed side: `in_*` is the (small) input,
/// `out_*` the upsampled output.
pub(crate) fn conv_transpose2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    conv2d_backward_input(input, kernel, &swapped(g))
}

pub(crate) fn conv_transpose2d_backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    conv2d_forward(grad_out, kernel, &swapped(g))
}

pub(crate) fn conv_transpose2d_backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeom) -> Vec<f64> {
    conv2d_backward_kernel(input, grad_out, &swapped(g))
}

/// Max pooling with stride equal to the window. Returns the pooled values and
/// the flat input index each one came from (first maximum wins).
pub(crate) fn max_pool2d_forward(
    input: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best = base + r * window * w + col * window;
                for dr in 0..window {
                    for dc in 0..window {
                        let idx = base + (r * window + dr) * w + col * window + dc;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// `y = x W^T + b` for `x: [rows, inp]`, `W: [out, inp]`.
pub(crate) fn linear_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    rows: usize,
    inp: usize,
    out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..][..inp];
        for o in 0..out {
            let wr = &weight[o * inp..][..inp];
            let mut acc = 0.0;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            y[r * out + o] = acc + bias.map_or(0.0, |b| b[o]);
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for count in 1..7 {
            for bound in 1..9 {
                for stride in 1..4 {
                    for k in 0..5 {
                        for pad in 0..4 {
                            let expect: Vec<usize> = (0..count)
                                .filter(|&i| {
                                    let p = (i * stride + k) as isize - pad as isize;
                                    p >= 0 && (p as usize) < bound
                                })
                                .collect();
                            let got: Vec<usize> = valid_range(count, bound, stride, k, pad).collect();
                            assert_eq!(got, expect, "count={count} bound={bound} s={stride} k={k} p={pad}");
                        }
                    }
                }
            }
        }
    }

    fn direct_conv(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.out_c * g.out_h * g.out_w];
        for n in 0..g.n {
            for o in 0..g.out_c {
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut acc = 0.0;
                        for i in 0..g.in_c {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih as usize >= g.in_h || iw as usize >= g.in_w {
                                        continue;
                                    }
                                    acc += input[((n * g.in_c + i) * g.in_h + ih as usize) * g.in_w + iw as usize]
                                        * kernel[((o * g.in_c + i) * g.k + kh) * g.k + kw];
                                }
                            }
                        }
                        out[((n * g.out_c + o) * g.out_h + oh) * g.out_w + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (2, 2, 5)] {
            let (in_h, in_w) = (7, 6);
            let g = ConvGeom {
                n: 2,
                in_c: 3,
                in_h,
                in_w,
                out_c: 4,
                out_h: (in_h + 2 * pad - k) / stride + 1,
                out_w: (in_w + 2 * pad - k) / stride + 1,
                k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..g.n * g.in_c * in_h * in_w).map(|_| next()).collect();
            let w: Vec<f64> = (0..g.out_c * g.in_c * k * k).map(|_| next()).collect();
            let got = conv2d_forward(&x, &w, &g);
            for (a, b) in got.iter().zip(direct_conv(&x, &w, &g)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_ties_pick_first() {
        let (out, idx) = max_pool2d_forward(&[1.0, 1.0, 1.0, 1.0], (1, 1, 2, 2), 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }
}
