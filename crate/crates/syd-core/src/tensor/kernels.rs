//! Raw compute kernels behind the tape ops.
//!
//! Every kernel is deterministic: parallel variants split work into disjoint
//! output regions and accumulate sequentially within each region, so results
//! are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::Scalar;

/// Work size above which matmul rows are processed in parallel.
const PAR_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |c_row: &mut [T], i: usize| {
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |c_row: &mut [T], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *c = s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
    out
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |c_row: &mut [T], i: usize| {
        for p in 0..k {
            let av = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
    out
}

/// Forward 2D convolution, NHWC layout, weights [kh,kw,cin,cout].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    batch: usize,
    h: usize,
    width: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::zero(); batch * oh * ow * cout];

    out.par_chunks_mut(ow * cout).enumerate().for_each(|(row_idx, out_row)| {
        let b = row_idx / oh;
        let oy = row_idx % oh;
        for ox in 0..ow {
            let cell = &mut out_row[ox * cout..(ox + 1) * cout];
            cell.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = oy * stride + ky;
                if iy < pad || iy >= h + pad {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..kw {
                    let ix = ox * stride + kx;
                    if ix < pad || ix >= width + pad {
                        continue;
                    }
                    let ix = ix - pad;
                    let x_base = ((b * h + iy) * width + ix) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = x[x_base + ic];
                        let w_row = &w[w_base + ic * cout..w_base + (ic + 1) * cout];
                        for (c, &wv) in cell.iter_mut().zip(w_row) {
                            *c += xv * wv;
                        }
                    }
                }
            }
        }
    });
    (out, oh, ow)
}

/// Gradient of conv2d w.r.t. its input (gather form: each input cell collects
/// contributions from the output cells that read it).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    w: &[T],
    batch: usize,
    h: usize,
    width: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * h * width * cin];
    dx.par_chunks_mut(width * cin).enumerate().for_each(|(row_idx, dx_row)| {
        let b = row_idx / h;
        let iy = row_idx % h;
        for ix in 0..width {
            let cell = &mut dx_row[ix * cin..(ix + 1) * cin];
            for ky in 0..kh {
                // iy == oy*stride + ky - pad  =>  oy = (iy + pad - ky) / stride
                let oy_num = iy + pad;
                if oy_num < ky || (oy_num - ky) % stride != 0 {
                    continue;
                }
                let oy = (oy_num - ky) / stride;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let ox_num = ix + pad;
                    if ox_num < kx || (ox_num - kx) % stride != 0 {
                        continue;
                    }
                    let ox = (ox_num - kx) / stride;
                    if ox >= ow {
                        continue;
                    }
                    let g_base = ((b * oh + oy) * ow + ox) * cout;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for (ic, d) in cell.iter_mut().enumerate() {
                        let w_row = &w[w_base + ic * cout..w_base + (ic + 1) * cout];
                        let g_row = &grad_out[g_base..g_base + cout];
                        let mut s = T::zero();
                        for (&gv, &wv) in g_row.iter().zip(w_row) {
                            s += gv * wv;
                        }
                        *d += s;
                    }
                }
            }
        }
    });
    dx
}

/// Gradients of conv2d w.r.t. weights and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_weight<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    batch: usize,
    h: usize,
    width: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); kh * kw * cin * cout];
    dw.par_chunks_mut(cout).enumerate().for_each(|(tap_idx, dw_row)| {
        let ky = tap_idx / (kw * cin);
        let kx = (tap_idx / cin) % kw;
        let ic = tap_idx % cin;
        for b in 0..batch {
            for oy in 0..oh {
                let iy = oy * stride + ky;
                if iy < pad || iy >= h + pad {
                    continue;
                }
                let iy = iy - pad;
                for ox in 0..ow {
                    let ix = ox * stride + kx;
                    if ix < pad || ix >= width + pad {
                        continue;
                    }
                    let ix = ix - pad;
                    let xv = x[((b * h + iy) * width + ix) * cin + ic];
                    let g_base = ((b * oh + oy) * ow + ox) * cout;
                    let g_row = &grad_out[g_base..g_base + cout];
                    for (d, &gv) in dw_row.iter_mut().zip(g_row) {
                        *d += xv * gv;
                    }
                }
            }
        }
    });

    let mut db = vec![T::zero(); cout];
    for cell in grad_out.chunks(cout) {
        for (d, &gv) in db.iter_mut().zip(cell) {
            *d += gv;
        }
    }
    (dw, db)
}

/// Per-output-index interpolation taps along one axis: (src0, src1, w0, w1).
/// Half-pixel-center convention; source indices are absolute (crop offset
/// already applied).
pub fn bilinear_axis_taps<T: Scalar>(
    crop_off: usize,
    crop_len: usize,
    out_len: usize,
) -> Vec<(usize, usize, T, T)> {
    let scale = crop_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (crop_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(crop_len - 1);
            let w1 = s - i0 as f64;
            (crop_off + i0, crop_off + i1, T::from_f64(1.0 - w1), T::from_f64(w1))
        })
        .collect()
}
