//! Differentiable layer primitives on `(channels, time)` activation arrays.

use ndarray::Array2;

/// Shape of a 1-D convolution weight tensor, stored flat as `w[out][in][tap]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 4];
    let lanes = n / 4;
    for c in 0..lanes {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * lanes..n {
        s += a[i] * b[i];
    }
    s
}

/// Valid `(dst_start, src_start, run)` overlap for a tap shifted by `j - pad`.
#[inline]
fn tap_overlap(t_len: usize, j: usize, pad: usize) -> (usize, usize, usize) {
    let shift = j as isize - pad as isize;
    let dst0 = (-shift).max(0) as usize;
    let dst1 = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
    let run = dst1.saturating_sub(dst0);
    ((dst0), ((dst0 as isize + shift) as usize), run)
}

/// Same-padded 1-D convolution: `y[o][t] = b[o] + sum_{i,j} w[o][i][j] x[i][t+j-pad]`.
pub(crate) fn conv1d_forward(
    x: &Array2<f64>,
    w: &[f64],
    b: &[f64],
    shape: ConvShape,
) -> Array2<f64> {
    let (in_ch, t_len) = x.dim();
    debug_assert_eq!(in_ch, shape.in_ch);
    debug_assert_eq!(w.len(), shape.weight_len());
    debug_assert_eq!(b.len(), shape.out_ch);
    let pad = (shape.kernel - 1) / 2;
    let x_flat = x.as_slice().expect("conv input is contiguous");
    let mut y = Array2::zeros((shape.out_ch, t_len));
    let y_flat = y.as_slice_mut().expect("conv output is contiguous");
    for o in 0..shape.out_ch {
        let y_row = &mut y_flat[o * t_len..(o + 1) * t_len];
        y_row.fill(b[o]);
        let w_out = &w[o * shape.in_ch * shape.kernel..(o + 1) * shape.in_ch * shape.kernel];
        for i in 0..in_ch {
            let w_tap = &w_out[i * shape.kernel..(i + 1) * shape.kernel];
            let x_row = &x_flat[i * t_len..(i + 1) * t_len];
            for (j, &wj) in w_tap.iter().enumerate() {
                let (dst0, src0, run) = tap_overlap(t_len, j, pad);
                if run == 0 {
                    continue;
                }
                axpy(wj, &x_row[src0..src0 + run], &mut y_row[dst0..dst0 + run]);
            }
        }
    }
    y
}

/// Gradients of a same-padded 1-D convolution given upstream `gy`.
pub(crate) fn conv1d_backward(
    x: &Array2<f64>,
    w: &[f64],
    shape: ConvShape,
    gy: &Array2<f64>,
) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let (in_ch, t_len) = x.dim();
    let pad = (shape.kernel - 1) / 2;
    let x_flat = x.as_slice().expect("conv input is contiguous");
    let gy_flat = gy.as_slice().expect("conv upstream gradient is contiguous");
    let mut gx = Array2::zeros((in_ch, t_len));
    let gx_flat = gx.as_slice_mut().expect("conv input gradient is contiguous");
    let mut gw = vec![0.0; shape.weight_len()];
    let mut gb = vec![0.0; shape.out_ch];
    for o in 0..shape.out_ch {
        let gy_row = &gy_flat[o * t_len..(o + 1) * t_len];
        gb[o] = gy_row.iter().sum();
        for i in 0..in_ch {
            let x_row = &x_flat[i * t_len..(i + 1) * t_len];
            let gx_row = &mut gx_flat[i * t_len..(i + 1) * t_len];
            let base = (o * shape.in_ch + i) * shape.kernel;
            for j in 0..shape.kernel {
                let (dst0, src0, run) = tap_overlap(t_len, j, pad);
                if run == 0 {
                    continue;
                }
                gw[base + j] += dot(&gy_row[dst0..dst0 + run], &x_row[src0..src0 + run]);
                axpy(
                    w[base + j],
                    &gy_row[dst0..dst0 + run],
                    &mut gx_row[src0..src0 + run],
                );
            }
        }
    }
    (gx, gw, gb)
}

/// Elementwise rectifier.
pub(crate) fn relu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Rectifier gradient: passes `gy` where the pre-activation was positive.
pub(crate) fn relu_backward(pre: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// Max pooling with window 2 and stride 2; odd trailing samples are dropped.
/// Returns the pooled array and the source index of each maximum.
pub(crate) fn maxpool2_forward(x: &Array2<f64>) -> (Array2<f64>, Array2<usize>) {
    let (ch, t_len) = x.dim();
    let t_out = t_len / 2;
    let mut y = Array2::zeros((ch, t_out));
    let mut idx = Array2::zeros((ch, t_out));
    for c in 0..ch {
        for t in 0..t_out {
            let a = x[[c, 2 * t]];
            let b = x[[c, 2 * t + 1]];
            if b > a {
                y[[c, t]] = b;
                idx[[c, t]] = 2 * t + 1;
            } else {
                y[[c, t]] = a;
                idx[[c, t]] = 2 * t;
            }
        }
    }
    (y, idx)
}

/// Routes pooling gradients back to the positions that produced each maximum.
pub(crate) fn maxpool2_backward(
    idx: &Array2<usize>,
    t_in: usize,
    gy: &Array2<f64>,
) -> Array2<f64> {
    let (ch, t_out) = gy.dim();
    let mut gx = Array2::zeros((ch, t_in));
    for c in 0..ch {
        for t in 0..t_out {
            gx[[c, idx[[c, t]]]] += gy[[c, t]];
        }
    }
    gx
}

/// Channelwise projection (pointwise convolution): `y = W x + b`, `W` is `(out, in)`.
pub(crate) fn proj_forward(x: &Array2<f64>, w: &[f64], b: &[f64], out_ch: usize) -> Array2<f64> {
    let (in_ch, t_len) = x.dim();
    debug_assert_eq!(w.len(), out_ch * in_ch);
    let x_flat = x.as_slice().expect("projection input is contiguous");
    let mut y = Array2::zeros((out_ch, t_len));
    let y_flat = y.as_slice_mut().expect("projection output is contiguous");
    for o in 0..out_ch {
        let y_row = &mut y_flat[o * t_len..(o + 1) * t_len];
        y_row.fill(b[o]);
        let w_row = &w[o * in_ch..(o + 1) * in_ch];
        for i in 0..in_ch {
            axpy(w_row[i], &x_flat[i * t_len..(i + 1) * t_len], y_row);
        }
    }
    y
}

/// Gradients of the channelwise projection.
pub(crate) fn proj_backward(
    x: &Array2<f64>,
    w: &[f64],
    out_ch: usize,
    gy: &Array2<f64>,
) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let (in_ch, t_len) = x.dim();
    let x_flat = x.as_slice().expect("projection input is contiguous");
    let gy_flat = gy.as_slice().expect("projection upstream gradient is contiguous");
    let mut gx = Array2::zeros((in_ch, t_len));
    let gx_flat = gx.as_slice_mut().expect("projection input gradient is contiguous");
    let mut gw = vec![0.0; out_ch * in_ch];
    let mut gb = vec![0.0; out_ch];
    for o in 0..out_ch {
        let gy_row = &gy_flat[o * t_len..(o + 1) * t_len];
        gb[o] = gy_row.iter().sum();
        let w_row = &w[o * in_ch..(o + 1) * in_ch];
        let gw_row = &mut gw[o * in_ch..(o + 1) * in_ch];
        for i in 0..in_ch {
            let x_row = &x_flat[i * t_len..(i + 1) * t_len];
            gw_row[i] += dot(gy_row, x_row);
            axpy(w_row[i], gy_row, &mut gx_flat[i * t_len..(i + 1) * t_len]);
        }
    }
    (gx, gw, gb)
}

/// Numerically stable row softmax.
pub(crate) fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = s.dim();
    let mut a = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = s.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (s[[r, c]] - m).exp();
            a[[r, c]] = e;
            sum += e;
        }
        for c in 0..cols {
            a[[r, c]] /= sum;
        }
    }
    a
}

/// Row-softmax gradient: `gS[r][c] = A[r][c] (gA[r][c] - sum_c' A[r][c'] gA[r][c'])`.
pub(crate) fn softmax_rows_backward(a: &Array2<f64>, ga: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = a.dim();
    let mut gs = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut dot = 0.0;
        for c in 0..cols {
            dot += a[[r, c]] * ga[[r, c]];
        }
        for c in 0..cols {
            gs[[r, c]] = a[[r, c]] * (ga[[r, c]] - dot);
        }
    }
    gs
}

/// Global average over time: one value per channel.
pub(crate) fn gap_forward(x: &Array2<f64>) -> Vec<f64> {
    let (ch, t_len) = x.dim();
    (0..ch).map(|c| x.row(c).sum() / t_len as f64).collect()
}

/// Spreads each channel gradient uniformly over time.
pub(crate) fn gap_backward(ch: usize, t_len: usize, gy: &[f64]) -> Array2<f64> {
    let mut gx = Array2::zeros((ch, t_len));
    for c in 0..ch {
        let g = gy[c] / t_len as f64;
        for t in 0..t_len {
            gx[[c, t]] = g;
        }
    }
    gx
}

/// Fully connected layer: `y = W x + b` with `W` stored row-major `(out, in)`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut y = vec![0.0; out_dim];
    for o in 0..out_dim {
        let w_row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for i in 0..in_dim {
            acc += w_row[i] * x[i];
        }
        y[o] = acc;
    }
    y
}

/// Gradients of the fully connected layer.
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    out_dim: usize,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let mut gx = vec![0.0; in_dim];
    let mut gw = vec![0.0; out_dim * in_dim];
    let mut gb = vec![0.0; out_dim];
    for o in 0..out_dim {
        let g = gy[o];
        gb[o] = g;
        let w_row = &w[o * in_dim..(o + 1) * in_dim];
        let gw_row = &mut gw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            gw_row[i] += g * x[i];
            gx[i] += g * w_row[i];
        }
    }
    (gx, gw, gb)
}
