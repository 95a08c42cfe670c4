//! Flat-slice numeric kernels behind the tape ops.
//!
//! Convolution accumulates contributions in (in-channel, kernel-row,
//! kernel-col) order for every output element, so results agree with a naive
//! per-element loop at the last bit. Inner loops run over contiguous rows so
//! the compiler can vectorize them.

use crate::tensor::Shape;

/// Output extent of a convolution along one axis: floor((in + 2p - k)/s) + 1.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output coordinate range [lo, hi) whose input coordinate `o*stride + k - pad`
/// falls inside [0, in_extent).
#[inline]
fn valid_out_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let s = stride as isize;
    let shift = k as isize - pad as isize; // input coord = o*s + shift
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi_excl = {
        // largest o with o*s + shift <= in_extent - 1
        let top = in_extent as isize - 1 - shift;
        if top < 0 {
            0
        } else {
            top / s + 1
        }
    };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(out_extent);
    (lo.min(hi), hi)
}

/// Feature maps up to this many output positions go through the
/// patch-matrix (im2col) path, whose long contiguous dot products vectorize
/// well; larger maps use the row-sliding path, which avoids the patch
/// buffer.
const IM2COL_MAX_POSITIONS: usize = 4096;

/// Convolution. `x` is (n, ic, h, w); `w` is (oc, ic, kh, kw) flat;
/// `bias` has length `oc`. `out` must be sized for `os` = (n, oc, oh, ow).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    out: &mut [f64],
    os: Shape,
) {
    if os.h * os.w <= IM2COL_MAX_POSITIONS {
        conv2d_forward_cols(x, xs, w, oc, ic, kh, kw, bias, stride, pad, out, os);
    } else {
        conv2d_forward_rows(x, xs, w, oc, ic, kh, kw, bias, stride, pad, out, os);
    }
}

/// Dot product with independent partial accumulators so the compiler can
/// vectorize across lanes.
#[inline]
fn dot(a: &[f64], b: &[f64], seed: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = seed
        + (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])));
    for (va, vb) in ai.remainder().iter().zip(bi.remainder()) {
        s += va * vb;
    }
    s
}

#[inline]
fn axpy(out: &mut [f64], a: &[f64], g: f64) {
    for (o, v) in out.iter_mut().zip(a) {
        *o += g * v;
    }
}

/// Gather one batch item into a position-major patch matrix: row p holds the
/// receptive field of output position p in (in-channel, ky, kx) order, with
/// zeros where the window hangs over the padding.
#[allow(clippy::too_many_arguments)]
fn fill_cols(
    x_n: &[f64],
    h: usize,
    w: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let patch = ic * kh * kw;
    let pad = pad as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            let mut q = 0;
            for i in 0..ic {
                let chan = &x_n[i * h * w..(i + 1) * h * w];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        dst[q..q + kw].fill(0.0);
                        q += kw;
                        continue;
                    }
                    let row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    let ix0 = (ox * stride) as isize - pad;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        dst[q] = if ix < 0 || ix >= w as isize { 0.0 } else { row[ix as usize] };
                        q += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_cols(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    out: &mut [f64],
    os: Shape,
) {
    let positions = os.h * os.w;
    let patch = ic * kh * kw;
    let mut cols = vec![0.0; positions * patch];
    for n in 0..xs.n {
        fill_cols(
            &x[xs.offset(n, 0, 0, 0)..xs.offset(n, 0, 0, 0) + ic * xs.h * xs.w],
            xs.h,
            xs.w,
            ic,
            kh,
            kw,
            stride,
            pad,
            os.h,
            os.w,
            &mut cols,
        );
        let out_n = &mut out[os.offset(n, 0, 0, 0)..os.offset(n, 0, 0, 0) + oc * positions];
        for p in 0..positions {
            let col = &cols[p * patch..(p + 1) * patch];
            let mut o = 0;
            // four output channels per pass share every column load
            while o + 4 <= oc {
                let [d0, d1, d2, d3] = dot4(
                    [
                        &w[o * patch..(o + 1) * patch],
                        &w[(o + 1) * patch..(o + 2) * patch],
                        &w[(o + 2) * patch..(o + 3) * patch],
                        &w[(o + 3) * patch..(o + 4) * patch],
                    ],
                    col,
                );
                for (j, d) in [d0, d1, d2, d3].into_iter().enumerate() {
                    out_n[(o + j) * positions + p] = bias.map_or(0.0, |b| b[o + j]) + d;
                }
                o += 4;
            }
            while o < oc {
                let seed = bias.map_or(0.0, |b| b[o]);
                out_n[o * positions + p] = dot(&w[o * patch..(o + 1) * patch], col, seed);
                o += 1;
            }
        }
    }
}

/// Four simultaneous dot products against one shared right-hand side.
#[inline]
fn dot4(rows: [&[f64]; 4], col: &[f64]) -> [f64; 4] {
    let len = col.len();
    let mut acc = [[0.0f64; 8]; 4];
    let chunks = len / 8;
    for c in 0..chunks {
        let base = c * 8;
        let cc = &col[base..base + 8];
        for (r, row) in rows.iter().enumerate() {
            let rc = &row[base..base + 8];
            for l in 0..8 {
                acc[r][l] += rc[l] * cc[l];
            }
        }
    }
    let mut out = [0.0f64; 4];
    for r in 0..4 {
        let a = &acc[r];
        out[r] = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
        for i in chunks * 8..len {
            out[r] += rows[r][i] * col[i];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_rows(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    out: &mut [f64],
    os: Shape,
) {
    let (h, wid) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    for n in 0..xs.n {
        for o in 0..oc {
            let plane = &mut out[os.offset(n, o, 0, 0)..os.offset(n, o, 0, 0) + oh * ow];
            // output row stays cache-resident across the kernel sweep
            for oy in 0..oh {
                let out_row_full = &mut plane[oy * ow..(oy + 1) * ow];
                out_row_full.fill(bias.map_or(0.0, |b| b[o]));
                for i in 0..ic {
                    let x_chan = &x[xs.offset(n, i, 0, 0)..xs.offset(n, i, 0, 0) + h * wid];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let wv = w[((o * ic + i) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (rx0, rx1) = valid_out_range(kx, pad, stride, wid, ow);
                            if rx0 >= rx1 {
                                continue;
                            }
                            let out_row = &mut out_row_full[rx0..rx1];
                            if stride == 1 {
                                let ix0 = rx0 + kx - pad;
                                let x_row = &x_chan[iy * wid + ix0..iy * wid + ix0 + (rx1 - rx0)];
                                for (ov, xv) in out_row.iter_mut().zip(x_row) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (d, ov) in out_row.iter_mut().enumerate() {
                                    let ix = (rx0 + d) * stride + kx - pad;
                                    *ov += wv * x_chan[iy * wid + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution. Accumulates (+=) into `dx`, `dw`, and `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    dy: &[f64],
    os: Shape,
    stride: usize,
    pad: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    if os.h * os.w <= IM2COL_MAX_POSITIONS {
        conv2d_backward_cols(x, xs, w, oc, ic, kh, kw, dy, os, stride, pad, dx, dw, db);
    } else {
        conv2d_backward_rows(x, xs, w, oc, ic, kh, kw, dy, os, stride, pad, dx, dw, db);
    }
}

/// Scatter-add a position-major patch-gradient matrix back onto the input
/// (the inverse of [`fill_cols`]).
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcols: &[f64],
    h: usize,
    w: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx_n: &mut [f64],
) {
    let patch = ic * kh * kw;
    let pad = pad as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &dcols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            let mut q = 0;
            for i in 0..ic {
                let chan = &mut dx_n[i * h * w..(i + 1) * h * w];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        q += kw;
                        continue;
                    }
                    let row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    let ix0 = (ox * stride) as isize - pad;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            row[ix as usize] += src[q];
                        }
                        q += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_cols(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    dy: &[f64],
    os: Shape,
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let positions = os.h * os.w;
    let patch = ic * kh * kw;
    if let Some(db) = db {
        for n in 0..xs.n {
            for o in 0..oc {
                let base = os.offset(n, o, 0, 0);
                db[o] += dy[base..base + positions].iter().sum::<f64>();
            }
        }
    }
    let mut cols = vec![0.0; positions * patch];
    let mut dcols = if dx.is_some() { vec![0.0; positions * patch] } else { Vec::new() };
    for n in 0..xs.n {
        let x_base = xs.offset(n, 0, 0, 0);
        fill_cols(
            &x[x_base..x_base + ic * xs.h * xs.w],
            xs.h,
            xs.w,
            ic,
            kh,
            kw,
            stride,
            pad,
            os.h,
            os.w,
            &mut cols,
        );
        let dy_n = &dy[os.offset(n, 0, 0, 0)..os.offset(n, 0, 0, 0) + oc * positions];
        if dx.is_some() {
            dcols.fill(0.0);
        }
        // four positions per sweep share each weight/grad row load
        let blocks = positions / 4;
        for b in 0..blocks {
            let p0 = b * 4;
            let col_block = &cols[p0 * patch..(p0 + 4) * patch];
            let (c0, rest) = col_block.split_at(patch);
            let (c1, rest) = rest.split_at(patch);
            let (c2, c3) = rest.split_at(patch);
            if dx.is_some() {
                let dc_block = &mut dcols[p0 * patch..(p0 + 4) * patch];
                let (d0, rest) = dc_block.split_at_mut(patch);
                let (d1, rest) = rest.split_at_mut(patch);
                let (d2, d3) = rest.split_at_mut(patch);
                for o in 0..oc {
                    let g = [
                        dy_n[o * positions + p0],
                        dy_n[o * positions + p0 + 1],
                        dy_n[o * positions + p0 + 2],
                        dy_n[o * positions + p0 + 3],
                    ];
                    let w_row = &w[o * patch..(o + 1) * patch];
                    let dw_row = &mut dw[o * patch..(o + 1) * patch];
                    for q in 0..patch {
                        dw_row[q] += g[0] * c0[q] + g[1] * c1[q] + g[2] * c2[q] + g[3] * c3[q];
                        let wv = w_row[q];
                        d0[q] += g[0] * wv;
                        d1[q] += g[1] * wv;
                        d2[q] += g[2] * wv;
                        d3[q] += g[3] * wv;
                    }
                }
            } else {
                for o in 0..oc {
                    let g = [
                        dy_n[o * positions + p0],
                        dy_n[o * positions + p0 + 1],
                        dy_n[o * positions + p0 + 2],
                        dy_n[o * positions + p0 + 3],
                    ];
                    let dw_row = &mut dw[o * patch..(o + 1) * patch];
                    for q in 0..patch {
                        dw_row[q] += g[0] * c0[q] + g[1] * c1[q] + g[2] * c2[q] + g[3] * c3[q];
                    }
                }
            }
        }
        for p in blocks * 4..positions {
            let col = &cols[p * patch..(p + 1) * patch];
            for o in 0..oc {
                let g = dy_n[o * positions + p];
                if g == 0.0 {
                    continue;
                }
                axpy(&mut dw[o * patch..(o + 1) * patch], col, g);
                if dx.is_some() {
                    axpy(&mut dcols[p * patch..(p + 1) * patch], &w[o * patch..(o + 1) * patch], g);
                }
            }
        }
        if let Some(dx_buf) = dx.as_deref_mut() {
            col2im_acc(
                &dcols,
                xs.h,
                xs.w,
                ic,
                kh,
                kw,
                stride,
                pad,
                os.h,
                os.w,
                &mut dx_buf[x_base..x_base + ic * xs.h * xs.w],
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_rows(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    dy: &[f64],
    os: Shape,
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let (h, wid) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    if let Some(db) = db {
        for n in 0..xs.n {
            for o in 0..oc {
                let base = os.offset(n, o, 0, 0);
                db[o] += dy[base..base + oh * ow].iter().sum::<f64>();
            }
        }
    }
    for n in 0..xs.n {
        for o in 0..oc {
            let dy_plane = &dy[os.offset(n, o, 0, 0)..os.offset(n, o, 0, 0) + oh * ow];
            for oy in 0..oh {
                let dy_row_full = &dy_plane[oy * ow..(oy + 1) * ow];
                for i in 0..ic {
                    let x_base = xs.offset(n, i, 0, 0);
                    let x_chan = &x[x_base..x_base + h * wid];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let (rx0, rx1) = valid_out_range(kx, pad, stride, wid, ow);
                            if rx0 >= rx1 {
                                continue;
                            }
                            let widx = ((o * ic + i) * kh + ky) * kw + kx;
                            let dy_row = &dy_row_full[rx0..rx1];
                            if stride == 1 {
                                let ix0 = rx0 + kx - pad;
                                let span = rx1 - rx0;
                                let x_row = &x_chan[iy * wid + ix0..iy * wid + ix0 + span];
                                dw[widx] += dot(x_row, dy_row, 0.0);
                                if let Some(dx) = dx.as_deref_mut() {
                                    let wv = w[widx];
                                    if wv != 0.0 {
                                        let dst = &mut dx
                                            [x_base + iy * wid + ix0..x_base + iy * wid + ix0 + span];
                                        axpy(dst, dy_row, wv);
                                    }
                                }
                            } else {
                                let mut wacc = 0.0;
                                for (d, dv) in dy_row.iter().enumerate() {
                                    let ix = (rx0 + d) * stride + kx - pad;
                                    wacc += dv * x_chan[iy * wid + ix];
                                }
                                dw[widx] += wacc;
                                if let Some(dx) = dx.as_deref_mut() {
                                    let wv = w[widx];
                                    if wv != 0.0 {
                                        for (d, dv) in dy_row.iter().enumerate() {
                                            let ix = (rx0 + d) * stride + kx - pad;
                                            dx[x_base + iy * wid + ix] += wv * dv;
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
}

/// 2x2 max pooling with stride 2. Returns flat input indices of the maxima
/// (first occurrence wins on ties) for the backward pass.
pub fn maxpool2_forward(x: &[f64], xs: Shape, out: &mut [f64], argmax: &mut [usize]) {
    let os_h = xs.h / 2;
    let os_w = xs.w / 2;
    let mut oi = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..os_h {
                for ox in 0..os_w {
                    let mut best_idx = xs.offset(n, c, 2 * oy, 2 * ox);
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = xs.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
}

/// Softmax over all spatial positions, one distribution per batch item.
/// `x` is (n, 1, h, w); max subtraction keeps the exponentials bounded.
pub fn spatial_softmax_forward(x: &[f64], n: usize, hw: usize, out: &mut [f64]) {
    for b in 0..n {
        let row = &x[b * hw..(b + 1) * hw];
        let out_row = &mut out[b * hw..(b + 1) * hw];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// Softmax gradient: dx = y * (dy - <dy, y>) per batch item.
pub fn spatial_softmax_backward(y: &[f64], dy: &[f64], n: usize, hw: usize, dx: &mut [f64]) {
    for b in 0..n {
        let y_row = &y[b * hw..(b + 1) * hw];
        let dy_row = &dy[b * hw..(b + 1) * hw];
        let dot: f64 = y_row.iter().zip(dy_row).map(|(a, b)| a * b).sum();
        for ((d, yv), dv) in dx[b * hw..(b + 1) * hw].iter_mut().zip(y_row).zip(dy_row) {
            *d += yv * (dv - dot);
        }
    }
}

/// Peak-normalized 2-D Gaussian sampled at cell centers ((j+0.5)/w, (i+0.5)/h).
/// Dividing by the analytic peak 1/(2 pi sx sy) reduces the density to
/// exp(-((x-mx)^2/(2 sx^2) + (y-my)^2/(2 sy^2))), with supremum 1.
pub fn gaussian_map_forward(mx: f64, my: f64, sx: f64, sy: f64, h: usize, w: usize, out: &mut [f64]) {
    let inv2sx2 = 1.0 / (2.0 * sx * sx);
    let inv2sy2 = 1.0 / (2.0 * sy * sy);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        let dy2 = (y - my) * (y - my) * inv2sy2;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let dx2 = (x - mx) * (x - mx) * inv2sx2;
            out[i * w + j] = (-(dx2 + dy2)).exp();
        }
    }
}

/// Gradient of the peak-normalized Gaussian w.r.t. (mx, my, sx, sy).
/// `g` is the forward output; accumulates into `dp = [dmx, dmy, dsx, dsy]`.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_map_backward(
    mx: f64,
    my: f64,
    sx: f64,
    sy: f64,
    h: usize,
    w: usize,
    g: &[f64],
    dy: &[f64],
    dp: &mut [f64],
) {
    let mut acc = [0.0f64; 4];
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        let ddy = y - my;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let ddx = x - mx;
            let gd = g[i * w + j] * dy[i * w + j];
            acc[0] += gd * ddx / (sx * sx);
            acc[1] += gd * ddy / (sy * sy);
            acc[2] += gd * ddx * ddx / (sx * sx * sx);
            acc[3] += gd * ddy * ddy / (sy * sy * sy);
        }
    }
    for (d, a) in dp.iter_mut().zip(acc) {
        *d += a;
    }
}

/// True when each dimension of `b` equals the matching dimension of `a` or 1.
pub fn broadcastable(a: Shape, b: Shape) -> bool {
    (b.n == a.n || b.n == 1)
        && (b.c == a.c || b.c == 1)
        && (b.h == a.h || b.h == 1)
        && (b.w == a.w || b.w == 1)
}

#[inline]
fn bcast_strides(b: Shape) -> [usize; 4] {
    let sw = if b.w == 1 { 0 } else { 1 };
    let sh = if b.h == 1 { 0 } else { b.w };
    let sc = if b.c == 1 { 0 } else { b.h * b.w };
    let sn = if b.n == 1 { 0 } else { b.c * b.h * b.w };
    [sn, sc, sh, sw]
}

/// Elementwise combine with limited broadcasting of `b` (dims equal or 1).
pub fn ew_broadcast(a: &[f64], ashape: Shape, b: &[f64], bshape: Shape, mul: bool, out: &mut [f64]) {
    if ashape == bshape {
        if mul {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o = x * y;
            }
        } else {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o = x + y;
            }
        }
        return;
    }
    let [sn, sc, sh, sw] = bcast_strides(bshape);
    let mut oi = 0;
    for n in 0..ashape.n {
        for c in 0..ashape.c {
            for h in 0..ashape.h {
                let row = n * sn + c * sc + h * sh;
                for w in 0..ashape.w {
                    let bv = b[row + w * sw];
                    out[oi] = if mul { a[oi] * bv } else { a[oi] + bv };
                    oi += 1;
                }
            }
        }
    }
}

/// acc[i] += dy[i] * b[broadcast index of i], for `b` broadcast over `full`.
pub fn mul_broadcast_acc(dy: &[f64], full: Shape, b: &[f64], bshape: Shape, acc: &mut [f64]) {
    if full == bshape {
        for ((a, d), bv) in acc.iter_mut().zip(dy).zip(b) {
            *a += d * bv;
        }
        return;
    }
    let [sn, sc, sh, sw] = bcast_strides(bshape);
    let mut gi = 0;
    for n in 0..full.n {
        for c in 0..full.c {
            for h in 0..full.h {
                let row = n * sn + c * sc + h * sh;
                for w in 0..full.w {
                    acc[gi] += dy[gi] * b[row + w * sw];
                    gi += 1;
                }
            }
        }
    }
}

/// Reduce a gradient over the broadcast dimensions of `b`: for every position
/// of the full shape, add `g * weight(position)` into the matching entry of
/// `acc` (shaped like `b`). `weight` is the other operand for products, or
/// None for sums.
pub fn reduce_broadcast(
    g: &[f64],
    full: Shape,
    weight: Option<&[f64]>,
    bshape: Shape,
    acc: &mut [f64],
) {
    if full == bshape {
        match weight {
            Some(wv) => {
                for ((a, gv), w) in acc.iter_mut().zip(g).zip(wv) {
                    *a += gv * w;
                }
            }
            None => {
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
            }
        }
        return;
    }
    let [sn, sc, sh, sw] = bcast_strides(bshape);
    let mut gi = 0;
    for n in 0..full.n {
        for c in 0..full.c {
            for h in 0..full.h {
                let row = n * sn + c * sc + h * sh;
                for w in 0..full.w {
                    let v = match weight {
                        Some(wv) => g[gi] * wv[gi],
                        None => g[gi],
                    };
                    acc[row + w * sw] += v;
                    gi += 1;
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(conv_out_extent(5, 3, 1, 0), Some(3));
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn valid_range_covers_padding() {
        // k=0, pad=1, stride=1, in=4, out=4: input coord = o - 1 valid for o in [1,4)
        assert_eq!(valid_out_range(0, 1, 1, 4, 4), (1, 4));
        // k=2, pad=1: input coord = o + 1 valid for o in [0,3)
        assert_eq!(valid_out_range(2, 1, 1, 4, 4), (0, 3));
        assert_eq!(valid_out_range(1, 1, 1, 4, 4), (0, 4));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -1.0, 0.0, 5.0];
        let mut y = [0.0; 6];
        spatial_softmax_forward(&x, 2, 3, &mut y);
        let s0: f64 = y[..3].iter().sum();
        let s1: f64 = y[3..].iter().sum();
        assert!((s0 - 1.0).abs() < 1e-12 && (s1 - 1.0).abs() < 1e-12);
    }
}
