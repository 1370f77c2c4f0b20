//! Raw numeric kernels shared by the tape ops and the inference pipeline.
//!
//! Every kernel runs a fixed loop order so that identical inputs produce
//! bitwise-identical outputs run to run. Accumulation is f32 inside the
//! spatial kernels; scalar reductions elsewhere use f64.
//!
//! Convolutions use "same" zero padding: with kernel `k` and stride `s`
//! (`k >= s`), total padding is `k - s`, split as `beg = (k - s) / 2`,
//! `end = k - s - beg`. A transposed convolution with the same weight buffer
//! is the exact adjoint of the convolution (up to bias).

/// Leading ("beg") zero padding for same-padded convolution.
pub fn same_pad(kernel: usize, stride: usize) -> usize {
    debug_assert!(kernel >= stride);
    (kernel - stride) / 2
}

/// Gathers same-padded k x k patches of `src` [C, H, W] into a matrix
/// P [(C*k*k) x (oh*ow)] over the strided output grid; out-of-bounds taps
/// read as zero. Turns the convolutions into unit-stride axpy/dot passes.
fn im2col(src: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, p: &mut [f32]) {
    let pad = same_pad(k, stride);
    let oh = h / stride;
    let ow = w / stride;
    let n = oh * ow;
    debug_assert_eq!(p.len(), c * k * k * n);
    p.fill(0.0);
    for ch in 0..c {
        let xc = &src[ch * h * w..(ch + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut p[((ch * k + u) * k + v) * n..((ch * k + u) * k + v + 1) * n];
                let (lo_x, hi_x) = valid_range(ow, w, stride, v, pad);
                if lo_x > hi_x {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let rrow = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in lo_x..=hi_x {
                        rrow[ox] = xrow[ox * stride + v - pad];
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: G [(C*k*k) x (sh*sw)] over the small
/// grid accumulates into `dst` [C, sh*stride, sw*stride].
fn col2im_add(g: &[f32], c: usize, sh: usize, sw: usize, k: usize, stride: usize, dst: &mut [f32]) {
    let pad = same_pad(k, stride);
    let oh = sh * stride;
    let ow = sw * stride;
    let n = sh * sw;
    debug_assert_eq!(g.len(), c * k * k * n);
    debug_assert_eq!(dst.len(), c * oh * ow);
    for ch in 0..c {
        let dc = &mut dst[ch * oh * ow..(ch + 1) * oh * ow];
        for u in 0..k {
            for v in 0..k {
                let row = &g[((ch * k + u) * k + v) * n..((ch * k + u) * k + v + 1) * n];
                let (lo_x, hi_x) = valid_range(sw, ow, stride, v, pad);
                if lo_x > hi_x {
                    continue;
                }
                for y in 0..sh {
                    let i = (y * stride + u) as isize - pad as isize;
                    if i < 0 || i >= oh as isize {
                        continue;
                    }
                    let drow = &mut dc[i as usize * ow..(i as usize + 1) * ow];
                    let rrow = &row[y * sw..(y + 1) * sw];
                    for x in lo_x..=hi_x {
                        drow[x * stride + v - pad] += rrow[x];
                    }
                }
            }
        }
    }
}

/// y[o,oy,ox] = bias[o] + sum_{c,u,v} x[c, oy*s+u-pad, ox*s+v-pad] * w[o,c,u,v]
///
/// Accumulation order per output element is (c, u, v), fixed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    co: usize,
    k: usize,
    bias: Option<&[f32]>,
    stride: usize,
    y: &mut [f32],
) {
    let oh = h / stride;
    let ow = w / stride;
    let n = oh * ow;
    let kk = ci * k * k;
    debug_assert_eq!(y.len(), co * n);
    let mut p = vec![0.0f32; kk * n];
    im2col(x, ci, h, w, k, stride, &mut p);
    // four output channels per pass over P to cut memory traffic
    let mut o = 0;
    while o + 4 <= co {
        let mut rows = y[o * n..(o + 4) * n].chunks_exact_mut(n);
        let (y0, y1, y2, y3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for (i, row) in [&mut *y0, &mut *y1, &mut *y2, &mut *y3].into_iter().enumerate() {
            row.fill(bias.map_or(0.0, |b| b[o + i]));
        }
        let (w0, w1, w2, w3) = (
            &wgt[o * kk..(o + 1) * kk],
            &wgt[(o + 1) * kk..(o + 2) * kk],
            &wgt[(o + 2) * kk..(o + 3) * kk],
            &wgt[(o + 3) * kk..(o + 4) * kk],
        );
        for j in 0..kk {
            let prow = &p[j * n..(j + 1) * n];
            let (a, b, c, d) = (w0[j], w1[j], w2[j], w3[j]);
            for i in 0..n {
                let pv = prow[i];
                y0[i] += a * pv;
                y1[i] += b * pv;
                y2[i] += c * pv;
                y3[i] += d * pv;
            }
        }
        o += 4;
    }
    for o in o..co {
        let yo = &mut y[o * n..(o + 1) * n];
        yo.fill(bias.map_or(0.0, |b| b[o]));
        let wrow = &wgt[o * kk..(o + 1) * kk];
        for (j, wv) in wrow.iter().enumerate() {
            let prow = &p[j * n..(j + 1) * n];
            for (yp, pp) in yo.iter_mut().zip(prow) {
                *yp += wv * pp;
            }
        }
    }
}

/// out[c,i,j] = bias[c] + sum over z[o,iy,ix]*w[o,c,u,v] with i=iy*s+u-pad, j=ix*s+v-pad.
///
/// Exact adjoint of [`conv2d_fwd`] with the same weight buffer.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_fwd(
    z: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    co: usize,
    k: usize,
    bias: Option<&[f32]>,
    stride: usize,
    out: &mut [f32],
) {
    let oh = h * stride;
    let ow = w * stride;
    let n = h * w;
    let kk = co * k * k;
    debug_assert_eq!(out.len(), co * oh * ow);
    // G = W^T * z over the small grid, then scatter; four input channels
    // per pass over G to cut memory traffic
    let mut g = vec![0.0f32; kk * n];
    let mut o = 0;
    while o + 4 <= ci {
        let (z0, z1, z2, z3) = (
            &z[o * n..(o + 1) * n],
            &z[(o + 1) * n..(o + 2) * n],
            &z[(o + 2) * n..(o + 3) * n],
            &z[(o + 3) * n..(o + 4) * n],
        );
        let (w0, w1, w2, w3) = (
            &wgt[o * kk..(o + 1) * kk],
            &wgt[(o + 1) * kk..(o + 2) * kk],
            &wgt[(o + 2) * kk..(o + 3) * kk],
            &wgt[(o + 3) * kk..(o + 4) * kk],
        );
        for j in 0..kk {
            let grow = &mut g[j * n..(j + 1) * n];
            let (a, b, c, d) = (w0[j], w1[j], w2[j], w3[j]);
            for i in 0..n {
                grow[i] += a * z0[i] + b * z1[i] + c * z2[i] + d * z3[i];
            }
        }
        o += 4;
    }
    for o in o..ci {
        let zo = &z[o * n..(o + 1) * n];
        let wrow = &wgt[o * kk..(o + 1) * kk];
        for (j, wv) in wrow.iter().enumerate() {
            let grow = &mut g[j * n..(j + 1) * n];
            for (gp, zp) in grow.iter_mut().zip(zo) {
                *gp += wv * zp;
            }
        }
    }
    for c in 0..co {
        out[c * oh * ow..(c + 1) * oh * ow].fill(bias.map_or(0.0, |b| b[c]));
    }
    col2im_add(&g, co, h, w, k, stride, out);
}

/// dw[a,b,u,v] = sum_{y,x} small[a,y,x] * big[b, y*s+u-pad, x*s+v-pad]
///
/// Weight gradient for both convolution directions: for conv2d pass
/// (small=dy, big=x); for conv2d_transpose pass (small=z, big=d_out).
#[allow(clippy::too_many_arguments)]
pub fn weight_grad(
    small: &[f32],
    na: usize,
    sh: usize,
    sw: usize,
    big: &[f32],
    nb: usize,
    bh: usize,
    bw: usize,
    k: usize,
    stride: usize,
    dw: &mut [f32],
) {
    let n = sh * sw;
    let kk = nb * k * k;
    debug_assert_eq!(dw.len(), na * kk);
    debug_assert_eq!((bh / stride, bw / stride), (sh, sw));
    let mut p = vec![0.0f32; kk * n];
    im2col(big, nb, bh, bw, k, stride, &mut p);
    // four gradient rows per pass over P to cut memory traffic
    let mut a = 0;
    while a + 4 <= na {
        let (s0, s1, s2, s3) = (
            &small[a * n..(a + 1) * n],
            &small[(a + 1) * n..(a + 2) * n],
            &small[(a + 2) * n..(a + 3) * n],
            &small[(a + 3) * n..(a + 4) * n],
        );
        for j in 0..kk {
            let prow = &p[j * n..(j + 1) * n];
            let (mut a0, mut a1, mut a2, mut a3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
            for i in 0..n {
                let pv = prow[i];
                a0 += s0[i] * pv;
                a1 += s1[i] * pv;
                a2 += s2[i] * pv;
                a3 += s3[i] * pv;
            }
            dw[a * kk + j] = a0;
            dw[(a + 1) * kk + j] = a1;
            dw[(a + 2) * kk + j] = a2;
            dw[(a + 3) * kk + j] = a3;
        }
        a += 4;
    }
    for a in a..na {
        let sa = &small[a * n..(a + 1) * n];
        for j in 0..kk {
            let prow = &p[j * n..(j + 1) * n];
            let mut acc = 0.0f32;
            for (sp, pp) in sa.iter().zip(prow) {
                acc += sp * pp;
            }
            dw[a * kk + j] = acc;
        }
    }
}

/// Per-channel sums of a [C, H, W] gradient (bias gradient).
pub fn channel_sums(g: &[f32], c: usize, hw: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), c);
    for ch in 0..c {
        let mut acc = 0.0f32;
        for v in &g[ch * hw..(ch + 1) * hw] {
            acc += *v;
        }
        out[ch] = acc;
    }
}

fn valid_range(out_len: usize, in_len: usize, stride: usize, v: usize, pad: usize) -> (usize, usize) {
    // indices ox with 0 <= ox*stride + v - pad < in_len, clamped to [0, out_len)
    let lo = if v >= pad { 0 } else { (pad - v).div_ceil(stride) };
    let hi_raw = (in_len as isize - 1 + pad as isize - v as isize).div_euclid(stride as isize);
    if hi_raw < lo as isize {
        return (1, 0);
    }
    (lo, (hi_raw as usize).min(out_len.saturating_sub(1)))
}

/// GDN / IGDN forward. Writes y and the per-element denominator
/// d[i] = beta[i] + sum_j gamma[i,j] * x[j]^2 (needed by the backward pass).
///
/// gdn:  y_i = x_i / sqrt(d_i)      igdn: y_i = x_i * sqrt(d_i)
pub fn gdn_fwd(
    x: &[f32],
    c: usize,
    hw: usize,
    beta: &[f32],
    gamma: &[f32],
    inverse: bool,
    y: &mut [f32],
    denom: &mut [f32],
) {
    let mut sq = vec![0.0f32; c];
    for p in 0..hw {
        for j in 0..c {
            let v = x[j * hw + p];
            sq[j] = v * v;
        }
        for i in 0..c {
            let gi = &gamma[i * c..(i + 1) * c];
            let mut acc = beta[i];
            for j in 0..c {
                acc += gi[j] * sq[j];
            }
            let idx = i * hw + p;
            denom[idx] = acc;
            let s = acc.sqrt();
            y[idx] = if inverse { x[idx] * s } else { x[idx] / s };
        }
    }
}

/// GDN / IGDN backward given saved denominators.
#[allow(clippy::too_many_arguments)]
pub fn gdn_bwd(
    x: &[f32],
    c: usize,
    hw: usize,
    gamma: &[f32],
    denom: &[f32],
    dy: &[f32],
    inverse: bool,
    dx: &mut [f32],
    dbeta: &mut [f32],
    dgamma: &mut [f32],
) {
    let mut sq = vec![0.0f32; c];
    let mut vd = vec![0.0f32; c]; // dL/dd_i at this pixel
    for p in 0..hw {
        for j in 0..c {
            let v = x[j * hw + p];
            sq[j] = v * v;
        }
        for i in 0..c {
            let idx = i * hw + p;
            let d = denom[idx];
            let s = d.sqrt();
            vd[i] = if inverse {
                // y = x * d^(1/2): dy/dd = x / (2 sqrt(d))
                dy[idx] * x[idx] * 0.5 / s
            } else {
                // y = x * d^(-1/2): dy/dd = -x / (2 d^(3/2))
                -dy[idx] * x[idx] * 0.5 / (d * s)
            };
        }
        for i in 0..c {
            dbeta[i] += vd[i];
            let dgi = &mut dgamma[i * c..(i + 1) * c];
            let vi = vd[i];
            for j in 0..c {
                dgi[j] += vi * sq[j];
            }
        }
        for kk in 0..c {
            let idx = kk * hw + p;
            let s = denom[idx].sqrt();
            let direct = if inverse { dy[idx] * s } else { dy[idx] / s };
            let mut acc = 0.0f32;
            for i in 0..c {
                acc += vd[i] * gamma[i * c + kk];
            }
            dx[idx] = direct + 2.0 * x[idx] * acc;
        }
    }
}

/// Per-channel affine y[c,p] = alpha[c] * x[c,p] + beta[c].
pub fn affine_fwd(x: &[f32], c: usize, hw: usize, alpha: &[f32], beta: &[f32], y: &mut [f32]) {
    for ch in 0..c {
        let a = alpha[ch];
        let b = beta[ch];
        for p in 0..hw {
            y[ch * hw + p] = a * x[ch * hw + p] + b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn affine_bwd(
    x: &[f32],
    c: usize,
    hw: usize,
    alpha: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dalpha: &mut [f32],
    dbeta: &mut [f32],
) {
    for ch in 0..c {
        let a = alpha[ch];
        let mut da = 0.0f32;
        let mut db = 0.0f32;
        for p in 0..hw {
            let idx = ch * hw + p;
            dx[idx] = a * dy[idx];
            da += dy[idx] * x[idx];
            db += dy[idx];
        }
        dalpha[ch] += da;
        dbeta[ch] += db;
    }
}
