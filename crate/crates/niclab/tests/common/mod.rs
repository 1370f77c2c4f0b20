//! Shared test support: an independent f64 scalar-loop reference of the
//! forward computations, used as the ground truth for finite-difference
//! gradient checks and for cross-checking the f32 engine. Nothing in here
//! calls the production kernels.

#![allow(dead_code)]

pub mod fd;

use niclab::model::CodecModel;
use niclab::tensor::Tensor;

pub mod reference {
    use super::*;

    fn same_pad(k: usize, s: usize) -> isize {
        ((k - s) / 2) as isize
    }

    /// Quadruple-loop same-padded cross-correlation in f64.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        ci: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        co: usize,
        k: usize,
        bias: &[f64],
        s: usize,
    ) -> Vec<f64> {
        let pad = same_pad(k, s);
        let (oh, ow) = (h / s, w / s);
        let mut y = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let iy = (oy * s + u) as isize - pad;
                                let ix = (ox * s + v) as isize - pad;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[(c * h + iy as usize) * w + ix as usize]
                                        * wgt[((o * ci + c) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    /// Scatter-accumulate transposed convolution in f64 (adjoint of conv2d).
    #[allow(clippy::too_many_arguments)]
    pub fn convt2d(
        z: &[f64],
        ci: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        co: usize,
        k: usize,
        bias: &[f64],
        s: usize,
    ) -> Vec<f64> {
        let pad = same_pad(k, s);
        let (oh, ow) = (h * s, w * s);
        let mut y = vec![0.0; co * oh * ow];
        for c in 0..co {
            for p in 0..oh * ow {
                y[c * oh * ow + p] = bias[c];
            }
        }
        for o in 0..ci {
            for c in 0..co {
                for iy in 0..h {
                    for ix in 0..w {
                        for u in 0..k {
                            for v in 0..k {
                                let i = (iy * s + u) as isize - pad;
                                let j = (ix * s + v) as isize - pad;
                                if i >= 0 && i < oh as isize && j >= 0 && j < ow as isize {
                                    y[(c * oh + i as usize) * ow + j as usize] +=
                                        z[(o * h + iy) * w + ix] * wgt[((o * co + c) * k + u) * k + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn gdn(x: &[f64], c: usize, hw: usize, beta: &[f64], gamma: &[f64], inverse: bool) -> Vec<f64> {
        let mut y = vec![0.0; c * hw];
        for p in 0..hw {
            for i in 0..c {
                let mut d = beta[i];
                for j in 0..c {
                    let v = x[j * hw + p];
                    d += gamma[i * c + j] * v * v;
                }
                let s = d.sqrt();
                y[i * hw + p] = if inverse { x[i * hw + p] * s } else { x[i * hw + p] / s };
            }
        }
        y
    }

    pub fn affine(x: &[f64], c: usize, hw: usize, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                y[ch * hw + p] = alpha[ch] * x[ch * hw + p] + beta[ch];
            }
        }
        y
    }

    fn softplus(v: f64) -> f64 {
        if v > 20.0 {
            v
        } else {
            v.exp().ln_1p()
        }
    }

    fn sigmoid(v: f64) -> f64 {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    }

    /// One density layer in f64 form.
    pub struct DensityLayerF64 {
        /// [out][in] raw weights
        pub h_raw: Vec<Vec<f64>>,
        pub bias: Vec<f64>,
        pub gate_raw: Option<Vec<f64>>,
    }

    /// Extracts channel `ch` of a model density into plain f64 layers.
    pub fn density_channel(model: &CodecModel, entry: usize, ch: usize) -> Vec<DensityLayerF64> {
        model.densities[entry]
            .density
            .layers
            .iter()
            .map(|l| {
                let (out_w, in_w) = (l.h_raw.shape()[1], l.h_raw.shape()[2]);
                let hoff = ch * out_w * in_w;
                let boff = ch * out_w;
                DensityLayerF64 {
                    h_raw: (0..out_w)
                        .map(|j| {
                            (0..in_w)
                                .map(|i| l.h_raw.data()[hoff + j * in_w + i] as f64)
                                .collect()
                        })
                        .collect(),
                    bias: (0..out_w).map(|j| l.bias.data()[boff + j] as f64).collect(),
                    gate_raw: l
                        .gate_raw
                        .as_ref()
                        .map(|g| (0..out_w).map(|j| g.data()[boff + j] as f64).collect()),
                }
            })
            .collect()
    }

    pub fn density_cdf(layers: &[DensityLayerF64], x: f64) -> f64 {
        let mut cur = vec![x];
        let last = layers.len() - 1;
        for (k, l) in layers.iter().enumerate() {
            let out_w = l.bias.len();
            let mut y = vec![0.0; out_w];
            for (j, yj) in y.iter_mut().enumerate() {
                let mut acc = l.bias[j];
                for (i, xi) in cur.iter().enumerate() {
                    acc += softplus(l.h_raw[j][i]) * xi;
                }
                *yj = acc;
            }
            if k == last {
                return sigmoid(y[0]);
            }
            let gates = l.gate_raw.as_ref().unwrap();
            cur = y
                .iter()
                .zip(gates)
                .map(|(yj, a)| yj + a.tanh() * yj.tanh())
                .collect();
        }
        unreachable!()
    }

    pub fn mass(layers: &[DensityLayerF64], v: f64, floor: f64) -> f64 {
        (density_cdf(layers, v + 0.5) - density_cdf(layers, v - 0.5)).max(floor)
    }

    pub fn mse(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().max(1) as f64;
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
    }

    /// Full-model encoder in f64 (reads the f32 parameters exactly).
    /// Returns (latent, channels, h, w).
    pub fn encode_latent(model: &CodecModel, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize, usize) {
        let s = model.config.stride;
        let k = model.config.kernel;
        let mut cur: Vec<f64> = x.iter().map(|v| v / 255.0).collect();
        let (mut ch, mut hh, mut ww) = (3usize, h, w);
        for l in &model.encoder {
            let co = l.weight.shape()[0];
            let wgt: Vec<f64> = l.weight.data().iter().map(|v| *v as f64).collect();
            let bias: Vec<f64> = l.bias.data().iter().map(|v| *v as f64).collect();
            cur = conv2d(&cur, ch, hh, ww, &wgt, co, k, &bias, s);
            (ch, hh, ww) = (co, hh / s, ww / s);
            if let Some(a) = &l.affine {
                let alpha: Vec<f64> = a.alpha.data().iter().map(|v| *v as f64).collect();
                let beta: Vec<f64> = a.beta_aff.data().iter().map(|v| *v as f64).collect();
                cur = affine(&cur, ch, hh * ww, &alpha, &beta);
            }
            if let Some(g) = &l.gdn {
                let beta: Vec<f64> = g.beta.data().iter().map(|v| *v as f64).collect();
                let gamma: Vec<f64> = g.gamma.data().iter().map(|v| *v as f64).collect();
                cur = gdn(&cur, ch, hh * ww, &beta, &gamma, false);
            }
        }
        (cur, ch, hh, ww)
    }

    /// Full-model decoder in f64; returns 0-255-scale reconstruction.
    pub fn decode_latent(model: &CodecModel, z: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let s = model.config.stride;
        let k = model.config.kernel;
        let mut cur = z.to_vec();
        let (mut ch, mut hh, mut ww) = (c, h, w);
        for l in &model.decoder {
            let co = l.weight.shape()[1];
            let wgt: Vec<f64> = l.weight.data().iter().map(|v| *v as f64).collect();
            let bias: Vec<f64> = l.bias.data().iter().map(|v| *v as f64).collect();
            cur = convt2d(&cur, ch, hh, ww, &wgt, co, k, &bias, s);
            (ch, hh, ww) = (co, hh * s, ww * s);
            if let Some(a) = &l.affine {
                let alpha: Vec<f64> = a.alpha.data().iter().map(|v| *v as f64).collect();
                let beta: Vec<f64> = a.beta_aff.data().iter().map(|v| *v as f64).collect();
                cur = affine(&cur, ch, hh * ww, &alpha, &beta);
            }
            if let Some(g) = &l.gdn {
                let beta: Vec<f64> = g.beta.data().iter().map(|v| *v as f64).collect();
                let gamma: Vec<f64> = g.gamma.data().iter().map(|v| *v as f64).collect();
                cur = gdn(&cur, ch, hh * ww, &beta, &gamma, true);
            }
        }
        cur.iter().map(|v| v * 255.0).collect()
    }

    /// Full RD loss in f64 with fixed noise, mirroring the training loss:
    /// J = total bits / total pixels + lambda * mean MSE.
    pub fn rd_loss(model: &CodecModel, batch: &[Tensor], noises: &[Tensor], lambda: f64) -> f64 {
        let entry = model.version as usize - 1;
        let channels: Vec<Vec<DensityLayerF64>> = (0..model.filters(model.version))
            .map(|ch| density_channel(model, entry, ch))
            .collect();
        let mut total_bits = 0.0;
        let mut total_pixels = 0.0;
        let mut total_mse = 0.0;
        for (img, noise) in batch.iter().zip(noises) {
            let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let x: Vec<f64> = img.data().iter().map(|v| *v as f64).collect();
            let (z, zc, zh, zw) = encode_latent(model, &x, h, w);
            let z_tilde: Vec<f64> = z
                .iter()
                .zip(noise.data())
                .map(|(zv, nv)| zv + *nv as f64)
                .collect();
            for ch in 0..zc {
                for p in 0..zh * zw {
                    let m = mass(&channels[ch], z_tilde[ch * zh * zw + p], 1e-9);
                    total_bits -= m.log2();
                }
            }
            let xh = decode_latent(model, &z_tilde, zc, zh, zw);
            total_mse += mse(&xh, &x);
            total_pixels += (h * w) as f64;
        }
        total_bits / total_pixels + lambda * total_mse / batch.len() as f64
    }
}

/// Relative L2 error between a finite-difference gradient and the engine's.
pub fn rel_l2(fd: &[f64], engine: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (a, b) in fd.iter().zip(engine.iter().map(|v| *v as f64)) {
        num += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    num.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}
