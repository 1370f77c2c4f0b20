//! Finite-difference gradient check implementations, shared by the
//! dedicated gradcheck suite and the acceptance suite.
//!
//! Ground truth is the independent f64 reference in `common::reference`;
//! central differences use step 1e-3 (with the actually-stored f32 values of
//! the perturbed parameter, so no representation error). The engine gradient
//! of each parameter tensor must match the finite-difference gradient at a
//! relative L2 error below 1e-3.

use super::{reference, rel_l2};
use niclab::model::{CodecConfig, CodecModel};
use niclab::tape::Tape;
use niclab::tensor::Tensor;
use niclab::train::{draw_noises, param_infos, rd_loss_gradients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f32 = 1e-3;
const TOL: f64 = 1e-3;
const INSTANCES: usize = 20;

fn rnd_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Central-difference gradient of `loss` w.r.t. every scalar of every
/// parameter vector, against the engine's per-tensor gradients.
fn check_against_fd(
    params: &[Vec<f32>],
    loss: impl Fn(&[Vec<f32>]) -> f64,
    engine_grads: &[Vec<f32>],
    what: &str,
) {
    for (ti, p) in params.iter().enumerate() {
        let mut fd = vec![0.0f64; p.len()];
        for j in 0..p.len() {
            let mut plus = params.to_vec();
            plus[ti][j] += FD_STEP;
            let mut minus = params.to_vec();
            minus[ti][j] -= FD_STEP;
            let actual_h = plus[ti][j] as f64 - minus[ti][j] as f64;
            fd[j] = (loss(&plus) - loss(&minus)) / actual_h;
        }
        let err = rel_l2(&fd, &engine_grads[ti]);
        assert!(
            err < TOL,
            "{}: tensor {} rel L2 {} exceeds {}",
            what,
            ti,
            err,
            TOL
        );
    }
}

pub fn check_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for inst in 0..INSTANCES {
        let stride = if inst % 2 == 0 { 2 } else { 1 };
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (4 * stride, 2 * stride * rng.gen_range(1..=2));
        let x = rnd_vec(&mut rng, ci * h * w, -1.5, 1.5);
        let wgt = rnd_vec(&mut rng, co * ci * 25, -0.4, 0.4);
        let b = rnd_vec(&mut rng, co, -0.3, 0.3);
        let target = rnd_vec(&mut rng, co * (h / stride) * (w / stride), -1.0, 1.0);
        let params = vec![x, wgt, b];

        let engine = {
            let mut t = Tape::new();
            let xv = t.leaf_from(&[ci, h, w], params[0].clone(), true);
            let wv = t.leaf_from(&[co, ci, 5, 5], params[1].clone(), true);
            let bv = t.leaf_from(&[co], params[2].clone(), true);
            let y = t.conv2d(xv, wv, bv, stride).unwrap();
            let tv = t.leaf_from(&[co, h / stride, w / stride], target.clone(), false);
            let loss = t.mse(y, tv).unwrap();
            let g = t.backward(loss).unwrap();
            vec![
                g.get(xv).unwrap().to_vec(),
                g.get(wv).unwrap().to_vec(),
                g.get(bv).unwrap().to_vec(),
            ]
        };
        let tgt: Vec<f64> = target.iter().map(|v| *v as f64).collect();
        let loss = |p: &[Vec<f32>]| {
            let x64: Vec<f64> = p[0].iter().map(|v| *v as f64).collect();
            let w64: Vec<f64> = p[1].iter().map(|v| *v as f64).collect();
            let b64: Vec<f64> = p[2].iter().map(|v| *v as f64).collect();
            let y = reference::conv2d(&x64, ci, h, w, &w64, co, 5, &b64, stride);
            reference::mse(&y, &tgt)
        };
        check_against_fd(&params, loss, &engine, "conv2d");
    }
}

pub fn check_conv2d_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for inst in 0..INSTANCES {
        let stride = if inst % 2 == 0 { 2 } else { 1 };
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=4));
        let z = rnd_vec(&mut rng, ci * h * w, -1.5, 1.5);
        let wgt = rnd_vec(&mut rng, ci * co * 25, -0.4, 0.4);
        let b = rnd_vec(&mut rng, co, -0.3, 0.3);
        let target = rnd_vec(&mut rng, co * h * stride * w * stride, -1.0, 1.0);
        let params = vec![z, wgt, b];

        let engine = {
            let mut t = Tape::new();
            let zv = t.leaf_from(&[ci, h, w], params[0].clone(), true);
            let wv = t.leaf_from(&[ci, co, 5, 5], params[1].clone(), true);
            let bv = t.leaf_from(&[co], params[2].clone(), true);
            let y = t.conv2d_transpose(zv, wv, bv, stride).unwrap();
            let tv = t.leaf_from(&[co, h * stride, w * stride], target.clone(), false);
            let loss = t.mse(y, tv).unwrap();
            let g = t.backward(loss).unwrap();
            vec![
                g.get(zv).unwrap().to_vec(),
                g.get(wv).unwrap().to_vec(),
                g.get(bv).unwrap().to_vec(),
            ]
        };
        let tgt: Vec<f64> = target.iter().map(|v| *v as f64).collect();
        let loss = |p: &[Vec<f32>]| {
            let z64: Vec<f64> = p[0].iter().map(|v| *v as f64).collect();
            let w64: Vec<f64> = p[1].iter().map(|v| *v as f64).collect();
            let b64: Vec<f64> = p[2].iter().map(|v| *v as f64).collect();
            let y = reference::convt2d(&z64, ci, h, w, &w64, co, 5, &b64, stride);
            reference::mse(&y, &tgt)
        };
        check_against_fd(&params, loss, &engine, "conv2d_transpose");
    }
}

fn gdn_case(seed: u64, inverse: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let c = rng.gen_range(2..=5);
        let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
        let hw = h * w;
        let x = rnd_vec(&mut rng, c * hw, -2.0, 2.0);
        let beta = rnd_vec(&mut rng, c, 0.4, 1.5);
        let gamma = rnd_vec(&mut rng, c * c, 0.01, 0.3);
        let target = rnd_vec(&mut rng, c * hw, -2.0, 2.0);
        let params = vec![x, beta, gamma];

        let engine = {
            let mut t = Tape::new();
            let xv = t.leaf_from(&[c, h, w], params[0].clone(), true);
            let bv = t.leaf_from(&[c], params[1].clone(), true);
            let gv = t.leaf_from(&[c, c], params[2].clone(), true);
            let y = if inverse {
                t.igdn(xv, bv, gv).unwrap()
            } else {
                t.gdn(xv, bv, gv).unwrap()
            };
            let tv = t.leaf_from(&[c, h, w], target.clone(), false);
            let loss = t.mse(y, tv).unwrap();
            let g = t.backward(loss).unwrap();
            vec![
                g.get(xv).unwrap().to_vec(),
                g.get(bv).unwrap().to_vec(),
                g.get(gv).unwrap().to_vec(),
            ]
        };
        let tgt: Vec<f64> = target.iter().map(|v| *v as f64).collect();
        let loss = |p: &[Vec<f32>]| {
            let x64: Vec<f64> = p[0].iter().map(|v| *v as f64).collect();
            let b64: Vec<f64> = p[1].iter().map(|v| *v as f64).collect();
            let g64: Vec<f64> = p[2].iter().map(|v| *v as f64).collect();
            let y = reference::gdn(&x64, c, hw, &b64, &g64, inverse);
            reference::mse(&y, &tgt)
        };
        check_against_fd(&params, loss, &engine, if inverse { "igdn" } else { "gdn" });
    }
}

pub fn check_gdn() {
    gdn_case(103, false);
}

pub fn check_igdn() {
    gdn_case(104, true);
}

pub fn check_channel_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..INSTANCES {
        let c = rng.gen_range(1..=5);
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let x = rnd_vec(&mut rng, c * h * w, -2.0, 2.0);
        let alpha = rnd_vec(&mut rng, c, 0.5, 1.5);
        let beta = rnd_vec(&mut rng, c, -0.5, 0.5);
        let target = rnd_vec(&mut rng, c * h * w, -2.0, 2.0);
        let params = vec![x, alpha, beta];

        let engine = {
            let mut t = Tape::new();
            let xv = t.leaf_from(&[c, h, w], params[0].clone(), true);
            let av = t.leaf_from(&[c], params[1].clone(), true);
            let bv = t.leaf_from(&[c], params[2].clone(), true);
            let y = t.channel_affine(xv, av, bv).unwrap();
            let tv = t.leaf_from(&[c, h, w], target.clone(), false);
            let loss = t.mse(y, tv).unwrap();
            let g = t.backward(loss).unwrap();
            vec![
                g.get(xv).unwrap().to_vec(),
                g.get(av).unwrap().to_vec(),
                g.get(bv).unwrap().to_vec(),
            ]
        };
        let tgt: Vec<f64> = target.iter().map(|v| *v as f64).collect();
        let loss = |p: &[Vec<f32>]| {
            let x64: Vec<f64> = p[0].iter().map(|v| *v as f64).collect();
            let a64: Vec<f64> = p[1].iter().map(|v| *v as f64).collect();
            let b64: Vec<f64> = p[2].iter().map(|v| *v as f64).collect();
            let y = reference::affine(&x64, c, h * w, &a64, &b64);
            reference::mse(&y, &tgt)
        };
        check_against_fd(&params, loss, &engine, "channel_affine");
    }
}

pub fn check_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for inst in 0..INSTANCES {
        let c = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=3));
        let density =
            niclab::entropy::FactorizedDensity::init(c, &niclab::entropy::DEFAULT_WIDTHS, &mut rng)
                .unwrap();
        let z = rnd_vec(&mut rng, c * h * w, -2.5, 2.5);

        // params: z plus each density tensor in layer order
        let mut params = vec![z.clone()];
        for l in &density.layers {
            params.push(l.h_raw.data().to_vec());
            params.push(l.bias.data().to_vec());
            if let Some(g) = &l.gate_raw {
                params.push(g.data().to_vec());
            }
        }

        let engine = {
            let mut t = Tape::new();
            let zv = t.leaf_from(&[c, h, w], z.clone(), true);
            let dvars = density.register(&mut t, true);
            let p = t.likelihood(zv, &dvars).unwrap();
            let rate = t.rate_bits(p);
            let g = t.backward(rate).unwrap();
            let mut out = vec![g.get_or_zeros(zv, z.len())];
            for lv in &dvars {
                out.push(g.get_or_zeros(lv.h_raw, t.data(lv.h_raw).len()));
                out.push(g.get_or_zeros(lv.bias, t.data(lv.bias).len()));
                if let Some(gv) = lv.gate_raw {
                    out.push(g.get_or_zeros(gv, t.data(gv).len()));
                }
            }
            out
        };

        // rebuild a density from a flat parameter list and evaluate the rate
        let widths = density.widths().to_vec();
        let loss = |p: &[Vec<f32>]| {
            let mut d2 = density.clone();
            let mut idx = 1;
            for l in d2.layers.iter_mut() {
                l.h_raw = Tensor::new(l.h_raw.shape(), p[idx].clone()).unwrap();
                idx += 1;
                l.bias = Tensor::new(l.bias.shape(), p[idx].clone()).unwrap();
                idx += 1;
                if let Some(g) = &l.gate_raw {
                    l.gate_raw = Some(Tensor::new(g.shape(), p[idx].clone()).unwrap());
                    idx += 1;
                }
            }
            // f64 reference over the rebuilt density
            let mut model_like = 0.0f64;
            for ch in 0..c {
                let layers: Vec<reference::DensityLayerF64> = d2
                    .layers
                    .iter()
                    .map(|l| {
                        let (out_w, in_w) = (l.h_raw.shape()[1], l.h_raw.shape()[2]);
                        let hoff = ch * out_w * in_w;
                        let boff = ch * out_w;
                        reference::DensityLayerF64 {
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
                    .collect();
                for pix in 0..h * w {
                    let zt = p[0][ch * h * w + pix] as f64;
                    model_like -= reference::mass(&layers, zt, 1e-9).log2();
                }
            }
            let _ = &widths;
            model_like
        };
        check_against_fd(&params, loss, &engine, &format!("likelihood inst {}", inst));
    }
}

pub fn check_full_rd_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for inst in 0..INSTANCES {
        let cfg = CodecConfig {
            shared_filters: rng.gen_range(2..=4),
            custom_filters: 0,
            lambda_index: 1,
            ..CodecConfig::default()
        };
        let mut model = CodecModel::init(cfg, &mut rng).unwrap();
        if inst % 4 == 3 {
            // exercise the channel affines inside the full loss too
            model.insert_affine().unwrap();
        }
        // 1-image batch of a small random patch
        let img = Tensor::new(
            &[3, 16, 16],
            (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..255.0f32)).collect(),
        )
        .unwrap();
        let batch = vec![img];
        let noises = draw_noises(&model, &batch, &mut rng).unwrap();
        let lambda = 0.01;

        let (loss, engine_grads) = rd_loss_gradients(&model, &batch, &noises, lambda).unwrap();
        let j_ref = reference::rd_loss(&model, &batch, &noises, lambda);
        assert!(
            (loss.j - j_ref).abs() <= 1e-4 * j_ref.abs().max(1.0),
            "engine J {} vs reference {}",
            loss.j,
            j_ref
        );

        let infos = param_infos(&model);
        for info in &infos {
            let len = engine_grads[info.index].len();
            let mut fd = vec![0.0f64; len];
            for flat in 0..len {
                let read = |m: &CodecModel| {
                    let mut v = 0.0f32;
                    m.visit_params(&mut |i2, t| {
                        if i2.index == info.index {
                            v = t.data()[flat];
                        }
                    });
                    v
                };
                let perturbed = |delta: f32| {
                    let mut m = model.clone();
                    m.visit_params_mut(&mut |i2, t| {
                        if i2.index == info.index {
                            t.data_mut()[flat] += delta;
                        }
                    });
                    m
                };
                let mp = perturbed(FD_STEP);
                let mm = perturbed(-FD_STEP);
                let actual_h = read(&mp) as f64 - read(&mm) as f64;
                fd[flat] =
                    (reference::rd_loss(&mp, &batch, &noises, lambda)
                        - reference::rd_loss(&mm, &batch, &noises, lambda))
                        / actual_h;
            }
            let err = rel_l2(&fd, &engine_grads[info.index]);
            assert!(
                err < TOL,
                "rd_loss inst {}: {} rel L2 {} exceeds {}",
                inst,
                info.name(),
                err,
                TOL
            );
        }
    }
}
