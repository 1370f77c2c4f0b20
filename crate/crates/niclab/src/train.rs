//! Rate-distortion training and the domain-adaptation strategies.
//!
//! The loss is J = R + lambda * D: R in bits per pixel estimated from the
//! entropy model on noisy latents (the differentiable stand-in for
//! rounding), D the mean squared error in 0-255 intensity units. Runs are
//! seeded and deterministic: batch crops are drawn first, then per-image
//! noise, in a fixed order, and gradient accumulation order never varies.
//!
//! Strategies:
//! * `scratch` / `joint` train a fresh model (joint alternates batch slots
//!   between two domains);
//! * `naive_ft` continues training every parameter on the target domain;
//! * `selective_ft` freezes the convolutions and tunes only GDN/IGDN, the
//!   entropy model, and freshly inserted per-channel affines;
//! * `cawf` grows the model with custom filters and a second entropy model
//!   and trains only those, leaving every shared scalar bitwise untouched.

use crate::error::{Error, Result};
use crate::model::{
    CodecConfig, CodecModel, LayerParam, ParamAddr, ParamInfo, SharedSpan, GDN_BETA_MIN,
};
use crate::pipeline::{add_uniform_noise, image_to_tensor};
use crate::tape::{DensityLayerVars, Tape, Var};
use crate::tensor::Tensor;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

/// The four reference rate-distortion tradeoffs.
pub const LAMBDA_GRID: [f64; 4] = [0.002, 0.008, 0.016, 0.032];

/// Grid index of `lambda`, if it is one of [`LAMBDA_GRID`].
pub fn lambda_index_of(lambda: f64) -> Option<u8> {
    LAMBDA_GRID.iter().position(|l| *l == lambda).map(|i| i as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Scratch,
    NaiveFt,
    SelectiveFt,
    Cawf,
    Joint,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "naive" | "naive_ft" => Ok(Self::NaiveFt),
            "selective" | "selective_ft" => Ok(Self::SelectiveFt),
            "cawf" => Ok(Self::Cawf),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Contract(format!("unknown strategy '{}'", other))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Scratch => "scratch",
            Self::NaiveFt => "naive_ft",
            Self::SelectiveFt => "selective_ft",
            Self::Cawf => "cawf",
            Self::Joint => "joint",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: LAMBDA_GRID[1],
            steps: 2000,
            batch: 2,
            patch: 48,
            lr: 1e-4,
            seed: 0,
            strategy: Strategy::Scratch,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    /// Validates the run parameters. Off-grid lambdas are allowed; the
    /// caller is expected to surface [`lambda_in_grid`](Self::lambda_in_grid)
    /// as a warning.
    pub fn validate(&self, downsampling: usize) -> Result<()> {
        if self.lambda <= 0.0 || !self.lambda.is_finite() {
            return Err(Error::Contract("lambda must be positive".into()));
        }
        if self.steps == 0 || self.batch == 0 || self.log_interval == 0 {
            return Err(Error::Contract("steps, batch and log_interval must be >= 1".into()));
        }
        if self.patch == 0 || self.patch % downsampling != 0 {
            return Err(Error::Contract(format!(
                "patch must be a positive multiple of {}",
                downsampling
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Contract("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_in_grid(&self) -> bool {
        lambda_index_of(self.lambda).is_some()
    }
}

/// Per-tensor trainability. `CustomOnly` trains exactly the scalars outside
/// the shared span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorMask {
    Frozen,
    Trainable,
    CustomOnly,
}

#[derive(Debug, Clone)]
pub struct FreezeMask {
    masks: Vec<TensorMask>,
}

impl FreezeMask {
    pub fn all_trainable(model: &CodecModel) -> Self {
        Self { masks: vec![TensorMask::Trainable; param_infos(model).len()] }
    }

    /// Trainable: GDN/IGDN parameters, the entropy model, channel affines.
    /// Frozen: all convolution weights and biases.
    pub fn selective(model: &CodecModel) -> Self {
        let masks = param_infos(model)
            .iter()
            .map(|info| match info.addr {
                ParamAddr::Enc { kind, .. } | ParamAddr::Dec { kind, .. } => match kind {
                    LayerParam::Weight | LayerParam::Bias => TensorMask::Frozen,
                    _ => TensorMask::Trainable,
                },
                ParamAddr::Density { .. } => TensorMask::Trainable,
            })
            .collect();
        Self { masks }
    }

    /// Trainable: exactly the custom-tagged scalars (plus the new entropy
    /// model, which is all custom). Every shared scalar stays frozen.
    pub fn cawf(model: &CodecModel) -> Self {
        let masks = param_infos(model)
            .iter()
            .map(|info| match info.span {
                SharedSpan::All => TensorMask::Frozen,
                SharedSpan::None => TensorMask::Trainable,
                SharedSpan::Block { .. } => TensorMask::CustomOnly,
            })
            .collect();
        Self { masks }
    }

    pub fn tensor_mask(&self, index: usize) -> TensorMask {
        self.masks[index]
    }

    /// Does any scalar of tensor `index` train?
    pub fn any_trainable(&self, index: usize) -> bool {
        self.masks[index] != TensorMask::Frozen
    }

    pub fn is_trainable(&self, info: &ParamInfo, flat: usize) -> bool {
        match self.masks[info.index] {
            TensorMask::Frozen => false,
            TensorMask::Trainable => true,
            TensorMask::CustomOnly => !info.span.is_shared(flat),
        }
    }
}

/// Canonical-order parameter metadata.
pub fn param_infos(model: &CodecModel) -> Vec<ParamInfo> {
    let mut infos = Vec::new();
    model.visit_params(&mut |info, _| infos.push(info));
    infos
}

/// Trainable-scalar count / total-scalar count under `mask`.
pub fn trainable_fraction(model: &CodecModel, mask: &FreezeMask) -> f64 {
    let mut trainable = 0usize;
    let mut total = 0usize;
    model.visit_params(&mut |info, t| {
        total += t.len();
        trainable += match mask.tensor_mask(info.index) {
            TensorMask::Frozen => 0,
            TensorMask::Trainable => t.len(),
            TensorMask::CustomOnly => t.len() - info.span.count_shared(t.len()),
        };
    });
    trainable as f64 / total as f64
}

/// One scalar Adam update; state and parameter are f32, math in f64.
/// Returns (p, m, v) after the step. `t` is the 1-based step count.
pub fn adam_update(p: f32, g: f32, m: f32, v: f32, t: u64, lr: f64) -> (f32, f32, f32) {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let g = g as f64;
    let m = BETA1 * m as f64 + (1.0 - BETA1) * g;
    let v = BETA2 * v as f64 + (1.0 - BETA2) * g * g;
    let m_hat = m / (1.0 - BETA1.powi(t as i32));
    let v_hat = v / (1.0 - BETA2.powi(t as i32));
    let p = p as f64 - lr * m_hat / (v_hat.sqrt() + EPS);
    (p as f32, m as f32, v as f32)
}

/// Adam optimizer state over the trainable tensors of one model.
pub struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &CodecModel, mask: &FreezeMask, lr: f64) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |info, t| {
            m.push(if mask.any_trainable(info.index) { vec![0.0f32; t.len()] } else { Vec::new() });
        });
        let v = m.clone();
        Self { lr, t: 0, m, v }
    }

    /// Applies one step. Frozen scalars are never written; trainable GDN
    /// parameters are projected back into their constraint set afterwards.
    pub fn step(
        &mut self,
        model: &mut CodecModel,
        mask: &FreezeMask,
        grads: &[Option<Vec<f32>>],
    ) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let lr = self.lr;
        let m_state = &mut self.m;
        let v_state = &mut self.v;
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |info, tensor| {
            if failure.is_some() || !mask.any_trainable(info.index) {
                return;
            }
            let Some(g) = grads[info.index].as_ref() else { return };
            let is_gdn = matches!(
                info.addr,
                ParamAddr::Enc { kind: LayerParam::GdnBeta | LayerParam::GdnGamma, .. }
                    | ParamAddr::Dec { kind: LayerParam::GdnBeta | LayerParam::GdnGamma, .. }
            );
            let is_beta = matches!(
                info.addr,
                ParamAddr::Enc { kind: LayerParam::GdnBeta, .. }
                    | ParamAddr::Dec { kind: LayerParam::GdnBeta, .. }
            );
            let data = tensor.data_mut();
            let ms = &mut m_state[info.index];
            let vs = &mut v_state[info.index];
            for i in 0..data.len() {
                if !mask.is_trainable(&info, i) {
                    continue;
                }
                if !g[i].is_finite() {
                    failure = Some(Error::Numeric(format!(
                        "non-finite gradient in {} at flat index {}",
                        info.name(),
                        i
                    )));
                    return;
                }
                let (p, m, v) = adam_update(data[i], g[i], ms[i], vs[i], t, lr);
                ms[i] = m;
                vs[i] = v;
                data[i] = if is_gdn {
                    let floor = if is_beta { GDN_BETA_MIN } else { 0.0 };
                    p.max(floor)
                } else {
                    p
                };
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// On-tape handles for the model parameters, canonical order plus a
/// structured view for walking the layers.
pub struct ModelVars {
    pub by_index: Vec<Var>,
    enc: Vec<LayerVars>,
    dec: Vec<LayerVars>,
    densities: Vec<Vec<DensityLayerVars>>,
}

struct LayerVars {
    weight: Var,
    bias: Var,
    affine: Option<(Var, Var)>,
    gdn: Option<(Var, Var)>,
}

/// Registers every parameter as a tape leaf; `mask` decides which leaves
/// require gradients.
pub fn register_model(tape: &mut Tape, model: &CodecModel, mask: &FreezeMask) -> ModelVars {
    let mut by_index = Vec::new();
    let mut flat: Vec<(ParamAddr, Var)> = Vec::new();
    model.visit_params(&mut |info, t| {
        let var = tape.leaf_from(t.shape(), t.data().to_vec(), mask.any_trainable(info.index));
        by_index.push(var);
        flat.push((info.addr, var));
    });
    let find = |addr: ParamAddr| flat.iter().find(|(a, _)| *a == addr).map(|(_, v)| *v);
    let layer_vars = |enc: bool, li: usize, l: &crate::model::ConvLayer| {
        let mk = |kind| if enc { ParamAddr::Enc { layer: li, kind } } else { ParamAddr::Dec { layer: li, kind } };
        LayerVars {
            weight: find(mk(LayerParam::Weight)).unwrap(),
            bias: find(mk(LayerParam::Bias)).unwrap(),
            affine: l.affine.as_ref().map(|_| {
                (
                    find(mk(LayerParam::AffineAlpha)).unwrap(),
                    find(mk(LayerParam::AffineBeta)).unwrap(),
                )
            }),
            gdn: l.gdn.as_ref().map(|_| {
                (
                    find(mk(LayerParam::GdnBeta)).unwrap(),
                    find(mk(LayerParam::GdnGamma)).unwrap(),
                )
            }),
        }
    };
    let enc = model.encoder.iter().enumerate().map(|(i, l)| layer_vars(true, i, l)).collect();
    let dec = model.decoder.iter().enumerate().map(|(i, l)| layer_vars(false, i, l)).collect();
    let densities = model
        .densities
        .iter()
        .enumerate()
        .map(|(di, d)| {
            d.density
                .layers
                .iter()
                .enumerate()
                .map(|(li, l)| DensityLayerVars {
                    h_raw: find(ParamAddr::Density {
                        entry: di,
                        layer: li,
                        kind: crate::model::DensityParam::Weights,
                    })
                    .unwrap(),
                    bias: find(ParamAddr::Density {
                        entry: di,
                        layer: li,
                        kind: crate::model::DensityParam::Bias,
                    })
                    .unwrap(),
                    gate_raw: l.gate_raw.as_ref().map(|_| {
                        find(ParamAddr::Density {
                            entry: di,
                            layer: li,
                            kind: crate::model::DensityParam::Gate,
                        })
                        .unwrap()
                    }),
                })
                .collect()
        })
        .collect();
    ModelVars { by_index, enc, dec, densities }
}

/// Differentiable encoder: scale to unit intensities, then conv / affine /
/// GDN per layer. Mirrors `CodecModel::encode_latent`.
pub fn encode_on_tape(tape: &mut Tape, model: &CodecModel, vars: &ModelVars, x: Var) -> Result<Var> {
    let s = model.config.stride;
    let mut cur = tape.scale(x, 1.0 / 255.0);
    for lv in &vars.enc {
        cur = tape.conv2d(cur, lv.weight, lv.bias, s)?;
        if let Some((a, b)) = lv.affine {
            cur = tape.channel_affine(cur, a, b)?;
        }
        if let Some((beta, gamma)) = lv.gdn {
            cur = tape.gdn(cur, beta, gamma)?;
        }
    }
    Ok(cur)
}

/// Differentiable decoder; mirrors `CodecModel::decode_latent` (without the
/// inference-only sanitization — training wants loud failures).
pub fn decode_on_tape(tape: &mut Tape, model: &CodecModel, vars: &ModelVars, z: Var) -> Result<Var> {
    let s = model.config.stride;
    let mut cur = z;
    for lv in &vars.dec {
        cur = tape.conv2d_transpose(cur, lv.weight, lv.bias, s)?;
        if let Some((a, b)) = lv.affine {
            cur = tape.channel_affine(cur, a, b)?;
        }
        if let Some((beta, gamma)) = lv.gdn {
            cur = tape.igdn(cur, beta, gamma)?;
        }
    }
    Ok(tape.scale(cur, 255.0))
}

/// Scalar outcome of one rate-distortion evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RdLoss {
    pub j: f64,
    /// bits per pixel
    pub r: f64,
    /// MSE in 0-255 intensity units
    pub d: f64,
}

struct LossVars {
    j: Var,
    r: f64,
    d: f64,
}

/// Builds the full RD loss for a batch on an existing tape. `noises` must
/// hold one latent-shaped tensor per batch image.
fn rd_loss_on_tape(
    tape: &mut Tape,
    model: &CodecModel,
    vars: &ModelVars,
    batch: &[Tensor],
    noises: &[Tensor],
    lambda: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Contract("rd_loss: empty batch".into()));
    }
    if batch.len() != noises.len() {
        return Err(Error::Contract("rd_loss: one noise tensor per image required".into()));
    }
    let density_vars = &vars.densities[model.version as usize - 1];
    let mut rates = Vec::with_capacity(batch.len());
    let mut dists = Vec::with_capacity(batch.len());
    let mut pixels = 0usize;
    for (img, noise) in batch.iter().zip(noises) {
        let (_, h, w) = img.dims3()?;
        pixels += h * w;
        let x = tape.leaf(img);
        let z = encode_on_tape(tape, model, vars, x)?;
        if tape.shape(z) != noise.shape() {
            return Err(Error::Contract(format!(
                "noise shape {:?} does not match latent {:?}",
                noise.shape(),
                tape.shape(z)
            )));
        }
        let u = tape.leaf(noise);
        let z_tilde = tape.add(z, u)?;
        let p = tape.likelihood(z_tilde, density_vars)?;
        rates.push(tape.rate_bits(p));
        let xh = decode_on_tape(tape, model, vars, z_tilde)?;
        dists.push(tape.mse(xh, x)?);
    }
    let b = batch.len() as f64;
    // R: total bits / total pixels (batch images share the patch size)
    let r_terms: Vec<(Var, f64)> = rates.iter().map(|v| (*v, 1.0 / pixels as f64)).collect();
    let r = tape.scalar_combine(&r_terms)?;
    let d_terms: Vec<(Var, f64)> = dists.iter().map(|v| (*v, 1.0 / b)).collect();
    let d = tape.scalar_combine(&d_terms)?;
    let j = tape.scalar_combine(&[(r, 1.0), (d, lambda)])?;
    Ok(LossVars { j, r: tape.scalar(r), d: tape.scalar(d) })
}

/// J, R, D for a batch with freshly drawn quantization noise.
pub fn rd_loss(
    model: &CodecModel,
    batch: &[Tensor],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<RdLoss> {
    let noises = draw_noises(model, batch, rng)?;
    rd_loss_with_noise(model, batch, &noises, lambda)
}

/// Deterministic variant taking pre-drawn noise (what the optimizer and the
/// finite-difference checks use).
pub fn rd_loss_with_noise(
    model: &CodecModel,
    batch: &[Tensor],
    noises: &[Tensor],
    lambda: f64,
) -> Result<RdLoss> {
    let mut tape = Tape::new();
    let mask = FreezeMask::all_trainable(model);
    let vars = register_model(&mut tape, model, &mask);
    let loss = rd_loss_on_tape(&mut tape, model, &vars, batch, noises, lambda)?;
    Ok(RdLoss { j: tape.scalar(loss.j), r: loss.r, d: loss.d })
}

/// RD loss plus the gradient of J for every parameter tensor, in canonical
/// order (zeros where J does not depend on a tensor).
pub fn rd_loss_gradients(
    model: &CodecModel,
    batch: &[Tensor],
    noises: &[Tensor],
    lambda: f64,
) -> Result<(RdLoss, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let mask = FreezeMask::all_trainable(model);
    let vars = register_model(&mut tape, model, &mask);
    let loss = rd_loss_on_tape(&mut tape, model, &vars, batch, noises, lambda)?;
    let grads = tape.backward(loss.j)?;
    let out = vars
        .by_index
        .iter()
        .map(|v| grads.get_or_zeros(*v, tape.data(*v).len()))
        .collect();
    Ok((RdLoss { j: tape.scalar(loss.j), r: loss.r, d: loss.d }, out))
}

/// Zero-mean uniform noise tensors matching each image's latent shape.
pub fn draw_noises(model: &CodecModel, batch: &[Tensor], rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    let ds = model.config.downsampling();
    let f = model.filters(model.version);
    batch
        .iter()
        .map(|img| {
            let (_, h, w) = img.dims3()?;
            Ok(add_uniform_noise(&Tensor::zeros(&[f, h / ds, w / ds]), rng))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub j: f64,
    pub r: f64,
    pub d: f64,
}

/// Writes a loss trace as CSV (`step,j,r,d`).
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut s = String::from("step,j,r,d\n");
    for row in trace {
        s.push_str(&format!("{},{},{},{}\n", row.step, row.j, row.r, row.d));
    }
    std::fs::write(path, s)?;
    Ok(())
}


fn crop_tensor(img: &RgbImage, x0: u32, y0: u32, size: u32) -> Tensor {
    let view = image::imageops::crop_imm(img, x0, y0, size, size).to_image();
    image_to_tensor(&view)
}

fn sample_batch(
    images: &[RgbImage],
    secondary: Option<&[RgbImage]>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    let mut batch = Vec::with_capacity(cfg.batch);
    for slot in 0..cfg.batch {
        let pool = match secondary {
            Some(sec) if slot % 2 == 1 => sec,
            _ => images,
        };
        if pool.is_empty() {
            return Err(Error::Contract("training needs at least one image".into()));
        }
        let img = &pool[rng.gen_range(0..pool.len())];
        let p = cfg.patch as u32;
        if img.width() < p || img.height() < p {
            return Err(Error::Contract(format!(
                "patch {} larger than image {}x{}",
                p,
                img.width(),
                img.height()
            )));
        }
        let x0 = rng.gen_range(0..=img.width() - p);
        let y0 = rng.gen_range(0..=img.height() - p);
        batch.push(crop_tensor(img, x0, y0, p));
    }
    Ok(batch)
}

/// The optimization loop shared by all strategies. Appends one trace row per
/// `log_interval` steps holding the mean J/R/D over that interval (so a
/// partial trace survives divergence).
pub fn run_training(
    model: &mut CodecModel,
    mask: &FreezeMask,
    images: &[RgbImage],
    secondary: Option<&[RgbImage]>,
    cfg: &TrainConfig,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    cfg.validate(model.config.downsampling())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, mask, cfg.lr);
    let mut acc = (0.0f64, 0.0f64, 0.0f64);
    for step in 1..=cfg.steps {
        let batch = sample_batch(images, secondary, cfg, &mut rng)?;
        let noises = draw_noises(model, &batch, &mut rng)?;
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, model, mask);
        let loss = rd_loss_on_tape(&mut tape, model, &vars, &batch, &noises, cfg.lambda)
            .map_err(|e| Error::Numeric(format!("step {}: {}", step, e)))?;
        let j = tape.scalar(loss.j);
        if !j.is_finite() {
            return Err(Error::Numeric(format!("step {}: loss diverged (J = {})", step, j)));
        }
        let grads = tape.backward(loss.j)?;
        let by_index: Vec<Option<Vec<f32>>> = vars
            .by_index
            .iter()
            .map(|v| grads.get(*v).map(|g| g.to_vec()))
            .collect();
        adam.step(model, mask, &by_index)
            .map_err(|e| Error::Numeric(format!("step {}: {}", step, e)))?;
        acc = (acc.0 + j, acc.1 + loss.r, acc.2 + loss.d);
        if step % cfg.log_interval == 0 {
            let n = cfg.log_interval as f64;
            trace.push(TraceRow { step, j: acc.0 / n, r: acc.1 / n, d: acc.2 / n });
            acc = (0.0, 0.0, 0.0);
        }
    }
    Ok(())
}

/// Trains a fresh model (`scratch`), or a fresh model on a 50/50 mixture of
/// two domains (`joint`). Freezes coding tables at the end. `trace` receives
/// logged rows as training progresses, so a partial trace survives abort.
pub fn train(
    codec: CodecConfig,
    cfg: &TrainConfig,
    images: &[RgbImage],
    secondary: Option<&[RgbImage]>,
    trace: &mut Vec<TraceRow>,
) -> Result<CodecModel> {
    match cfg.strategy {
        Strategy::Scratch | Strategy::Joint => {}
        s => {
            return Err(Error::Contract(format!(
                "train handles scratch/joint; use adapt for {}",
                s
            )))
        }
    }
    if cfg.strategy == Strategy::Joint && secondary.is_none() {
        return Err(Error::Contract("joint training needs a second domain".into()));
    }
    let mut codec = codec;
    if let Some(i) = lambda_index_of(cfg.lambda) {
        codec.lambda_index = i;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e69_636c_6162); // model-init stream
    let mut model = CodecModel::init(codec, &mut rng)?;
    let mask = FreezeMask::all_trainable(&model);
    let sec = if cfg.strategy == Strategy::Joint { secondary } else { None };
    run_training(&mut model, &mask, images, sec, cfg, trace)?;
    model.build_tables(1)?;
    Ok(model)
}

/// Adapts a source model to a target domain with the configured strategy.
pub fn adapt(
    source: &CodecModel,
    cfg: &TrainConfig,
    target: &[RgbImage],
    trace: &mut Vec<TraceRow>,
) -> Result<CodecModel> {
    match cfg.strategy {
        Strategy::NaiveFt => {
            let mut model = source.clone();
            let mask = FreezeMask::all_trainable(&model);
            run_training(&mut model, &mask, target, None, cfg, trace)?;
            model.build_tables(1)?;
            Ok(model)
        }
        Strategy::SelectiveFt => {
            let mut model = source.clone();
            model.insert_affine()?;
            let mask = FreezeMask::selective(&model);
            run_training(&mut model, &mask, target, None, cfg, trace)?;
            model.build_tables(1)?;
            Ok(model)
        }
        Strategy::Cawf => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6361_7766); // growth stream
            let mut model = source.grow_cawf(&mut rng)?;
            let mask = FreezeMask::cawf(&model);
            run_training(&mut model, &mask, target, None, cfg, trace)?;
            // only the custom entropy model is (re)frozen; the embedded
            // version-1 tables stay bitwise identical to the parent's
            model.build_tables(2)?;
            Ok(model)
        }
        s => Err(Error::Contract(format!("adapt handles naive_ft/selective_ft/cawf, got {}", s))),
    }
}
