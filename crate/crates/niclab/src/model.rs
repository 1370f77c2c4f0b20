//! The codec model: GDN autoencoder geometry, the shared/custom parameter
//! partition for adaptation without forgetting, and version routing.
//!
//! A version-1 model is a plain factorized-prior codec. `grow_cawf` turns it
//! into a version-2 model by widening every convolution with fresh custom
//! output filters while embedding the parent's weights as a frozen shared
//! block, and by adding a second, independent entropy model. The shared
//! slice can be extracted back out bitwise with `slice_v1`, which is also
//! how version-1 routing is implemented, so a version-2 model reproduces its
//! parent's bitstreams and reconstructions exactly.

use crate::digest::Fnv1a;
use crate::entropy::{freeze_tables, FactorizedDensity, PmfTable, DEFAULT_TAIL_MASS, DEFAULT_WIDTHS};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use rand::Rng;

/// Geometry and metadata of a codec model.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub shared_filters: usize,
    pub custom_filters: usize,
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub lambda_index: u8,
    pub density_widths: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            shared_filters: 64,
            custom_filters: 16,
            layers: 4,
            kernel: 5,
            stride: 2,
            lambda_index: 1,
            density_widths: DEFAULT_WIDTHS.to_vec(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_filters < 1 {
            return Err(Error::Contract("shared_filters must be >= 1".into()));
        }
        if self.layers != 4 {
            return Err(Error::Contract("reference geometry uses 4 layers".into()));
        }
        if self.kernel < self.stride || self.stride < 1 {
            return Err(Error::Contract("kernel must be >= stride >= 1".into()));
        }
        Ok(())
    }

    /// Spatial downsampling factor of the encoder (stride^layers).
    pub fn downsampling(&self) -> usize {
        self.stride.pow(self.layers as u32)
    }
}

/// GDN / IGDN parameters. Invariants (beta >= 1e-6, gamma >= 0) are
/// maintained by projection after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnParams {
    pub beta: Tensor,
    pub gamma: Tensor,
}

pub const GDN_BETA_MIN: f32 = 1e-6;

impl GdnParams {
    /// beta = 1, gamma = 0.1 * I.
    pub fn identity_init(channels: usize) -> Self {
        let beta = Tensor::full(&[channels], 1.0);
        let mut g = vec![0.0f32; channels * channels];
        for i in 0..channels {
            g[i * channels + i] = 0.1;
        }
        Self {
            beta,
            gamma: Tensor::new(&[channels, channels], g).unwrap(),
        }
    }
}

/// Per-channel scale/bias pair used by selective fine-tuning; starts as the
/// identity so inserting it does not change the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub alpha: Tensor,
    pub beta_aff: Tensor,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        Self {
            alpha: Tensor::full(&[channels], 1.0),
            beta_aff: Tensor::zeros(&[channels]),
        }
    }
}

/// One autoencoder stage: convolution (or transposed convolution on the
/// decoder side), optional channel affine, optional (I)GDN.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// Encoder: [C_out, C_in, k, k]. Decoder: [C_in, C_out, k, k].
    pub weight: Tensor,
    pub bias: Tensor,
    pub affine: Option<ChannelAffine>,
    pub gdn: Option<GdnParams>,
}

/// A learned density plus (after freezing) its integer coding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEntry {
    pub density: FactorizedDensity,
    pub tables: Option<PmfTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub config: CodecConfig,
    /// 1 = source-only, 2 = grown with custom parameters.
    pub version: u8,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
    /// `densities[0]` serves version 1; `densities[1]` (if present) version 2.
    pub densities: Vec<DensityEntry>,
}

/// Which scalars of a parameter tensor belong to the frozen shared slice.
///
/// `Block` marks the leading `shared0 x shared1` sub-block of the first two
/// dimensions (trailing dims always fully included), which covers every
/// partitioned tensor this architecture produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharedSpan {
    All,
    None,
    Block { d1: usize, inner: usize, shared0: usize, shared1: usize },
}

impl SharedSpan {
    pub fn is_shared(&self, flat: usize) -> bool {
        match *self {
            SharedSpan::All => true,
            SharedSpan::None => false,
            SharedSpan::Block { d1, inner, shared0, shared1 } => {
                let i0 = flat / (d1 * inner);
                let i1 = (flat / inner) % d1;
                i0 < shared0 && i1 < shared1
            }
        }
    }

    /// Visits shared flat indices in ascending order.
    pub fn for_each_shared(&self, len: usize, mut f: impl FnMut(usize)) {
        match *self {
            SharedSpan::All => (0..len).for_each(f),
            SharedSpan::None => {}
            SharedSpan::Block { d1, inner, shared0, shared1 } => {
                for i0 in 0..shared0 {
                    for i1 in 0..shared1 {
                        let base = (i0 * d1 + i1) * inner;
                        for r in 0..inner {
                            f(base + r);
                        }
                    }
                }
            }
        }
    }

    pub fn count_shared(&self, len: usize) -> usize {
        match *self {
            SharedSpan::All => len,
            SharedSpan::None => 0,
            SharedSpan::Block { inner, shared0, shared1, .. } => shared0 * shared1 * inner,
        }
    }
}

/// Model part a parameter belongs to, for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParam {
    Weight,
    Bias,
    AffineAlpha,
    AffineBeta,
    GdnBeta,
    GdnGamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityParam {
    Weights,
    Bias,
    Gate,
}

/// Structural address of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamAddr {
    Enc { layer: usize, kind: LayerParam },
    Dec { layer: usize, kind: LayerParam },
    Density { entry: usize, layer: usize, kind: DensityParam },
}

#[derive(Debug, Clone, Copy)]
pub struct ParamInfo {
    /// Position in the canonical enumeration order.
    pub index: usize,
    pub addr: ParamAddr,
    pub part: Part,
    pub span: SharedSpan,
}

impl ParamInfo {
    pub fn name(&self) -> String {
        match self.addr {
            ParamAddr::Enc { layer, kind } => format!("enc{}.{:?}", layer + 1, kind),
            ParamAddr::Dec { layer, kind } => format!("dec{}.{:?}", layer + 1, kind),
            ParamAddr::Density { entry, layer, kind } => {
                format!("density{}.l{}.{:?}", entry + 1, layer + 1, kind)
            }
        }
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f32 {
    loop {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if n.abs() <= 2.0 {
            return (n * std) as f32;
        }
    }
}

fn fresh_conv_weight(shape: &[usize], fan_in: usize, kernel: usize, rng: &mut impl Rng) -> Tensor {
    let std = (1.0 / (kernel * kernel * fan_in) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| truncated_normal(rng, std)).collect();
    Tensor::new(shape, data).unwrap()
}

impl CodecModel {
    /// Fresh version-1 model with `config.shared_filters` filters.
    pub fn init(config: CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let f = config.shared_filters;
        let k = config.kernel;
        let nl = config.layers;
        let mut encoder = Vec::with_capacity(nl);
        for i in 0..nl {
            let cin = if i == 0 { 3 } else { f };
            encoder.push(ConvLayer {
                weight: fresh_conv_weight(&[f, cin, k, k], cin, k, rng),
                bias: Tensor::zeros(&[f]),
                affine: None,
                gdn: (i + 1 < nl).then(|| GdnParams::identity_init(f)),
            });
        }
        let mut decoder = Vec::with_capacity(nl);
        for i in 0..nl {
            let cout = if i + 1 == nl { 3 } else { f };
            decoder.push(ConvLayer {
                weight: fresh_conv_weight(&[f, cout, k, k], f, k, rng),
                bias: Tensor::zeros(&[cout]),
                affine: None,
                gdn: (i + 1 < nl).then(|| GdnParams::identity_init(f)),
            });
        }
        let density = FactorizedDensity::init(f, &config.density_widths, rng)?;
        Ok(Self {
            config,
            version: 1,
            encoder,
            decoder,
            densities: vec![DensityEntry { density, tables: None }],
        })
    }

    /// Total filters of the given version's layers.
    pub fn filters(&self, version: u8) -> usize {
        match version {
            1 => self.config.shared_filters,
            _ => self.config.shared_filters + self.config.custom_filters,
        }
    }

    pub fn density_entry(&self, version: u8) -> Result<&DensityEntry> {
        self.densities
            .get(version as usize - 1)
            .ok_or_else(|| Error::Version(format!("model has no entropy model for version {}", version)))
    }

    /// Coding tables for `version`; errors if not frozen yet.
    pub fn tables(&self, version: u8) -> Result<&PmfTable> {
        self.density_entry(version)?
            .tables
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("no frozen tables for version {}", version)))
    }

    /// Freezes coding tables for `version` from its current density.
    pub fn build_tables(&mut self, version: u8) -> Result<()> {
        let idx = version as usize - 1;
        let entry = self
            .densities
            .get_mut(idx)
            .ok_or_else(|| Error::Version(format!("no entropy model for version {}", version)))?;
        entry.tables = Some(freeze_tables(&entry.density, DEFAULT_TAIL_MASS)?);
        Ok(())
    }

    fn check_version(&self, use_version: u8) -> Result<()> {
        if use_version < 1 || use_version > self.version {
            return Err(Error::Version(format!(
                "requested version {} from a version-{} model",
                use_version, self.version
            )));
        }
        Ok(())
    }

    /// Visits every parameter tensor in canonical order. This order defines
    /// the model file layout, the hash input, and optimizer state slots.
    pub fn visit_params(&self, f: &mut dyn FnMut(ParamInfo, &Tensor)) {
        let mut index = 0;
        let spans = self.spans();
        let mut emit = |addr: ParamAddr, t: &Tensor, f: &mut dyn FnMut(ParamInfo, &Tensor)| {
            let part = match addr {
                ParamAddr::Enc { .. } => Part::Encoder,
                ParamAddr::Dec { .. } => Part::Decoder,
                ParamAddr::Density { .. } => Part::Entropy,
            };
            f(
                ParamInfo { index, addr, part, span: spans[index] },
                t,
            );
            index += 1;
        };
        for (li, l) in self.encoder.iter().enumerate() {
            emit(ParamAddr::Enc { layer: li, kind: LayerParam::Weight }, &l.weight, f);
            emit(ParamAddr::Enc { layer: li, kind: LayerParam::Bias }, &l.bias, f);
            if let Some(a) = &l.affine {
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::AffineAlpha }, &a.alpha, f);
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::AffineBeta }, &a.beta_aff, f);
            }
            if let Some(g) = &l.gdn {
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::GdnBeta }, &g.beta, f);
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::GdnGamma }, &g.gamma, f);
            }
        }
        for (li, l) in self.decoder.iter().enumerate() {
            emit(ParamAddr::Dec { layer: li, kind: LayerParam::Weight }, &l.weight, f);
            emit(ParamAddr::Dec { layer: li, kind: LayerParam::Bias }, &l.bias, f);
            if let Some(a) = &l.affine {
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::AffineAlpha }, &a.alpha, f);
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::AffineBeta }, &a.beta_aff, f);
            }
            if let Some(g) = &l.gdn {
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::GdnBeta }, &g.beta, f);
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::GdnGamma }, &g.gamma, f);
            }
        }
        for (di, d) in self.densities.iter().enumerate() {
            for (li, l) in d.density.layers.iter().enumerate() {
                emit(
                    ParamAddr::Density { entry: di, layer: li, kind: DensityParam::Weights },
                    &l.h_raw,
                    f,
                );
                emit(
                    ParamAddr::Density { entry: di, layer: li, kind: DensityParam::Bias },
                    &l.bias,
                    f,
                );
                if let Some(g) = &l.gate_raw {
                    emit(
                        ParamAddr::Density { entry: di, layer: li, kind: DensityParam::Gate },
                        g,
                        f,
                    );
                }
            }
        }
    }

    /// Mutable variant of [`visit_params`]; same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamInfo, &mut Tensor)) {
        let spans = self.spans();
        let mut index = 0;
        let mut emit = |addr: ParamAddr, t: &mut Tensor, f: &mut dyn FnMut(ParamInfo, &mut Tensor)| {
            let part = match addr {
                ParamAddr::Enc { .. } => Part::Encoder,
                ParamAddr::Dec { .. } => Part::Decoder,
                ParamAddr::Density { .. } => Part::Entropy,
            };
            f(
                ParamInfo { index, addr, part, span: spans[index] },
                t,
            );
            index += 1;
        };
        for (li, l) in self.encoder.iter_mut().enumerate() {
            emit(ParamAddr::Enc { layer: li, kind: LayerParam::Weight }, &mut l.weight, f);
            emit(ParamAddr::Enc { layer: li, kind: LayerParam::Bias }, &mut l.bias, f);
            if let Some(a) = &mut l.affine {
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::AffineAlpha }, &mut a.alpha, f);
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::AffineBeta }, &mut a.beta_aff, f);
            }
            if let Some(g) = &mut l.gdn {
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::GdnBeta }, &mut g.beta, f);
                emit(ParamAddr::Enc { layer: li, kind: LayerParam::GdnGamma }, &mut g.gamma, f);
            }
        }
        for (li, l) in self.decoder.iter_mut().enumerate() {
            emit(ParamAddr::Dec { layer: li, kind: LayerParam::Weight }, &mut l.weight, f);
            emit(ParamAddr::Dec { layer: li, kind: LayerParam::Bias }, &mut l.bias, f);
            if let Some(a) = &mut l.affine {
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::AffineAlpha }, &mut a.alpha, f);
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::AffineBeta }, &mut a.beta_aff, f);
            }
            if let Some(g) = &mut l.gdn {
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::GdnBeta }, &mut g.beta, f);
                emit(ParamAddr::Dec { layer: li, kind: LayerParam::GdnGamma }, &mut g.gamma, f);
            }
        }
        for (di, d) in self.densities.iter_mut().enumerate() {
            for (li, l) in d.density.layers.iter_mut().enumerate() {
                emit(
                    ParamAddr::Density { entry: di, layer: li, kind: DensityParam::Weights },
                    &mut l.h_raw,
                    f,
                );
                emit(
                    ParamAddr::Density { entry: di, layer: li, kind: DensityParam::Bias },
                    &mut l.bias,
                    f,
                );
                if let Some(g) = &mut l.gate_raw {
                    emit(
                        ParamAddr::Density { entry: di, layer: li, kind: DensityParam::Gate },
                        g,
                        f,
                    );
                }
            }
        }
    }

    /// Shared-slice span for every parameter tensor, in canonical order.
    fn spans(&self) -> Vec<SharedSpan> {
        let mut spans = Vec::new();
        let f1 = self.config.shared_filters;
        let v2 = self.version == 2;
        let k2 = self.config.kernel * self.config.kernel;
        let block = |d0: usize, d1: usize, inner: usize, s0: usize, s1: usize| {
            if !v2 || (s0 >= d0 && s1 >= d1) {
                SharedSpan::All
            } else {
                SharedSpan::Block { d1, inner, shared0: s0.min(d0), shared1: s1.min(d1) }
            }
        };
        let conv_layer = |spans: &mut Vec<SharedSpan>, l: &ConvLayer| {
            let ws = l.weight.shape();
            spans.push(block(ws[0], ws[1], k2, f1, f1));
            spans.push(block(l.bias.len(), 1, 1, f1, 1));
            if let Some(a) = &l.affine {
                spans.push(block(a.alpha.len(), 1, 1, f1, 1));
                spans.push(block(a.beta_aff.len(), 1, 1, f1, 1));
            }
            if let Some(g) = &l.gdn {
                let c = g.beta.len();
                spans.push(block(c, 1, 1, f1, 1));
                spans.push(block(c, c, 1, f1, f1));
            }
        };
        for l in &self.encoder {
            conv_layer(&mut spans, l);
        }
        for l in &self.decoder {
            conv_layer(&mut spans, l);
        }
        for (di, d) in self.densities.iter().enumerate() {
            // density 0 belongs to the shared (version-1) codec; later ones are custom
            let span = if di == 0 { SharedSpan::All } else { SharedSpan::None };
            for l in &d.density.layers {
                spans.push(span);
                spans.push(span);
                if l.gate_raw.is_some() {
                    spans.push(span);
                }
            }
        }
        spans
    }

    /// FNV-1a over the shared-slice scalars in canonical order; equal for a
    /// version-2 model and the version-1 parent it was grown from.
    pub fn shared_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        self.visit_params(&mut |info, t| {
            info.span.for_each_shared(t.len(), |i| {
                h.write(&t.data()[i].to_le_bytes());
            });
        });
        h.finish()
    }

    /// Exact scalar-parameter count of one model part. For `Entropy` this
    /// counts the current version's entropy model.
    pub fn param_count(&self, part: Part) -> usize {
        let active_density = self.version as usize - 1;
        let mut n = 0;
        self.visit_params(&mut |info, t| {
            let counted = match (part, info.addr) {
                (Part::Entropy, ParamAddr::Density { entry, .. }) => entry == active_density,
                (p, _) => p == info.part && !matches!(info.addr, ParamAddr::Density { .. }),
            };
            if counted {
                n += t.len();
            }
        });
        n
    }

    /// Count of custom-tagged scalars in encoder + decoder.
    pub fn custom_autoencoder_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |info, t| {
            if matches!(info.part, Part::Encoder | Part::Decoder) {
                n += t.len() - info.span.count_shared(t.len());
            }
        });
        n
    }

    /// Inserts identity channel affines: after every encoder convolution and
    /// after every decoder transposed convolution except the final RGB one.
    pub fn insert_affine(&mut self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Version("channel affines are a version-1 tuning device".into()));
        }
        for l in self.encoder.iter_mut() {
            if l.affine.is_none() {
                l.affine = Some(ChannelAffine::identity(l.weight.shape()[0]));
            }
        }
        let last = self.decoder.len() - 1;
        for l in self.decoder.iter_mut().take(last) {
            if l.affine.is_none() {
                l.affine = Some(ChannelAffine::identity(l.weight.shape()[1]));
            }
        }
        Ok(())
    }

    /// Grows a version-1 model into a version-2 model: every convolution
    /// gains `custom_filters` fresh output filters (the parent block is kept
    /// bitwise and tagged shared), GDN tensors grow with zero cross terms,
    /// and a fresh independent entropy model over the widened latent is
    /// added next to the parent's. The shared hash is preserved.
    pub fn grow_cawf(&self, rng: &mut impl Rng) -> Result<CodecModel> {
        if self.version != 1 {
            return Err(Error::Version("grow_cawf: parent must be version 1".into()));
        }
        if self.config.custom_filters < 1 {
            return Err(Error::Contract("grow_cawf: custom_filters must be >= 1".into()));
        }
        if self.encoder.iter().chain(&self.decoder).any(|l| l.affine.is_some()) {
            return Err(Error::Contract(
                "grow_cawf: growing a model with channel affines is not supported".into(),
            ));
        }
        let f1 = self.config.shared_filters;
        let f2 = f1 + self.config.custom_filters;
        let k = self.config.kernel;
        let nl = self.config.layers;

        let grow_weight = |parent: &Tensor, d0: usize, d1: usize, rng: &mut dyn rand::RngCore| {
            let ps = parent.shape();
            let fan_in = d1.max(ps[1]);
            let std = (1.0 / (k * k * fan_in) as f64).sqrt();
            let mut data = vec![0.0f32; d0 * d1 * k * k];
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    for r in 0..k * k {
                        let idx = (i0 * d1 + i1) * k * k + r;
                        data[idx] = if i0 < ps[0] && i1 < ps[1] {
                            parent.data()[(i0 * ps[1] + i1) * k * k + r]
                        } else {
                            truncated_normal(rng, std)
                        };
                    }
                }
            }
            Tensor::new(&[d0, d1, k, k], data).unwrap()
        };
        let grow_vec = |parent: &Tensor, len: usize, fill: f32| {
            let mut data = vec![fill; len];
            data[..parent.len()].copy_from_slice(parent.data());
            Tensor::new(&[len], data).unwrap()
        };
        let grow_gdn = |parent: &GdnParams, c: usize| {
            let pc = parent.beta.len();
            let mut gamma = vec![0.0f32; c * c];
            for i in 0..pc {
                gamma[i * c..i * c + pc].copy_from_slice(&parent.gamma.data()[i * pc..(i + 1) * pc]);
            }
            GdnParams {
                beta: grow_vec(&parent.beta, c, 1.0),
                gamma: Tensor::new(&[c, c], gamma).unwrap(),
            }
        };

        let mut encoder = Vec::with_capacity(nl);
        for (i, l) in self.encoder.iter().enumerate() {
            let d1 = if i == 0 { 3 } else { f2 };
            encoder.push(ConvLayer {
                weight: grow_weight(&l.weight, f2, d1, rng),
                bias: grow_vec(&l.bias, f2, 0.0),
                affine: None,
                gdn: l.gdn.as_ref().map(|g| grow_gdn(g, f2)),
            });
        }
        let mut decoder = Vec::with_capacity(nl);
        for (i, l) in self.decoder.iter().enumerate() {
            let d1 = if i + 1 == nl { 3 } else { f2 };
            decoder.push(ConvLayer {
                weight: grow_weight(&l.weight, f2, d1, rng),
                bias: if i + 1 == nl {
                    l.bias.clone()
                } else {
                    grow_vec(&l.bias, f2, 0.0)
                },
                affine: None,
                gdn: l.gdn.as_ref().map(|g| grow_gdn(g, f2)),
            });
        }
        let custom_density = FactorizedDensity::init(f2, &self.config.density_widths, rng)?;
        Ok(CodecModel {
            config: self.config.clone(),
            version: 2,
            encoder,
            decoder,
            densities: vec![
                self.densities[0].clone(),
                DensityEntry { density: custom_density, tables: None },
            ],
        })
    }

    /// Extracts the embedded version-1 model (shared slice + first entropy
    /// model), bitwise equal to the parent the model was grown from.
    pub fn slice_v1(&self) -> Result<CodecModel> {
        if self.version != 2 {
            return Err(Error::Version("slice_v1: model must be version 2".into()));
        }
        let f1 = self.config.shared_filters;
        let k = self.config.kernel;
        let nl = self.config.layers;
        let slice_weight = |t: &Tensor, d0: usize, d1: usize| {
            let ts = t.shape();
            let mut data = vec![0.0f32; d0 * d1 * k * k];
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    let src = (i0 * ts[1] + i1) * k * k;
                    let dst = (i0 * d1 + i1) * k * k;
                    data[dst..dst + k * k].copy_from_slice(&t.data()[src..src + k * k]);
                }
            }
            Tensor::new(&[d0, d1, k, k], data).unwrap()
        };
        let slice_vec = |t: &Tensor, len: usize| {
            Tensor::new(&[len], t.data()[..len].to_vec()).unwrap()
        };
        let slice_gdn = |g: &GdnParams| {
            let c = g.beta.len();
            let mut gamma = vec![0.0f32; f1 * f1];
            for i in 0..f1 {
                gamma[i * f1..(i + 1) * f1].copy_from_slice(&g.gamma.data()[i * c..i * c + f1]);
            }
            GdnParams {
                beta: slice_vec(&g.beta, f1),
                gamma: Tensor::new(&[f1, f1], gamma).unwrap(),
            }
        };
        let mut encoder = Vec::with_capacity(nl);
        for (i, l) in self.encoder.iter().enumerate() {
            let d1 = if i == 0 { 3 } else { f1 };
            encoder.push(ConvLayer {
                weight: slice_weight(&l.weight, f1, d1),
                bias: slice_vec(&l.bias, f1),
                affine: None,
                gdn: l.gdn.as_ref().map(slice_gdn),
            });
        }
        let mut decoder = Vec::with_capacity(nl);
        for (i, l) in self.decoder.iter().enumerate() {
            let d1 = if i + 1 == nl { 3 } else { f1 };
            decoder.push(ConvLayer {
                weight: slice_weight(&l.weight, f1, d1),
                bias: if i + 1 == nl { l.bias.clone() } else { slice_vec(&l.bias, f1) },
                affine: None,
                gdn: l.gdn.as_ref().map(slice_gdn),
            });
        }
        Ok(CodecModel {
            config: self.config.clone(),
            version: 1,
            encoder,
            decoder,
            densities: vec![self.densities[0].clone()],
        })
    }

    /// z = f(x): 4 strided convolutions with GDN between (and optional
    /// channel affines), on pixel intensities scaled from 0-255 to 0-1.
    pub fn encode_latent(&self, x: &Tensor, use_version: u8) -> Result<Tensor> {
        self.check_version(use_version)?;
        if use_version == 1 && self.version == 2 {
            return self.slice_v1()?.encode_latent(x, 1);
        }
        let (c, h, w) = x.dims3()?;
        let ds = self.config.downsampling();
        if c != 3 || h == 0 || w == 0 || h % ds != 0 || w % ds != 0 {
            return Err(Error::InvalidShape(format!(
                "encoder input must be [3, H, W] with H, W multiples of {}, got {:?}",
                ds,
                x.shape()
            )));
        }
        x.ensure_finite("encoder input")?;
        let s = self.config.stride;
        let k = self.config.kernel;
        let mut cur: Vec<f32> = x.data().iter().map(|v| v / 255.0).collect();
        let (mut ch, mut hh, mut ww) = (c, h, w);
        for l in &self.encoder {
            let co = l.weight.shape()[0];
            let (oh, ow) = (hh / s, ww / s);
            let mut y = vec![0.0f32; co * oh * ow];
            kernels::conv2d_fwd(&cur, ch, hh, ww, l.weight.data(), co, k, Some(l.bias.data()), s, &mut y);
            cur = y;
            (ch, hh, ww) = (co, oh, ow);
            if let Some(a) = &l.affine {
                let mut y = vec![0.0f32; ch * hh * ww];
                kernels::affine_fwd(&cur, ch, hh * ww, a.alpha.data(), a.beta_aff.data(), &mut y);
                cur = y;
            }
            if let Some(g) = &l.gdn {
                let mut y = vec![0.0f32; ch * hh * ww];
                let mut denom = vec![0.0f32; ch * hh * ww];
                kernels::gdn_fwd(&cur, ch, hh * ww, g.beta.data(), g.gamma.data(), false, &mut y, &mut denom);
                cur = y;
            }
        }
        Tensor::new(&[ch, hh, ww], cur)
    }

    /// x_hat = g(z): mirror of the encoder; transposed convolutions with
    /// IGDN between, then scaling back to 0-255. Output is not clamped.
    ///
    /// The decoder is a total function: activations are sanitized between
    /// layers (NaN -> 0, overflow clamped) so that corrupt or mismatched
    /// symbol grids degrade to garbage images instead of aborting.
    pub fn decode_latent(&self, z: &Tensor, use_version: u8) -> Result<Tensor> {
        self.check_version(use_version)?;
        if use_version == 1 && self.version == 2 {
            return self.slice_v1()?.decode_latent(z, 1);
        }
        let (c, h, w) = z.dims3()?;
        let f = self.filters(use_version);
        if c != f {
            return Err(Error::InvalidShape(format!(
                "decoder input must have {} channels for version {}, got {}",
                f, use_version, c
            )));
        }
        let s = self.config.stride;
        let k = self.config.kernel;
        let mut cur = z.data().to_vec();
        let (mut ch, mut hh, mut ww) = (c, h, w);
        for l in &self.decoder {
            let co = l.weight.shape()[1];
            let (oh, ow) = (hh * s, ww * s);
            let mut y = vec![0.0f32; co * oh * ow];
            kernels::convt2d_fwd(&cur, ch, hh, ww, l.weight.data(), co, k, Some(l.bias.data()), s, &mut y);
            cur = y;
            (ch, hh, ww) = (co, oh, ow);
            if let Some(a) = &l.affine {
                let mut y = vec![0.0f32; ch * hh * ww];
                kernels::affine_fwd(&cur, ch, hh * ww, a.alpha.data(), a.beta_aff.data(), &mut y);
                cur = y;
            }
            if let Some(g) = &l.gdn {
                let mut y = vec![0.0f32; ch * hh * ww];
                let mut denom = vec![0.0f32; ch * hh * ww];
                kernels::gdn_fwd(&cur, ch, hh * ww, g.beta.data(), g.gamma.data(), true, &mut y, &mut denom);
                cur = y;
            }
            sanitize(&mut cur);
        }
        for v in cur.iter_mut() {
            *v *= 255.0;
        }
        Tensor::new(&[ch, hh, ww], cur)
    }
}

const SANITIZE_LIMIT: f32 = 1e30;

fn sanitize(v: &mut [f32]) {
    for x in v.iter_mut() {
        if x.is_nan() {
            *x = 0.0;
        } else {
            *x = x.clamp(-SANITIZE_LIMIT, SANITIZE_LIMIT);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> CodecConfig {
        CodecConfig {
            shared_filters: 4,
            custom_filters: 2,
            lambda_index: 0,
            ..CodecConfig::default()
        }
    }

    fn model_bits(m: &CodecModel) -> Vec<u32> {
        let mut out = Vec::new();
        m.visit_params(&mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
        out
    }

    #[test]
    fn base_param_counts_match_reference_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = CodecModel::init(CodecConfig::default(), &mut rng).unwrap();
        assert_eq!(m.param_count(Part::Encoder), 324_736);
        assert_eq!(m.param_count(Part::Decoder), 324_675);
        assert_eq!(m.param_count(Part::Entropy), 64 * 43);
    }

    #[test]
    fn grown_param_counts_match_reference_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = CodecModel::init(CodecConfig::default(), &mut rng).unwrap();
        let g = m.grow_cawf(&mut rng).unwrap();
        assert_eq!(g.param_count(Part::Encoder), 505_760);
        assert_eq!(g.param_count(Part::Decoder), 505_683);
        assert_eq!(g.custom_autoencoder_params(), 362_032);
    }

    #[test]
    fn slice_of_grown_model_is_bitwise_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = CodecModel::init(small_config(), &mut rng).unwrap();
        let g = m.grow_cawf(&mut rng).unwrap();
        let s = g.slice_v1().unwrap();
        assert_eq!(model_bits(&m), model_bits(&s));
        assert_eq!(m, s);
    }

    #[test]
    fn shared_hash_is_preserved_by_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = CodecModel::init(small_config(), &mut rng).unwrap();
        let g = m.grow_cawf(&mut rng).unwrap();
        assert_eq!(m.shared_hash(), g.shared_hash());
        assert_eq!(g.slice_v1().unwrap().shared_hash(), m.shared_hash());
    }

    #[test]
    fn version_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = CodecModel::init(small_config(), &mut rng).unwrap();
        assert!(matches!(m.slice_v1(), Err(Error::Version(_))));
        let g = m.grow_cawf(&mut rng).unwrap();
        assert!(matches!(g.grow_cawf(&mut rng), Err(Error::Version(_))));
        let x = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(m.encode_latent(&x, 2), Err(Error::Version(_))));
    }

    #[test]
    fn encoder_output_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = CodecModel::init(small_config(), &mut rng).unwrap();
        let x = Tensor::new(&[3, 32, 48], (0..3 * 32 * 48).map(|i| (i % 251) as f32).collect()).unwrap();
        let z = m.encode_latent(&x, 1).unwrap();
        assert_eq!(z.shape(), &[4, 2, 3]);
        let xh = m.decode_latent(&z, 1).unwrap();
        assert_eq!(xh.shape(), &[3, 32, 48]);
        xh.ensure_finite("reconstruction").unwrap();
    }

    #[test]
    fn version_routing_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = CodecModel::init(small_config(), &mut rng).unwrap();
        let g = m.grow_cawf(&mut rng).unwrap();
        let x = Tensor::new(&[3, 32, 32], (0..3 * 32 * 32).map(|i| (i % 255) as f32).collect()).unwrap();
        let z_parent = m.encode_latent(&x, 1).unwrap();
        let z_routed = g.encode_latent(&x, 1).unwrap();
        assert_eq!(z_parent.shape(), z_routed.shape());
        assert!(z_parent
            .data()
            .iter()
            .zip(z_routed.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let xa = m.decode_latent(&z_parent, 1).unwrap();
        let xb = g.decode_latent(&z_parent, 1).unwrap();
        assert!(xa.data().iter().zip(xb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // the version-2 route exists and has the widened latent
        let z2 = g.encode_latent(&x, 2).unwrap();
        assert_eq!(z2.shape(), &[6, 2, 2]);
    }

    #[test]
    fn affine_insertion_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = CodecModel::init(CodecConfig::default(), &mut rng).unwrap();
        let before = m.param_count(Part::Encoder) + m.param_count(Part::Decoder);
        m.insert_affine().unwrap();
        let after = m.param_count(Part::Encoder) + m.param_count(Part::Decoder);
        // 4 encoder affines of 2*64 and 3 decoder affines of 2*64
        assert_eq!(after - before, 4 * 128 + 3 * 128);
    }

    #[test]
    fn fresh_reference_model_produces_finite_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = CodecModel::init(CodecConfig::default(), &mut rng).unwrap();
        let x = Tensor::new(
            &[3, 64, 64],
            (0..3 * 64 * 64).map(|i| (i % 256) as f32).collect(),
        )
        .unwrap();
        let z = m.encode_latent(&x, 1).unwrap();
        assert_eq!(z.shape(), &[64, 4, 4]);
        z.ensure_finite("latent").unwrap();
        let xh = m.decode_latent(&z, 1).unwrap();
        xh.ensure_finite("reconstruction").unwrap();
    }

    #[test]
    fn decoder_is_total_on_garbage_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = CodecModel::init(small_config(), &mut rng).unwrap();
        let z = Tensor::new(&[4, 2, 2], vec![4095.0, -4095.0, 4095.0, -4095.0].repeat(4)).unwrap();
        let xh = m.decode_latent(&z, 1).unwrap();
        assert!(xh.data().iter().all(|v| v.is_finite()));
    }
}
