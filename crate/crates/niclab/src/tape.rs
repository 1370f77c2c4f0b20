//! Reverse-mode differentiation over a flat op tape.
//!
//! A [`Tape`] owns every intermediate value of one forward computation. Ops
//! append nodes in topological order; [`Tape::backward`] walks the nodes once
//! in reverse, so gradients are accumulated in a fixed order and replaying
//! the same graph on the same inputs is bitwise reproducible.
//!
//! The op set is exactly what the codec needs: convolutions, GDN/IGDN,
//! per-channel affine, the factorized-density likelihood, and the scalar
//! reductions of the rate-distortion loss. Scalar reductions accumulate in
//! f64 and keep the f64 value alongside the f32 tensor.

use crate::entropy;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) const LIKELIHOOD_FLOOR: f32 = 1e-9;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f32),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool },
    Affine { x: Var, alpha: Var, beta: Var },
    Likelihood { z: Var, layers: Vec<DensityLayerVars> },
    Mse { a: Var, b: Var },
    SumAll(Var),
    NegLog2Sum(Var),
    ScalarComb(Vec<(Var, f64)>),
}

/// On-tape handles for one layer of a factorized density.
#[derive(Debug, Clone)]
pub struct DensityLayerVars {
    pub h_raw: Var,
    pub bias: Var,
    pub gate_raw: Option<Var>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    scalar64: Option<f64>,
    aux: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient buffer per tape node that was
/// reached; untouched nodes read as zero.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v`, materializing zeros for untouched nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f32> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            None,
            Vec::new(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Leaf from raw parts; `requires_grad` marks it as a parameter.
    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Var {
        self.push(shape.to_vec(), data, None, Vec::new(), Op::Leaf, requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// f64 value of a scalar node (reductions keep full precision).
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar64.unwrap_or_else(|| n.data[0] as f64)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        scalar64: Option<f64>,
        aux: Vec<f32>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            scalar64,
            aux,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if let Some(i) = self.nodes[v.0].data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "{}: non-finite value at flat index {}",
                what, i
            )));
        }
        Ok(())
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidShape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, data, None, Vec::new(), Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(shape, data, None, Vec::new(), Op::Scale(a, s), ng)
    }

    /// Same-padded cross-correlation, stride `s`. x: [Ci,H,W], w: [Co,Ci,k,k], b: [Co].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (ci, h, wd) = dims3(self.shape(x))?;
        let (co, wci, k) = conv_weight_dims(self.shape(w))?;
        if wci != ci {
            return Err(Error::InvalidShape(format!(
                "conv2d: input has {} channels, weight expects {}",
                ci, wci
            )));
        }
        if self.shape(b) != [co] {
            return Err(Error::InvalidShape(format!(
                "conv2d: bias shape {:?}, expected [{}]",
                self.shape(b),
                co
            )));
        }
        if stride == 0 || h % stride != 0 || wd % stride != 0 || k < stride {
            return Err(Error::InvalidShape(format!(
                "conv2d: dims {}x{} not divisible by stride {} (kernel {})",
                h, wd, stride, k
            )));
        }
        self.check_finite(x, "conv2d input")?;
        self.check_finite(w, "conv2d weight")?;
        self.check_finite(b, "conv2d bias")?;
        let (oh, ow) = (h / stride, wd / stride);
        let mut y = vec![0.0f32; co * oh * ow];
        kernels::conv2d_fwd(
            self.data(x),
            ci,
            h,
            wd,
            self.data(w),
            co,
            k,
            Some(self.data(b)),
            stride,
            &mut y,
        );
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(
            vec![co, oh, ow],
            y,
            None,
            Vec::new(),
            Op::Conv2d { x, w, b, stride },
            ng,
        ))
    }

    /// Transposed convolution (adjoint of `conv2d`). x: [Ci,h,w], w: [Ci,Co,k,k], b: [Co].
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (ci, h, wd) = dims3(self.shape(x))?;
        let (wci, co, k) = conv_weight_dims(self.shape(w))?;
        if wci != ci {
            return Err(Error::InvalidShape(format!(
                "conv2d_transpose: input has {} channels, weight expects {}",
                ci, wci
            )));
        }
        if self.shape(b) != [co] {
            return Err(Error::InvalidShape(format!(
                "conv2d_transpose: bias shape {:?}, expected [{}]",
                self.shape(b),
                co
            )));
        }
        if stride == 0 || k < stride {
            return Err(Error::InvalidShape("conv2d_transpose: kernel < stride".into()));
        }
        self.check_finite(x, "conv2d_transpose input")?;
        self.check_finite(w, "conv2d_transpose weight")?;
        self.check_finite(b, "conv2d_transpose bias")?;
        let (oh, ow) = (h * stride, wd * stride);
        let mut y = vec![0.0f32; co * oh * ow];
        kernels::convt2d_fwd(
            self.data(x),
            ci,
            h,
            wd,
            self.data(w),
            co,
            k,
            Some(self.data(b)),
            stride,
            &mut y,
        );
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(
            vec![co, oh, ow],
            y,
            None,
            Vec::new(),
            Op::ConvT2d { x, w, b, stride },
            ng,
        ))
    }

    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var) -> Result<Var> {
        self.gdn_impl(x, beta, gamma, false)
    }

    pub fn igdn(&mut self, x: Var, beta: Var, gamma: Var) -> Result<Var> {
        self.gdn_impl(x, beta, gamma, true)
    }

    fn gdn_impl(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (c, h, w) = dims3(self.shape(x))?;
        if self.shape(beta) != [c] || self.shape(gamma) != [c, c] {
            return Err(Error::InvalidShape(format!(
                "gdn: beta {:?} gamma {:?} for {} channels",
                self.shape(beta),
                self.shape(gamma),
                c
            )));
        }
        self.check_finite(x, "gdn input")?;
        if self.data(beta).iter().any(|v| *v <= 0.0) || self.data(gamma).iter().any(|v| *v < 0.0) {
            return Err(Error::Contract(
                "gdn: beta must be > 0 and gamma >= 0".into(),
            ));
        }
        let hw = h * w;
        let mut y = vec![0.0f32; c * hw];
        let mut denom = vec![0.0f32; c * hw];
        kernels::gdn_fwd(
            self.data(x),
            c,
            hw,
            self.data(beta),
            self.data(gamma),
            inverse,
            &mut y,
            &mut denom,
        );
        let ng = self.needs(&[x, beta, gamma]);
        Ok(self.push(
            vec![c, h, w],
            y,
            None,
            denom,
            Op::Gdn { x, beta, gamma, inverse },
            ng,
        ))
    }

    /// Per-channel affine y = alpha[c] * x + beta[c]. alpha/beta: [C].
    pub fn channel_affine(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.shape(x))?;
        if self.shape(alpha) != [c] || self.shape(beta) != [c] {
            return Err(Error::InvalidShape(format!(
                "channel_affine: alpha {:?} beta {:?} for {} channels",
                self.shape(alpha),
                self.shape(beta),
                c
            )));
        }
        self.check_finite(x, "channel_affine input")?;
        let hw = h * w;
        let mut y = vec![0.0f32; c * hw];
        kernels::affine_fwd(self.data(x), c, hw, self.data(alpha), self.data(beta), &mut y);
        let ng = self.needs(&[x, alpha, beta]);
        Ok(self.push(
            vec![c, h, w],
            y,
            None,
            Vec::new(),
            Op::Affine { x, alpha, beta },
            ng,
        ))
    }

    /// Per-element mass cdf(z+1/2) - cdf(z-1/2) of the factorized density,
    /// floored at 1e-9. z: [C,h,w]; layer shapes must match `z`'s channels.
    pub fn likelihood(&mut self, z: Var, layers: &[DensityLayerVars]) -> Result<Var> {
        let (c, h, w) = dims3(self.shape(z))?;
        self.check_finite(z, "likelihood input")?;
        // validate layer chain: widths [w0=1, .., wK=1]
        let mut prev = 1usize;
        for (k, l) in layers.iter().enumerate() {
            let hs = self.shape(l.h_raw).to_vec();
            if hs.len() != 3 || hs[0] != c || hs[2] != prev {
                return Err(Error::InvalidShape(format!(
                    "likelihood: layer {} H shape {:?}, expected [{}, _, {}]",
                    k, hs, c, prev
                )));
            }
            let out = hs[1];
            if self.shape(l.bias) != [c, out] {
                return Err(Error::InvalidShape(format!(
                    "likelihood: layer {} bias shape {:?}",
                    k,
                    self.shape(l.bias)
                )));
            }
            let last = k + 1 == layers.len();
            match (&l.gate_raw, last) {
                (Some(g), false) => {
                    if self.shape(*g) != [c, out] {
                        return Err(Error::InvalidShape(format!(
                            "likelihood: layer {} gate shape {:?}",
                            k,
                            self.shape(*g)
                        )));
                    }
                }
                (None, true) => {}
                _ => {
                    return Err(Error::InvalidShape(
                        "likelihood: gate present iff layer is not final".into(),
                    ))
                }
            }
            prev = out;
        }
        if prev != 1 {
            return Err(Error::InvalidShape("likelihood: final layer width must be 1".into()));
        }
        let hw = h * w;
        let views = self.density_views(layers);
        let mut p = vec![0.0f32; c * hw];
        entropy::mass_fwd(self.data(z), c, hw, &views, LIKELIHOOD_FLOOR, &mut p);
        let mut inputs = vec![z];
        for l in layers {
            inputs.push(l.h_raw);
            inputs.push(l.bias);
            if let Some(g) = l.gate_raw {
                inputs.push(g);
            }
        }
        let ng = self.needs(&inputs);
        Ok(self.push(
            vec![c, h, w],
            p,
            None,
            Vec::new(),
            Op::Likelihood { z, layers: layers.to_vec() },
            ng,
        ))
    }

    fn density_views<'a>(&'a self, layers: &[DensityLayerVars]) -> Vec<entropy::LayerView<'a>> {
        layers
            .iter()
            .map(|l| entropy::LayerView {
                h_raw: self.data(l.h_raw),
                bias: self.data(l.bias),
                gate_raw: l.gate_raw.map(|g| self.data(g)),
                out_w: self.shape(l.h_raw)[1],
                in_w: self.shape(l.h_raw)[2],
            })
            .collect()
    }

    /// Mean squared error between two same-shape tensors, f64 accumulation.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidShape(format!(
                "mse: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.check_finite(a, "mse lhs")?;
        self.check_finite(b, "mse rhs")?;
        let n = self.data(a).len().max(1);
        let mut acc = 0.0f64;
        for (x, y) in self.data(a).iter().zip(self.data(b)) {
            let d = *x as f64 - *y as f64;
            acc += d * d;
        }
        let m = acc / n as f64;
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![1], vec![m as f32], Some(m), Vec::new(), Op::Mse { a, b }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = 0.0f64;
        for x in self.data(a) {
            acc += *x as f64;
        }
        let ng = self.needs(&[a]);
        self.push(vec![1], vec![acc as f32], Some(acc), Vec::new(), Op::SumAll(a), ng)
    }

    /// Total information in bits: sum of -log2(max(p, 1e-9)).
    pub fn rate_bits(&mut self, p: Var) -> Var {
        let mut acc = 0.0f64;
        for x in self.data(p) {
            let v = (*x).max(LIKELIHOOD_FLOOR) as f64;
            acc -= v.log2();
        }
        let ng = self.needs(&[p]);
        self.push(vec![1], vec![acc as f32], Some(acc), Vec::new(), Op::NegLog2Sum(p), ng)
    }

    /// Linear combination of scalar nodes with f64 coefficients.
    pub fn scalar_combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0f64;
        for (v, c) in terms {
            if self.data(*v).len() != 1 {
                return Err(Error::Contract("scalar_combine: non-scalar term".into()));
            }
            acc += c * self.scalar(*v);
        }
        let vars: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let ng = self.needs(&vars);
        Ok(self.push(
            vec![1],
            vec![acc as f32],
            Some(acc),
            Vec::new(),
            Op::ScalarComb(terms.to_vec()),
            ng,
        ))
    }

    /// Reverse pass from a scalar loss. Every node the loss depends on gets a
    /// gradient; leaves the loss never touched read as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.dispatch(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Vec<f32>>], v: Var, len: usize, add: impl FnOnce(&mut [f32])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn dispatch(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, _) in [(a, 0), (b, 1)] {
                    if self.nodes[v.0].needs_grad {
                        Self::accum(grads, *v, g.len(), |dst| {
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += *s;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.nodes[a.0].needs_grad {
                    let s = *s;
                    Self::accum(grads, *a, g.len(), |dst| {
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += s * gv;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (ci, h, wd) = dims3(&self.nodes[x.0].shape).unwrap();
                let (co, _, k) = conv_weight_dims(&self.nodes[w.0].shape).unwrap();
                let (oh, ow) = (h / stride, wd / stride);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; ci * h * wd];
                    kernels::convt2d_fwd(g, co, oh, ow, self.data(*w), ci, k, None, *stride, &mut dx);
                    Self::accum(grads, *x, dx.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&dx) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0f32; co * ci * k * k];
                    kernels::weight_grad(g, co, oh, ow, self.data(*x), ci, h, wd, k, *stride, &mut dw);
                    Self::accum(grads, *w, dw.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&dw) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; co];
                    kernels::channel_sums(g, co, oh * ow, &mut db);
                    Self::accum(grads, *b, co, |dst| {
                        for (d, s) in dst.iter_mut().zip(&db) {
                            *d += *s;
                        }
                    });
                }
            }
            Op::ConvT2d { x, w, b, stride } => {
                let (ci, h, wd) = dims3(&self.nodes[x.0].shape).unwrap();
                let (_, co, k) = conv_weight_dims(&self.nodes[w.0].shape).unwrap();
                let (oh, ow) = (h * stride, wd * stride);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; ci * h * wd];
                    kernels::conv2d_fwd(g, co, oh, ow, self.data(*w), ci, k, None, *stride, &mut dx);
                    Self::accum(grads, *x, dx.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&dx) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0f32; ci * co * k * k];
                    kernels::weight_grad(
                        self.data(*x),
                        ci,
                        h,
                        wd,
                        g,
                        co,
                        oh,
                        ow,
                        k,
                        *stride,
                        &mut dw,
                    );
                    Self::accum(grads, *w, dw.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&dw) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; co];
                    kernels::channel_sums(g, co, oh * ow, &mut db);
                    Self::accum(grads, *b, co, |dst| {
                        for (d, s) in dst.iter_mut().zip(&db) {
                            *d += *s;
                        }
                    });
                }
            }
            Op::Gdn { x, beta, gamma, inverse } => {
                let (c, h, w) = dims3(&self.nodes[x.0].shape).unwrap();
                let hw = h * w;
                let mut dx = vec![0.0f32; c * hw];
                let mut dbeta = vec![0.0f32; c];
                let mut dgamma = vec![0.0f32; c * c];
                kernels::gdn_bwd(
                    self.data(*x),
                    c,
                    hw,
                    self.data(*gamma),
                    &node.aux,
                    g,
                    *inverse,
                    &mut dx,
                    &mut dbeta,
                    &mut dgamma,
                );
                if self.nodes[x.0].needs_grad {
                    Self::accum(grads, *x, dx.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&dx) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[beta.0].needs_grad {
                    Self::accum(grads, *beta, c, |dst| {
                        for (d, s) in dst.iter_mut().zip(&dbeta) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[gamma.0].needs_grad {
                    Self::accum(grads, *gamma, c * c, |dst| {
                        for (d, s) in dst.iter_mut().zip(&dgamma) {
                            *d += *s;
                        }
                    });
                }
            }
            Op::Affine { x, alpha, beta } => {
                let (c, h, w) = dims3(&self.nodes[x.0].shape).unwrap();
                let hw = h * w;
                let mut dx = vec![0.0f32; c * hw];
                let mut dalpha = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                kernels::affine_bwd(
                    self.data(*x),
                    c,
                    hw,
                    self.data(*alpha),
                    g,
                    &mut dx,
                    &mut dalpha,
                    &mut dbeta,
                );
                if self.nodes[x.0].needs_grad {
                    Self::accum(grads, *x, dx.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&dx) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[alpha.0].needs_grad {
                    Self::accum(grads, *alpha, c, |dst| {
                        for (d, s) in dst.iter_mut().zip(&dalpha) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[beta.0].needs_grad {
                    Self::accum(grads, *beta, c, |dst| {
                        for (d, s) in dst.iter_mut().zip(&dbeta) {
                            *d += *s;
                        }
                    });
                }
            }
            Op::Likelihood { z, layers } => {
                let (c, h, w) = dims3(&self.nodes[z.0].shape).unwrap();
                let hw = h * w;
                let views = self.density_views(layers);
                let mut sink = entropy::MassGrads::new(&views, c, hw);
                entropy::mass_bwd(
                    self.data(*z),
                    c,
                    hw,
                    &views,
                    &node.data,
                    LIKELIHOOD_FLOOR,
                    g,
                    &mut sink,
                );
                if self.nodes[z.0].needs_grad {
                    Self::accum(grads, *z, c * hw, |dst| {
                        for (d, s) in dst.iter_mut().zip(&sink.dz) {
                            *d += *s;
                        }
                    });
                }
                for (k, l) in layers.iter().enumerate() {
                    if self.nodes[l.h_raw.0].needs_grad {
                        Self::accum(grads, l.h_raw, sink.dh[k].len(), |dst| {
                            for (d, s) in dst.iter_mut().zip(&sink.dh[k]) {
                                *d += *s;
                            }
                        });
                    }
                    if self.nodes[l.bias.0].needs_grad {
                        Self::accum(grads, l.bias, sink.db[k].len(), |dst| {
                            for (d, s) in dst.iter_mut().zip(&sink.db[k]) {
                                *d += *s;
                            }
                        });
                    }
                    if let Some(gv) = l.gate_raw {
                        if self.nodes[gv.0].needs_grad {
                            Self::accum(grads, gv, sink.da[k].len(), |dst| {
                                for (d, s) in dst.iter_mut().zip(&sink.da[k]) {
                                    *d += *s;
                                }
                            });
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].data.len().max(1) as f32;
                let gs = g[0];
                let da: Vec<f32> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| gs * 2.0 * (x - y) / n)
                    .collect();
                if self.nodes[a.0].needs_grad {
                    Self::accum(grads, *a, da.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&da) {
                            *d += *s;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    Self::accum(grads, *b, da.len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(&da) {
                            *d -= *s;
                        }
                    });
                }
            }
            Op::SumAll(a) => {
                if self.nodes[a.0].needs_grad {
                    let gs = g[0];
                    let len = self.nodes[a.0].data.len();
                    Self::accum(grads, *a, len, |dst| {
                        for d in dst.iter_mut() {
                            *d += gs;
                        }
                    });
                }
            }
            Op::NegLog2Sum(p) => {
                if self.nodes[p.0].needs_grad {
                    let gs = g[0];
                    let ln2 = std::f32::consts::LN_2;
                    let src = self.data(*p);
                    Self::accum(grads, *p, src.len(), |dst| {
                        for (d, x) in dst.iter_mut().zip(src) {
                            if *x > LIKELIHOOD_FLOOR {
                                *d -= gs / (x * ln2);
                            }
                        }
                    });
                }
            }
            Op::ScalarComb(terms) => {
                let gs = g[0];
                for (v, c) in terms {
                    if self.nodes[v.0].needs_grad {
                        Self::accum(grads, *v, 1, |dst| {
                            dst[0] += gs * *c as f32;
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::InvalidShape(format!("expected [C,H,W], got {:?}", s))),
    }
}

fn conv_weight_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, k1, k2] if k1 == k2 => Ok((*a, *b, *k1)),
        s => Err(Error::InvalidShape(format!(
            "expected square conv weight [A,B,k,k], got {:?}",
            s
        ))),
    }
}
