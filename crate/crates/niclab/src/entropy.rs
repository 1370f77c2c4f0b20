//! Learned per-channel factorized density and its frozen coding tables.
//!
//! Each latent channel gets an independent univariate density modeled through
//! a small monotone CDF network: K affine layers whose weights pass through
//! softplus (keeping them positive) with tanh-gated residual nonlinearities
//! between layers and a sigmoid head. Monotonicity in the input is therefore
//! structural, and cdf(-inf) -> 0, cdf(+inf) -> 1.
//!
//! Training uses the differentiable mass cdf(v + 1/2) - cdf(v - 1/2) (see
//! [`crate::tape::Tape::likelihood`]); coding uses [`freeze_tables`], which
//! integerizes the masses into 16-bit frequency tables for the range coder.
//! Table freezing evaluates the CDF in f64 and is deterministic.

use crate::error::{Error, Result};
use crate::tape::{DensityLayerVars, Tape};
use crate::tensor::Tensor;
use rand::Rng;

/// Default layer widths of the CDF network (4 weight matrices).
pub const DEFAULT_WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];

/// Frequencies per channel sum to exactly this.
pub const FREQ_TOTAL: u32 = 1 << 16;

/// Default tail mass excluded from the coded support (2^-8).
pub const DEFAULT_TAIL_MASS: f64 = 1.0 / 256.0;

/// Largest representable support bound.
pub const SUPPORT_LIMIT: i32 = 4095;

/// One layer of the CDF network, batched over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityLayer {
    /// Raw weights [C, out, in]; softplus is applied in the forward pass.
    pub h_raw: Tensor,
    /// Biases [C, out].
    pub bias: Tensor,
    /// Raw residual gates [C, out], tanh-reparameterized; absent on the head.
    pub gate_raw: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedDensity {
    channels: usize,
    widths: Vec<usize>,
    pub layers: Vec<DensityLayer>,
}

/// Borrowed raw parameters of one layer, shared by tape and table code.
pub struct LayerView<'a> {
    pub h_raw: &'a [f32],
    pub bias: &'a [f32],
    pub gate_raw: Option<&'a [f32]>,
    pub out_w: usize,
    pub in_w: usize,
}

impl FactorizedDensity {
    /// Fresh density following the usual factorized-prior initialization:
    /// constant raw weights targeting softplus(h) ~ 1/(scale * width), biases
    /// uniform in [-1/2, 1/2), gates zero.
    pub fn init(channels: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths[0] != 1 || *widths.last().unwrap() != 1 {
            return Err(Error::Contract(format!(
                "density widths must start and end at 1, got {:?}",
                widths
            )));
        }
        let k = widths.len() - 1;
        let scale = 10f64.powf(1.0 / k as f64);
        let mut layers = Vec::with_capacity(k);
        for i in 0..k {
            let (wi, wo) = (widths[i], widths[i + 1]);
            let h0 = (1.0 / (scale * wo as f64)).exp_m1().ln() as f32;
            let h_raw = Tensor::new(&[channels, wo, wi], vec![h0; channels * wo * wi])?;
            let mut bdata = vec![0.0f32; channels * wo];
            for b in bdata.iter_mut() {
                *b = rng.gen::<f32>() - 0.5;
            }
            let bias = Tensor::new(&[channels, wo], bdata)?;
            let gate_raw = if i + 1 < k {
                Some(Tensor::zeros(&[channels, wo]))
            } else {
                None
            };
            layers.push(DensityLayer { h_raw, bias, gate_raw });
        }
        Ok(Self {
            channels,
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn from_layers(channels: usize, widths: Vec<usize>, layers: Vec<DensityLayer>) -> Self {
        Self { channels, widths, layers }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Scalar parameters across all channels.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.h_raw.len() + l.bias.len() + l.gate_raw.as_ref().map_or(0, |g| g.len()))
            .sum()
    }

    pub fn views(&self) -> Vec<LayerView<'_>> {
        self.layers
            .iter()
            .map(|l| LayerView {
                h_raw: l.h_raw.data(),
                bias: l.bias.data(),
                gate_raw: l.gate_raw.as_ref().map(|g| g.data()),
                out_w: l.h_raw.shape()[1],
                in_w: l.h_raw.shape()[2],
            })
            .collect()
    }

    /// Puts every parameter tensor on the tape and returns the layer handles.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<DensityLayerVars> {
        self.layers
            .iter()
            .map(|l| DensityLayerVars {
                h_raw: tape.leaf_from(l.h_raw.shape(), l.h_raw.data().to_vec(), trainable),
                bias: tape.leaf_from(l.bias.shape(), l.bias.data().to_vec(), trainable),
                gate_raw: l
                    .gate_raw
                    .as_ref()
                    .map(|g| tape.leaf_from(g.shape(), g.data().to_vec(), trainable)),
            })
            .collect()
    }

    /// CDF of channel `ch` at `x`, evaluated in f64.
    pub fn cdf(&self, ch: usize, x: f64) -> f64 {
        cdf_channel(&self.views(), ch, x)
    }

    /// Mass cdf(v+1/2) - cdf(v-1/2) of integer symbol `v` in channel `ch`.
    pub fn mass(&self, ch: usize, v: i32) -> f64 {
        let views = self.views();
        (cdf_channel(&views, ch, v as f64 + 0.5) - cdf_channel(&views, ch, v as f64 - 0.5)).max(0.0)
    }
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

/// CDF network forward for one channel at scalar `x` (f64).
pub fn cdf_channel(views: &[LayerView<'_>], ch: usize, x: f64) -> f64 {
    let mut cur = [0.0f64; 8];
    let mut nxt = [0.0f64; 8];
    cur[0] = x;
    let mut cur_w = 1usize;
    let last = views.len() - 1;
    for (k, l) in views.iter().enumerate() {
        debug_assert_eq!(l.in_w, cur_w);
        let hoff = ch * l.out_w * l.in_w;
        let boff = ch * l.out_w;
        for j in 0..l.out_w {
            let mut y = l.bias[boff + j] as f64;
            for i in 0..cur_w {
                y += softplus(l.h_raw[hoff + j * l.in_w + i] as f64) * cur[i];
            }
            if k == last {
                return sigmoid(y);
            }
            let a = (l.gate_raw.unwrap()[boff + j] as f64).tanh();
            nxt[j] = y + a * y.tanh();
        }
        cur_w = l.out_w;
        cur[..cur_w].copy_from_slice(&nxt[..cur_w]);
    }
    unreachable!("final layer returns")
}

/// Forward trace of one CDF evaluation, retained for the backward pass.
struct CdfTrace {
    /// xs[k] = input vector of layer k (xs[0] = [x]).
    xs: Vec<Vec<f64>>,
    /// ys[k] = pre-gate activations of layer k.
    ys: Vec<Vec<f64>>,
    out: f64,
}

fn cdf_fwd_trace(views: &[LayerView<'_>], ch: usize, x: f64) -> CdfTrace {
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    let mut ys: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    let mut cur = vec![x];
    let last = views.len() - 1;
    let mut out = 0.0;
    for (k, l) in views.iter().enumerate() {
        let hoff = ch * l.out_w * l.in_w;
        let boff = ch * l.out_w;
        let mut y = vec![0.0f64; l.out_w];
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = l.bias[boff + j] as f64;
            for i in 0..l.in_w {
                acc += softplus(l.h_raw[hoff + j * l.in_w + i] as f64) * cur[i];
            }
            *yj = acc;
        }
        xs.push(cur.clone());
        if k == last {
            out = sigmoid(y[0]);
            ys.push(y);
            break;
        }
        let mut nxt = vec![0.0f64; l.out_w];
        for j in 0..l.out_w {
            let a = (l.gate_raw.unwrap()[boff + j] as f64).tanh();
            nxt[j] = y[j] + a * y[j].tanh();
        }
        ys.push(y);
        cur = nxt;
    }
    CdfTrace { xs, ys, out }
}

/// Gradient buffers for [`mass_bwd`], one per density parameter tensor.
pub struct MassGrads {
    pub dz: Vec<f32>,
    pub dh: Vec<Vec<f32>>,
    pub db: Vec<Vec<f32>>,
    pub da: Vec<Vec<f32>>,
}

impl MassGrads {
    pub fn new(views: &[LayerView<'_>], c: usize, hw: usize) -> Self {
        Self {
            dz: vec![0.0; c * hw],
            dh: views.iter().map(|l| vec![0.0; c * l.out_w * l.in_w]).collect(),
            db: views.iter().map(|l| vec![0.0; c * l.out_w]).collect(),
            da: views
                .iter()
                .map(|l| vec![0.0; if l.gate_raw.is_some() { c * l.out_w } else { 0 }])
                .collect(),
        }
    }
}

/// p[c,p] = max(cdf(z+1/2) - cdf(z-1/2), floor), evaluated in f64.
pub fn mass_fwd(z: &[f32], c: usize, hw: usize, views: &[LayerView<'_>], floor: f32, out: &mut [f32]) {
    for ch in 0..c {
        for p in 0..hw {
            let idx = ch * hw + p;
            let x = z[idx] as f64;
            let m = cdf_channel(views, ch, x + 0.5) - cdf_channel(views, ch, x - 0.5);
            out[idx] = (m as f32).max(floor);
        }
    }
}

/// Backward of [`mass_fwd`]. Elements that hit the floor propagate no gradient.
#[allow(clippy::too_many_arguments)]
pub fn mass_bwd(
    z: &[f32],
    c: usize,
    hw: usize,
    views: &[LayerView<'_>],
    p_saved: &[f32],
    floor: f32,
    dp: &[f32],
    sink: &mut MassGrads,
) {
    for ch in 0..c {
        for pix in 0..hw {
            let idx = ch * hw + pix;
            if p_saved[idx] <= floor {
                continue;
            }
            let g = dp[idx] as f64;
            if g == 0.0 {
                continue;
            }
            let x = z[idx] as f64;
            // + evaluation at x+1/2, - evaluation at x-1/2
            for (shift, sign) in [(0.5, 1.0), (-0.5, -1.0)] {
                let trace = cdf_fwd_trace(views, ch, x + shift);
                let dx0 = cdf_bwd_trace(views, ch, &trace, g * sign, sink);
                sink.dz[idx] += dx0 as f32;
            }
        }
    }
}

/// Backprop through one traced CDF evaluation; accumulates parameter
/// gradients into `sink` and returns d(out)/d(input scalar) * d_out.
fn cdf_bwd_trace(
    views: &[LayerView<'_>],
    ch: usize,
    trace: &CdfTrace,
    d_out: f64,
    sink: &mut MassGrads,
) -> f64 {
    let last = views.len() - 1;
    // gradient w.r.t. layer output vector, walking top-down
    let s = trace.out;
    let mut dx_next = vec![d_out * s * (1.0 - s)]; // d/dy of sigmoid head
    for k in (0..views.len()).rev() {
        let l = &views[k];
        let hoff = ch * l.out_w * l.in_w;
        let boff = ch * l.out_w;
        let y = &trace.ys[k];
        let xk = &trace.xs[k];
        // dy: gradient on pre-gate activations
        let dy: Vec<f64> = if k == last {
            dx_next.clone()
        } else {
            let gates = l.gate_raw.unwrap();
            let mut dy = vec![0.0f64; l.out_w];
            for j in 0..l.out_w {
                let a_raw = gates[boff + j] as f64;
                let a = a_raw.tanh();
                let t = y[j].tanh();
                dy[j] = dx_next[j] * (1.0 + a * (1.0 - t * t));
                // d/d a_raw = dx * t * (1 - a^2)
                sink.da[k][boff + j] += (dx_next[j] * t * (1.0 - a * a)) as f32;
            }
            dy
        };
        let mut dx_prev = vec![0.0f64; l.in_w];
        for j in 0..l.out_w {
            sink.db[k][boff + j] += dy[j] as f32;
            for i in 0..l.in_w {
                let raw = l.h_raw[hoff + j * l.in_w + i] as f64;
                let w = softplus(raw);
                // d softplus / d raw = sigmoid(raw)
                sink.dh[k][hoff + j * l.in_w + i] += (dy[j] * xk[i] * sigmoid(raw)) as f32;
                dx_prev[i] += dy[j] * w;
            }
        }
        dx_next = dx_prev;
    }
    dx_next[0]
}

/// Frozen integer PMF for one channel: inclusive support and 16-bit-total
/// frequencies with every in-support frequency >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPmf {
    pub q_min: i32,
    pub q_max: i32,
    pub freq: Vec<u32>,
    cum: Vec<u32>,
}

impl ChannelPmf {
    pub fn new(q_min: i32, q_max: i32, freq: Vec<u32>) -> Result<Self> {
        let n = (q_max - q_min + 1) as usize;
        if freq.len() != n {
            return Err(Error::Contract(format!(
                "pmf: {} frequencies for support [{}, {}]",
                freq.len(),
                q_min,
                q_max
            )));
        }
        if freq.iter().any(|f| *f == 0) {
            return Err(Error::Contract("pmf: zero frequency inside support".into()));
        }
        let total: u64 = freq.iter().map(|f| *f as u64).sum();
        if total != FREQ_TOTAL as u64 {
            return Err(Error::Contract(format!("pmf: frequencies sum to {}", total)));
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in &freq {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { q_min, q_max, freq, cum })
    }

    pub fn support_len(&self) -> usize {
        self.freq.len()
    }

    pub fn contains(&self, v: i32) -> bool {
        v >= self.q_min && v <= self.q_max
    }

    pub fn clamp(&self, v: i32) -> i32 {
        v.clamp(self.q_min, self.q_max)
    }

    /// (cumulative, frequency) of symbol `v`; caller guarantees in-support.
    pub fn range_of(&self, v: i32) -> (u32, u32) {
        let i = (v - self.q_min) as usize;
        (self.cum[i], self.freq[i])
    }

    /// Symbol whose cumulative interval contains `cum_est`.
    pub fn symbol_at(&self, cum_est: u32) -> i32 {
        // partition_point: first index with cum[i+1] > cum_est
        let i = self.cum[1..].partition_point(|c| *c <= cum_est);
        self.q_min + i.min(self.freq.len() - 1) as i32
    }

    /// Entropy in bits/symbol of the integerized distribution.
    pub fn entropy_bits(&self) -> f64 {
        let t = FREQ_TOTAL as f64;
        -self
            .freq
            .iter()
            .map(|f| {
                let p = *f as f64 / t;
                p * p.log2()
            })
            .sum::<f64>()
    }
}

/// Frozen tables for every channel of one density.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfTable {
    pub channels: Vec<ChannelPmf>,
}

impl PmfTable {
    pub fn channel(&self, c: usize) -> &ChannelPmf {
        &self.channels[c]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Builds integer coding tables from a trained density.
///
/// Per channel: starting from the median integer, the support grows greedily
/// toward the side with more mass until it holds at least `1 - tail_mass`,
/// then a one-symbol guard is added on each side. Masses are evaluated in
/// f64 and integerized by largest-remainder rounding to a total of 2^16 with
/// a minimum frequency of 1.
pub fn freeze_tables(density: &FactorizedDensity, tail_mass: f64) -> Result<PmfTable> {
    let views = density.views();
    let mut channels = Vec::with_capacity(density.channels());
    for ch in 0..density.channels() {
        let cdf = |v: f64| cdf_channel(&views, ch, v);
        // median: smallest integer v with cdf(v + 1/2) >= 1/2
        let (mut lo, mut hi) = (-(SUPPORT_LIMIT + 1), SUPPORT_LIMIT + 1);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if cdf(mid as f64 + 0.5) >= 0.5 {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let median = lo.clamp(-SUPPORT_LIMIT, SUPPORT_LIMIT);
        let (mut a, mut b) = (median, median);
        let target = 1.0 - tail_mass;
        let mass_of = |x: i32, y: i32| cdf(y as f64 + 0.5) - cdf(x as f64 - 0.5);
        while mass_of(a, b) < target {
            let can_left = a > -SUPPORT_LIMIT;
            let can_right = b < SUPPORT_LIMIT;
            if !can_left && !can_right {
                return Err(Error::ModelDegenerate(format!(
                    "channel {}: support exceeds [{}, {}]",
                    ch, -SUPPORT_LIMIT, SUPPORT_LIMIT
                )));
            }
            let ml = if can_left { mass_of(a - 1, a - 1) } else { -1.0 };
            let mr = if can_right { mass_of(b + 1, b + 1) } else { -1.0 };
            if ml >= mr {
                a -= 1;
            } else {
                b += 1;
            }
        }
        a -= 1;
        b += 1;
        if a < -SUPPORT_LIMIT || b > SUPPORT_LIMIT {
            return Err(Error::ModelDegenerate(format!(
                "channel {}: guarded support [{}, {}] exceeds limit",
                ch, a, b
            )));
        }
        let n = (b - a + 1) as usize;
        let masses: Vec<f64> = (a..=b).map(|v| mass_of(v, v).max(0.0)).collect();
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(Error::ModelDegenerate(format!("channel {}: zero mass", ch)));
        }
        // one guaranteed count per symbol, remainder shared by largest remainder
        let spare = FREQ_TOTAL - n as u32;
        let ideals: Vec<f64> = masses.iter().map(|m| m / total * spare as f64).collect();
        let mut freq: Vec<u32> = ideals.iter().map(|x| 1 + x.floor() as u32).collect();
        let assigned: u32 = freq.iter().sum();
        let mut leftover = FREQ_TOTAL - assigned;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let ri = ideals[i] - ideals[i].floor();
            let rj = ideals[j] - ideals[j].floor();
            rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
        });
        for i in order {
            if leftover == 0 {
                break;
            }
            freq[i] += 1;
            leftover -= 1;
        }
        channels.push(ChannelPmf::new(a, b, freq)?);
    }
    Ok(PmfTable { channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid_cdf_density() -> FactorizedDensity {
        // single layer, softplus(h) = 1, bias 0 -> cdf(x) = sigmoid(x)
        let h = Tensor::new(&[1, 1, 1], vec![(1f64.exp_m1()).ln() as f32]).unwrap();
        let b = Tensor::zeros(&[1, 1]);
        FactorizedDensity::from_layers(
            1,
            vec![1, 1],
            vec![DensityLayer { h_raw: h, bias: b, gate_raw: None }],
        )
    }

    #[test]
    fn degenerate_density_is_sigmoid() {
        let d = sigmoid_cdf_density();
        assert!((d.cdf(0, 0.0) - 0.5).abs() < 1e-12);
        let p0 = d.mass(0, 0);
        assert!((p0 - 0.244918).abs() < 1e-5, "{}", p0);
    }

    #[test]
    fn masses_telescope_to_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = FactorizedDensity::init(4, &DEFAULT_WIDTHS, &mut rng).unwrap();
        for ch in 0..4 {
            let s: f64 = (-30..=30).map(|v| d.mass(ch, v)).sum();
            assert!(s <= 1.0 + 1e-6, "channel {}: {}", ch, s);
            assert!(s > 0.5);
        }
    }

    #[test]
    fn cdf_is_monotone_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = FactorizedDensity::init(3, &DEFAULT_WIDTHS, &mut rng).unwrap();
        for i in 0..1000 {
            let ch = i % 3;
            let x1 = (rng.gen::<f64>() - 0.5) * 60.0;
            let x2 = (rng.gen::<f64>() - 0.5) * 60.0;
            let (lo, hi) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
            assert!(d.cdf(ch, lo) <= d.cdf(ch, hi) + 1e-15);
        }
    }

    #[test]
    fn density_param_count_is_43_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = FactorizedDensity::init(64, &DEFAULT_WIDTHS, &mut rng).unwrap();
        assert_eq!(d.param_count(), 64 * 43);
        assert_eq!(d.param_count() / 64, 43);
    }

    #[test]
    fn frozen_tables_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = FactorizedDensity::init(5, &DEFAULT_WIDTHS, &mut rng).unwrap();
        let t = freeze_tables(&d, DEFAULT_TAIL_MASS).unwrap();
        for ch in &t.channels {
            assert_eq!(ch.freq.iter().map(|f| *f as u64).sum::<u64>(), FREQ_TOTAL as u64);
            assert!(ch.freq.iter().all(|f| *f >= 1));
        }
    }

    #[test]
    fn near_deterministic_density_has_tiny_support() {
        // steep sigmoid: softplus(h) = 50 -> nearly all mass at 0
        let h = Tensor::new(&[1, 1, 1], vec![50.0]).unwrap();
        let b = Tensor::zeros(&[1, 1]);
        let d = FactorizedDensity::from_layers(
            1,
            vec![1, 1],
            vec![DensityLayer { h_raw: h, bias: b, gate_raw: None }],
        );
        let t = freeze_tables(&d, DEFAULT_TAIL_MASS).unwrap();
        assert!(t.channel(0).support_len() <= 3, "{}", t.channel(0).support_len());
    }

    #[test]
    fn table_entropy_tracks_analytic_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for seed in 0..6 {
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let d = FactorizedDensity::init(2, &DEFAULT_WIDTHS, &mut r2).unwrap();
            let t = freeze_tables(&d, DEFAULT_TAIL_MASS).unwrap();
            for ch in 0..2 {
                let pmf = t.channel(ch);
                // analytic entropy of the continuous-mass PMF over the support
                let masses: Vec<f64> =
                    (pmf.q_min..=pmf.q_max).map(|v| d.mass(ch, v)).collect();
                let tot: f64 = masses.iter().sum();
                let h_analytic: f64 = -masses
                    .iter()
                    .filter(|m| **m > 0.0)
                    .map(|m| {
                        let p = m / tot;
                        p * p.log2()
                    })
                    .sum::<f64>();
                let h_table = pmf.entropy_bits();
                let rel = (h_table - h_analytic).abs() / h_analytic.max(1e-9);
                assert!(rel < 0.01, "ch {}: table {} vs analytic {}", ch, h_table, h_analytic);
            }
            let _ = &mut rng;
        }
    }

    #[test]
    fn flat_density_is_model_degenerate() {
        // softplus(-50) ~ 0: cdf is constant, no interval can hold the mass
        let h = Tensor::new(&[1, 1, 1], vec![-50.0]).unwrap();
        let b = Tensor::zeros(&[1, 1]);
        let d = FactorizedDensity::from_layers(
            1,
            vec![1, 1],
            vec![DensityLayer { h_raw: h, bias: b, gate_raw: None }],
        );
        assert!(matches!(
            freeze_tables(&d, DEFAULT_TAIL_MASS),
            Err(Error::ModelDegenerate(_))
        ));
    }

    #[test]
    fn freezing_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let d = FactorizedDensity::init(3, &DEFAULT_WIDTHS, &mut rng).unwrap();
        let t1 = freeze_tables(&d, DEFAULT_TAIL_MASS).unwrap();
        let t2 = freeze_tables(&d, DEFAULT_TAIL_MASS).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn symbol_lookup_inverts_ranges() {
        let pmf = ChannelPmf::new(-2, 2, vec![10, 20, 65536 - 60, 20, 10]).unwrap();
        for v in -2..=2 {
            let (cum, f) = pmf.range_of(v);
            assert_eq!(pmf.symbol_at(cum), v);
            assert_eq!(pmf.symbol_at(cum + f - 1), v);
        }
    }
}
