//! Property tests for the load-bearing invariants.

use niclab::coder::{rc_decode, rc_encode, SymbolGrid};
use niclab::entropy::{ChannelPmf, FactorizedDensity, PmfTable, DEFAULT_WIDTHS};
use niclab::eval::psnr;
use niclab::kernels::{conv2d_fwd, convt2d_fwd};
use niclab::pipeline::{add_uniform_noise, pad_reflect, quantize};
use niclab::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded_pmf(rng: &mut ChaCha8Rng) -> ChannelPmf {
    let lo = rng.gen_range(-15..=0);
    let hi = rng.gen_range(0..=15);
    let n = (hi - lo + 1) as usize;
    let mut freq = vec![1u32; n];
    let mut rest = (1u32 << 16) - n as u32;
    while rest > 0 {
        let i = rng.gen_range(0..n);
        let amount = rng.gen_range(1..=rest);
        freq[i] += amount;
        rest -= amount;
    }
    ChannelPmf::new(lo, hi, freq).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn range_coder_round_trips(seed in any::<u64>(), c in 1usize..4, h in 0usize..6, w in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels: Vec<ChannelPmf> = (0..c).map(|_| seeded_pmf(&mut rng)).collect();
        let values: Vec<i32> = (0..c * h * w)
            .map(|i| {
                let pmf = &channels[i / (h * w).max(1)];
                rng.gen_range(pmf.q_min..=pmf.q_max)
            })
            .collect();
        let tables = PmfTable { channels };
        let grid = SymbolGrid::new([c, h, w], values).unwrap();
        let bytes = rc_encode(&grid, &tables).unwrap();
        prop_assert_eq!(rc_decode(&bytes, &tables, [c, h, w]).unwrap(), grid);
    }

    #[test]
    fn quantization_error_is_at_most_half(vals in prop::collection::vec(-1000.0f32..1000.0, 1..64)) {
        let n = vals.len();
        let z = Tensor::new(&[1, 1, n], vals.clone()).unwrap();
        let q = quantize(&z).unwrap();
        for (v, s) in vals.iter().zip(q.values()) {
            prop_assert!((*v as f64 - *s as f64).abs() <= 0.5 + 1e-6);
        }
    }

    #[test]
    fn uniform_noise_stays_in_support(seed in any::<u64>(), n in 1usize..128) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::zeros(&[1, 1, n]);
        let zt = add_uniform_noise(&z, &mut rng);
        for v in zt.data() {
            prop_assert!((-0.5..0.5).contains(v));
        }
    }

    #[test]
    fn cdf_is_monotone(seed in any::<u64>(), x1 in -40.0f64..40.0, x2 in -40.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = FactorizedDensity::init(2, &DEFAULT_WIDTHS, &mut rng).unwrap();
        let (lo, hi) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
        for ch in 0..2 {
            prop_assert!(d.cdf(ch, lo) <= d.cdf(ch, hi) + 1e-15);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv(seed in any::<u64>(), ci in 1usize..4, co in 1usize..4, hw in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (2 * hw, 2 * hw);
        let a: Vec<f32> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..co * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wgt: Vec<f32> = (0..co * ci * 25).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut conv_a = vec![0.0f32; co * hw * hw];
        conv2d_fwd(&a, ci, h, w, &wgt, co, 5, None, 2, &mut conv_a);
        let mut tr_b = vec![0.0f32; ci * h * w];
        convt2d_fwd(&b, co, hw, hw, &wgt, ci, 5, None, 2, &mut tr_b);
        let lhs: f64 = conv_a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let rhs: f64 = a.iter().zip(&tr_b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1e-9);
        prop_assert!((lhs - rhs).abs() <= 1e-4 * scale, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn padding_reaches_multiples_and_keeps_content(w in 1u32..48, h in 1u32..48, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = image::RgbImage::new(w, h);
        for px in img.pixels_mut() {
            *px = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
        }
        let padded = pad_reflect(&img, 16);
        prop_assert_eq!(padded.width() % 16, 0);
        prop_assert_eq!(padded.height() % 16, 0);
        prop_assert!(padded.width() >= w && padded.height() >= h);
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(padded.get_pixel(x, y), img.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>(), w in 1u32..24, h in 1u32..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = image::RgbImage::new(w, h);
        let mut b = image::RgbImage::new(w, h);
        for px in a.pixels_mut().chain(b.pixels_mut()) {
            *px = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
        }
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
