//! Image <-> bitstream pipelines and the versioned container format.
//!
//! Bitstream layout ("BS-1"), all integers little-endian, 27-byte header:
//!
//! ```text
//! magic            4 bytes  "DANb"
//! format version   u8       1
//! codec version t  u8       1 or 2; selects the embedded codec version
//! lambda index     u8       0..=3
//! model hash       u64      FNV-1a of the producing model's shared slice
//! width            u32      true image width before padding
//! height           u32      true image height
//! payload length   u32      range-coder payload bytes that follow
//! ```
//!
//! Encoding reflect-pads the image to multiples of the downsampling factor,
//! runs the feature encoder, rounds to nearest integer (ties away from
//! zero), clamps each channel to its coding-table support, and range-codes
//! the symbols. Decoding is the mirror, cropping back to the true size. The
//! codec version is always signalled in the header; decoding a stream from
//! an unrelated model is refused by the hash check unless explicitly
//! bypassed (experiment mode), in which case the reconstruction is garbage
//! by design but still an image.

use crate::coder::{rc_decode, rc_decode_tolerant, rc_encode, SymbolGrid};
use crate::entropy::PmfTable;
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::tensor::Tensor;
use image::RgbImage;
use rand::Rng;
use std::path::Path;

pub const BITSTREAM_MAGIC: &[u8; 4] = b"DANb";
pub const BITSTREAM_FORMAT_VERSION: u8 = 1;
/// Header length in bytes.
pub const HEADER_LEN: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub format_version: u8,
    pub codec_version: u8,
    pub lambda_index: u8,
    pub model_hash: u64,
    pub width: u32,
    pub height: u32,
    pub payload_len: u32,
}

impl BitstreamHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(BITSTREAM_MAGIC);
        b[4] = self.format_version;
        b[5] = self.codec_version;
        b[6] = self.lambda_index;
        b[7..15].copy_from_slice(&self.model_hash.to_le_bytes());
        b[15..19].copy_from_slice(&self.width.to_le_bytes());
        b[19..23].copy_from_slice(&self.height.to_le_bytes());
        b[23..27].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("header needs {} bytes, got {}", HEADER_LEN, bytes.len()),
            });
        }
        if &bytes[0..4] != BITSTREAM_MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {:?}", &bytes[0..4]) });
        }
        let h = Self {
            format_version: bytes[4],
            codec_version: bytes[5],
            lambda_index: bytes[6],
            model_hash: u64::from_le_bytes(bytes[7..15].try_into().unwrap()),
            width: u32::from_le_bytes(bytes[15..19].try_into().unwrap()),
            height: u32::from_le_bytes(bytes[19..23].try_into().unwrap()),
            payload_len: u32::from_le_bytes(bytes[23..27].try_into().unwrap()),
        };
        if h.format_version != BITSTREAM_FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported format version {}", h.format_version),
            });
        }
        if h.codec_version != 1 && h.codec_version != 2 {
            return Err(Error::Format {
                offset: 5,
                msg: format!("bad codec version {}", h.codec_version),
            });
        }
        if h.lambda_index > 3 {
            return Err(Error::Format {
                offset: 6,
                msg: format!("bad lambda index {}", h.lambda_index),
            });
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = BitstreamHeader::parse(bytes)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < header.payload_len as usize {
            return Err(Error::Decode(format!(
                "payload truncated: header says {} bytes, {} present",
                header.payload_len,
                body.len()
            )));
        }
        if body.len() > header.payload_len as usize {
            return Err(Error::Format {
                offset: (HEADER_LEN + header.payload_len as usize) as u64,
                msg: format!("{} trailing bytes", body.len() - header.payload_len as usize),
            });
        }
        Ok(Self { header, payload: body.to_vec() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Bits per pixel of the full stream (header included) for the true dims.
    pub fn bpp(&self) -> f64 {
        let pixels = self.header.width as f64 * self.header.height as f64;
        8.0 * (HEADER_LEN + self.payload.len()) as f64 / pixels
    }
}

/// Nearest-integer quantization, ties away from zero.
pub fn quantize(z: &Tensor) -> Result<SymbolGrid> {
    let (c, h, w) = z.dims3()?;
    let values = z.data().iter().map(|v| v.round() as i32).collect();
    SymbolGrid::new([c, h, w], values)
}

/// Clamps every symbol to its channel's coding support.
pub fn clamp_to_support(grid: &SymbolGrid, tables: &PmfTable) -> Result<SymbolGrid> {
    let [c, h, w] = grid.dims();
    if tables.num_channels() < c {
        return Err(Error::Contract(format!(
            "{} channels but table has {}",
            c,
            tables.num_channels()
        )));
    }
    let mut values = Vec::with_capacity(grid.len());
    for ch in 0..c {
        let pmf = tables.channel(ch);
        for &v in &grid.values()[ch * h * w..(ch + 1) * h * w] {
            values.push(pmf.clamp(v));
        }
    }
    SymbolGrid::new([c, h, w], values)
}

/// Training-time quantization proxy: z + u with u ~ U[-1/2, 1/2).
pub fn add_uniform_noise(z: &Tensor, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f32> = z.data().iter().map(|v| v + (rng.gen::<f32>() - 0.5)).collect();
    Tensor::new(z.shape(), data).expect("noise keeps values finite")
}

fn mirror_index(i: usize, n: usize) -> usize {
    // symmetric extension: 0 1 .. n-1 | n-1 .. 1 0 | 0 1 ..
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Reflect-pads an image on the right/bottom to multiples of `multiple`.
pub fn pad_reflect(img: &RgbImage, multiple: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pw = w.div_ceil(multiple) * multiple;
    let ph = h.div_ceil(multiple) * multiple;
    if pw == w && ph == h {
        return img.clone();
    }
    let mut out = RgbImage::new(pw as u32, ph as u32);
    for y in 0..ph {
        let sy = mirror_index(y, h);
        for x in 0..pw {
            let sx = mirror_index(x, w);
            out.put_pixel(x as u32, y as u32, *img.get_pixel(sx as u32, sy as u32));
        }
    }
    out
}

/// Planar [3, H, W] tensor of 0-255 intensities.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = p.0[ch] as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("u8 image values are finite")
}

/// Rounds, clamps to [0, 255], and interleaves a [3, H, W] tensor.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("expected 3 channels, got {}", c)));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = t.data()[ch * h * w + y * w + x];
                px[ch] = if v.is_nan() { 0 } else { v.round().clamp(0.0, 255.0) as u8 };
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Quantized, support-clamped latent symbols for an image (the encoder's
/// internal state right before entropy coding).
pub fn latent_symbols(img: &RgbImage, model: &CodecModel, use_version: u8) -> Result<SymbolGrid> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidShape("image has a zero dimension".into()));
    }
    let padded = pad_reflect(img, model.config.downsampling());
    let x = image_to_tensor(&padded);
    let z = model.encode_latent(&x, use_version)?;
    let q = quantize(&z)?;
    clamp_to_support(&q, model.tables(use_version)?)
}

/// b = f(x): full encoder pipeline producing a self-describing bitstream.
/// Deterministic: identical image + model + version give identical bytes.
pub fn encode_image(img: &RgbImage, model: &CodecModel, use_version: u8) -> Result<Bitstream> {
    let symbols = latent_symbols(img, model, use_version)?;
    let tables = model.tables(use_version)?;
    let payload = rc_encode(&symbols, tables)?;
    Ok(Bitstream {
        header: BitstreamHeader {
            format_version: BITSTREAM_FORMAT_VERSION,
            codec_version: use_version,
            lambda_index: model.config.lambda_index,
            model_hash: model.shared_hash(),
            width: img.width(),
            height: img.height(),
            payload_len: payload.len() as u32,
        },
        payload,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOptions {
    /// Experiment mode: skip the shared-hash check so cross-model decodes
    /// (the catastrophic-forgetting demonstration) run on purpose. Implies
    /// tolerant entropy decoding, since a mismatched model's renormalization
    /// schedule no longer matches the encoder's.
    pub allow_hash_mismatch: bool,
}

/// x_hat = g(b): decodes a bitstream into an 8-bit image.
pub fn decode_image(b: &Bitstream, model: &CodecModel, opts: DecodeOptions) -> Result<RgbImage> {
    let h = &b.header;
    if h.payload_len as usize != b.payload.len() {
        return Err(Error::Decode(format!(
            "payload length mismatch: header {} vs actual {}",
            h.payload_len,
            b.payload.len()
        )));
    }
    if h.codec_version > model.version {
        return Err(Error::Version(format!(
            "bitstream needs codec version {}, model is version {}",
            h.codec_version, model.version
        )));
    }
    if !opts.allow_hash_mismatch && h.model_hash != model.shared_hash() {
        return Err(Error::WrongModel {
            expected: h.model_hash,
            found: model.shared_hash(),
        });
    }
    if h.width == 0 || h.height == 0 {
        return Err(Error::InvalidShape("bitstream has a zero dimension".into()));
    }
    let ds = model.config.downsampling();
    let (pw, ph) = (
        (h.width as usize).div_ceil(ds) * ds,
        (h.height as usize).div_ceil(ds) * ds,
    );
    let dims = [model.filters(h.codec_version), ph / ds, pw / ds];
    let tables = model.tables(h.codec_version)?;
    let symbols = if opts.allow_hash_mismatch {
        rc_decode_tolerant(&b.payload, tables, dims)?
    } else {
        rc_decode(&b.payload, tables, dims)?
    };
    let z = Tensor::new(
        [dims[0], dims[1], dims[2]].as_slice(),
        symbols.values().iter().map(|v| *v as f32).collect(),
    )?;
    let xh = model.decode_latent(&z, h.codec_version)?;
    let full = tensor_to_image(&xh)?;
    let cropped = image::imageops::crop_imm(&full, 0, 0, h.width, h.height).to_image();
    Ok(cropped)
}

/// Entropy-model estimate (in bits) of coding `symbols`: sum over symbols of
/// -log2 of the continuous density mass at the quantized value.
pub fn rate_estimate_bits(symbols: &SymbolGrid, model: &CodecModel, use_version: u8) -> Result<f64> {
    let density = &model.density_entry(use_version)?.density;
    let [c, h, w] = symbols.dims();
    let mut bits = 0.0f64;
    for ch in 0..c {
        for &v in &symbols.values()[ch * h * w..(ch + 1) * h * w] {
            bits -= density.mass(ch, v).max(1e-9).log2();
        }
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CodecConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_model(seed: u64) -> CodecModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CodecConfig {
            shared_filters: 6,
            custom_filters: 2,
            lambda_index: 1,
            ..CodecConfig::default()
        };
        let mut m = CodecModel::init(cfg, &mut rng).unwrap();
        m.build_tables(1).unwrap();
        m
    }

    fn test_image(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(w, h);
        for p in img.pixels_mut() {
            // smooth-ish content so latents stay in-support
            *p = image::Rgb([rng.gen_range(90..170), rng.gen_range(90..170), rng.gen_range(90..170)]);
        }
        img
    }

    #[test]
    fn quantize_rounds_ties_away_from_zero() {
        let z = Tensor::new(&[1, 1, 6], vec![1.4, -1.4, 2.5, -2.5, 3.0, -0.0]).unwrap();
        let q = quantize(&z).unwrap();
        assert_eq!(q.values(), &[1, -1, 3, -3, 3, 0]);
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let z = Tensor::zeros(&[2, 3, 3]);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let n1 = add_uniform_noise(&z, &mut r1);
        let n2 = add_uniform_noise(&z, &mut r2);
        assert_eq!(n1.data(), n2.data());
        assert!(n1.data().iter().all(|v| *v >= -0.5 && *v < 0.5));
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let z = Tensor::zeros(&[1, 1000, 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = add_uniform_noise(&z, &mut rng);
        let mean: f64 = n.data().iter().map(|v| *v as f64).sum::<f64>() / n.len() as f64;
        assert!(mean.abs() < 0.002, "mean {}", mean);
    }

    #[test]
    fn header_round_trip() {
        let h = BitstreamHeader {
            format_version: 1,
            codec_version: 2,
            lambda_index: 3,
            model_hash: 0x0123_4567_89ab_cdef,
            width: 1920,
            height: 1080,
            payload_len: 4242,
        };
        assert_eq!(BitstreamHeader::parse(&h.to_bytes()).unwrap(), h);
    }

    #[test]
    fn header_corruption_is_detected() {
        let model = test_model(1);
        let img = test_image(24, 18, 2);
        let bs = encode_image(&img, &model, 1).unwrap();
        let bytes = bs.to_bytes();
        // magic corruption
        for i in 0..4 {
            let mut c = bytes.clone();
            c[i] ^= 0x40;
            assert!(Bitstream::from_bytes(&c).is_err(), "magic byte {}", i);
        }
        // hash corruption: parses, but decode refuses
        for i in 7..15 {
            let mut c = bytes.clone();
            c[i] ^= 0x01;
            let parsed = Bitstream::from_bytes(&c).unwrap();
            assert!(matches!(
                decode_image(&parsed, &model, DecodeOptions::default()),
                Err(Error::WrongModel { .. })
            ));
        }
        // payload_len corruption
        for i in 23..27 {
            let mut c = bytes.clone();
            c[i] ^= 0x01;
            assert!(Bitstream::from_bytes(&c).is_err(), "len byte {}", i);
        }
    }

    #[test]
    fn encode_decode_round_trip_dims_and_determinism() {
        let model = test_model(3);
        for (w, h) in [(32, 32), (33, 17), (48, 31), (16, 16), (5, 5)] {
            let img = test_image(w, h, 100 + (w * h) as u64);
            let b1 = encode_image(&img, &model, 1).unwrap();
            let b2 = encode_image(&img, &model, 1).unwrap();
            assert_eq!(b1.to_bytes(), b2.to_bytes());
            let out = decode_image(&b1, &model, DecodeOptions::default()).unwrap();
            assert_eq!((out.width(), out.height()), (w, h));
            let out2 = decode_image(&b1, &model, DecodeOptions::default()).unwrap();
            assert_eq!(out, out2);
        }
    }

    #[test]
    fn decoder_simulation_matches_decode_image() {
        let model = test_model(4);
        let img = test_image(40, 24, 7);
        let bs = encode_image(&img, &model, 1).unwrap();
        let via_stream = decode_image(&bs, &model, DecodeOptions::default()).unwrap();
        // encoder-side simulation: decode own symbols without entropy coding
        let symbols = latent_symbols(&img, &model, 1).unwrap();
        let z = Tensor::new(
            symbols.dims().as_slice(),
            symbols.values().iter().map(|v| *v as f32).collect(),
        )
        .unwrap();
        let xh = model.decode_latent(&z, 1).unwrap();
        let full = tensor_to_image(&xh).unwrap();
        let sim = image::imageops::crop_imm(&full, 0, 0, 40, 24).to_image();
        assert_eq!(sim, via_stream);
    }

    #[test]
    fn truncated_stream_is_decode_error() {
        let model = test_model(5);
        let img = test_image(64, 64, 9);
        let bs = encode_image(&img, &model, 1).unwrap();
        let bytes = bs.to_bytes();
        let cut = &bytes[..bytes.len() - bytes.len() / 3];
        assert!(matches!(Bitstream::from_bytes(cut), Err(Error::Decode(_))));
        // a stream whose payload was chopped but header rewritten still fails
        let mut short = Bitstream::from_bytes(&bytes).unwrap();
        short.payload.truncate(short.payload.len() / 2);
        short.header.payload_len = short.payload.len() as u32;
        assert!(matches!(
            decode_image(&short, &model, DecodeOptions::default()),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn version2_stream_needs_version2_model() {
        let model = test_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut grown = model.grow_cawf(&mut rng).unwrap();
        grown.build_tables(2).unwrap();
        let img = test_image(32, 32, 11);
        let b2 = encode_image(&img, &grown, 2).unwrap();
        assert_eq!(b2.header.codec_version, 2);
        assert!(matches!(
            decode_image(&b2, &model, DecodeOptions::default()),
            Err(Error::Version(_))
        ));
        let ok = decode_image(&b2, &grown, DecodeOptions::default()).unwrap();
        assert_eq!((ok.width(), ok.height()), (32, 32));
    }

    #[test]
    fn v1_stream_decodes_identically_through_grown_model() {
        let model = test_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grown = model.grow_cawf(&mut rng).unwrap();
        let img = test_image(48, 32, 13);
        let b1 = encode_image(&img, &model, 1).unwrap();
        let b1_via_grown = encode_image(&img, &grown, 1).unwrap();
        assert_eq!(b1.to_bytes(), b1_via_grown.to_bytes());
        let d_parent = decode_image(&b1, &model, DecodeOptions::default()).unwrap();
        let d_grown = decode_image(&b1, &grown, DecodeOptions::default()).unwrap();
        assert_eq!(d_parent, d_grown);
    }

    #[test]
    fn padding_preserves_true_dims() {
        let img = test_image(7, 3, 14);
        let padded = pad_reflect(&img, 16);
        assert_eq!((padded.width(), padded.height()), (16, 16));
        // original content is the top-left corner
        for y in 0..3 {
            for x in 0..7 {
                assert_eq!(padded.get_pixel(x, y), img.get_pixel(x, y));
            }
        }
        // mirrored first column: x=7 mirrors x=6
        assert_eq!(padded.get_pixel(7, 0), img.get_pixel(6, 0));
    }

    #[test]
    fn zero_dimension_image_is_rejected() {
        let model = test_model(8);
        let img = RgbImage::new(0, 5);
        assert!(matches!(
            encode_image(&img, &model, 1),
            Err(Error::InvalidShape(_))
        ));
    }
}
