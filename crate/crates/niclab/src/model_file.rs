//! Model file serialization ("NICM-1").
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic            4 bytes  "NICM"
//! format version   u8       1
//! model version    u8       1 or 2
//! lambda index     u8
//! flags            u8       bit 0: channel affines present
//! shared_filters   u32
//! custom_filters   u32
//! layers           u32
//! kernel           u32
//! stride           u32
//! widths count     u8       then that many u32 density layer widths
//! parameter blob   f32 x N  every tensor in canonical order (see
//!                           CodecModel::visit_params); shapes are derived
//!                           from the config, so no per-tensor headers
//! tables           per density: u8 present; if 1, per channel:
//!                           i32 q_min, i32 q_max, u32 freq x support
//! shared hash      u64      FNV-1a of the shared slice; verified on load
//! ```
//!
//! Loading is bitwise lossless including partition tags (derived from the
//! config and version), coding tables, and the hash.

use crate::entropy::{ChannelPmf, DensityLayer, FactorizedDensity, PmfTable};
use crate::error::{Error, Result};
use crate::model::{ChannelAffine, CodecConfig, CodecModel, ConvLayer, DensityEntry, GdnParams};
use crate::tensor::Tensor;
use std::io::Write as _;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"NICM";
pub const MODEL_FORMAT_VERSION: u8 = 1;

const FLAG_AFFINE: u8 = 1;

pub fn save_model(model: &CodecModel, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CodecModel> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

pub fn model_to_bytes(model: &CodecModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_FORMAT_VERSION);
    out.push(model.version);
    out.push(model.config.lambda_index);
    let has_affine = model.encoder.iter().chain(&model.decoder).any(|l| l.affine.is_some());
    out.push(if has_affine { FLAG_AFFINE } else { 0 });
    for v in [
        model.config.shared_filters,
        model.config.custom_filters,
        model.config.layers,
        model.config.kernel,
        model.config.stride,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(model.config.density_widths.len() as u8);
    for w in &model.config.density_widths {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    model.visit_params(&mut |_, t| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    for entry in &model.densities {
        match &entry.tables {
            None => out.push(0),
            Some(t) => {
                out.push(1);
                for ch in &t.channels {
                    out.extend_from_slice(&ch.q_min.to_le_bytes());
                    out.extend_from_slice(&ch.q_max.to_le_bytes());
                    for f in &ch.freq {
                        out.extend_from_slice(&f.to_le_bytes());
                    }
                }
            }
        }
    }
    out.extend_from_slice(&model.shared_hash().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {}", what),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CodecModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {:?}", magic) });
    }
    let fmt = r.u8("format version")?;
    if fmt != MODEL_FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported format version {}", fmt),
        });
    }
    let version = r.u8("model version")?;
    if version != 1 && version != 2 {
        return Err(Error::Format { offset: 5, msg: format!("bad model version {}", version) });
    }
    let lambda_index = r.u8("lambda index")?;
    let flags = r.u8("flags")?;
    let shared_filters = r.u32("shared_filters")? as usize;
    let custom_filters = r.u32("custom_filters")? as usize;
    let layers = r.u32("layers")? as usize;
    let kernel = r.u32("kernel")? as usize;
    let stride = r.u32("stride")? as usize;
    let nw = r.u8("density widths count")? as usize;
    let mut density_widths = Vec::with_capacity(nw);
    for _ in 0..nw {
        density_widths.push(r.u32("density width")? as usize);
    }
    let config = CodecConfig {
        shared_filters,
        custom_filters,
        layers,
        kernel,
        stride,
        lambda_index,
        density_widths,
    };
    config.validate()?;
    if version == 2 && custom_filters == 0 {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "version-2 model with zero custom filters".into(),
        });
    }
    let has_affine = flags & FLAG_AFFINE != 0;
    if has_affine && version == 2 {
        return Err(Error::Format {
            offset: 7,
            msg: "version-2 model cannot carry channel affines".into(),
        });
    }

    let f = if version == 1 { shared_filters } else { shared_filters + custom_filters };
    let k = kernel;
    let read_tensor = |r: &mut Reader, shape: &[usize], what: &str| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let offset = r.pos as u64;
        let data = r.f32_vec(n, what)?;
        Tensor::new(shape, data).map_err(|e| Error::Format {
            offset,
            msg: format!("{}: {}", what, e),
        })
    };

    // encoder
    let mut encoder = Vec::with_capacity(layers);
    for i in 0..layers {
        let cin = if i == 0 { 3 } else { f };
        let weight = read_tensor(&mut r, &[f, cin, k, k], "encoder weight")?;
        let bias = read_tensor(&mut r, &[f], "encoder bias")?;
        let affine = if has_affine {
            Some(ChannelAffine {
                alpha: read_tensor(&mut r, &[f], "encoder affine alpha")?,
                beta_aff: read_tensor(&mut r, &[f], "encoder affine beta")?,
            })
        } else {
            None
        };
        let gdn = if i + 1 < layers {
            Some(GdnParams {
                beta: read_tensor(&mut r, &[f], "gdn beta")?,
                gamma: read_tensor(&mut r, &[f, f], "gdn gamma")?,
            })
        } else {
            None
        };
        encoder.push(ConvLayer { weight, bias, affine, gdn });
    }
    // decoder
    let mut decoder = Vec::with_capacity(layers);
    for i in 0..layers {
        let cout = if i + 1 == layers { 3 } else { f };
        let weight = read_tensor(&mut r, &[f, cout, k, k], "decoder weight")?;
        let bias = read_tensor(&mut r, &[cout], "decoder bias")?;
        let affine = if has_affine && i + 1 < layers {
            Some(ChannelAffine {
                alpha: read_tensor(&mut r, &[cout], "decoder affine alpha")?,
                beta_aff: read_tensor(&mut r, &[cout], "decoder affine beta")?,
            })
        } else {
            None
        };
        let gdn = if i + 1 < layers {
            Some(GdnParams {
                beta: read_tensor(&mut r, &[cout], "igdn beta")?,
                gamma: read_tensor(&mut r, &[cout, cout], "igdn gamma")?,
            })
        } else {
            None
        };
        decoder.push(ConvLayer { weight, bias, affine, gdn });
    }
    // densities
    let widths = config.density_widths.clone();
    let nk = widths.len() - 1;
    let mut densities = Vec::new();
    for v in 1..=version {
        let ch = if v == 1 { shared_filters } else { f };
        let mut dlayers = Vec::with_capacity(nk);
        for li in 0..nk {
            let (wi, wo) = (widths[li], widths[li + 1]);
            let h_raw = read_tensor(&mut r, &[ch, wo, wi], "density weights")?;
            let bias = read_tensor(&mut r, &[ch, wo], "density bias")?;
            let gate_raw = if li + 1 < nk {
                Some(read_tensor(&mut r, &[ch, wo], "density gate")?)
            } else {
                None
            };
            dlayers.push(DensityLayer { h_raw, bias, gate_raw });
        }
        densities.push(DensityEntry {
            density: FactorizedDensity::from_layers(ch, widths.clone(), dlayers),
            tables: None,
        });
    }
    // tables
    for (idx, entry) in densities.iter_mut().enumerate() {
        let present = r.u8("tables flag")?;
        match present {
            0 => {}
            1 => {
                let nch = if idx == 0 { shared_filters } else { f };
                let mut channels = Vec::with_capacity(nch);
                for _ in 0..nch {
                    let off = r.pos as u64;
                    let q_min = r.i32("table q_min")?;
                    let q_max = r.i32("table q_max")?;
                    if q_min > q_max || (q_max - q_min) as usize >= 1 << 16 {
                        return Err(Error::Format {
                            offset: off,
                            msg: format!("bad table support [{}, {}]", q_min, q_max),
                        });
                    }
                    let n = (q_max - q_min + 1) as usize;
                    let mut freq = Vec::with_capacity(n);
                    for _ in 0..n {
                        freq.push(r.u32("table frequency")?);
                    }
                    channels.push(ChannelPmf::new(q_min, q_max, freq).map_err(|e| Error::Format {
                        offset: off,
                        msg: e.to_string(),
                    })?);
                }
                entry.tables = Some(PmfTable { channels });
            }
            other => {
                return Err(Error::Format {
                    offset: r.pos as u64 - 1,
                    msg: format!("bad tables flag {}", other),
                })
            }
        }
    }
    let hash_offset = r.pos as u64;
    let stored_hash = r.u64("shared hash")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let model = CodecModel { config, version, encoder, decoder, densities };
    let actual = model.shared_hash();
    if actual != stored_hash {
        return Err(Error::Format {
            offset: hash_offset,
            msg: format!(
                "shared-parameter hash mismatch: stored {:016x}, computed {:016x}",
                stored_hash, actual
            ),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> CodecModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CodecConfig {
            shared_filters: 4,
            custom_filters: 2,
            lambda_index: 2,
            ..CodecConfig::default()
        };
        let mut m = CodecModel::init(cfg, &mut rng).unwrap();
        m.build_tables(1).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small_model(1);
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model_to_bytes(&back), bytes);
        assert_eq!(back, m);
    }

    #[test]
    fn round_trip_version2_with_tables() {
        let m = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = m.grow_cawf(&mut rng).unwrap();
        g.build_tables(2).unwrap();
        let bytes = model_to_bytes(&g);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.shared_hash(), m.shared_hash());
    }

    #[test]
    fn round_trip_with_affine() {
        let mut m = small_model(4);
        m.insert_affine().unwrap();
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_header_byte_is_format_error() {
        let m = small_model(5);
        let mut bytes = model_to_bytes(&m);
        bytes[2] ^= 0xFF; // inside magic
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupted_parameter_is_hash_mismatch() {
        let m = small_model(6);
        let mut bytes = model_to_bytes(&m);
        // flip one parameter byte well past the header
        let idx = 64;
        bytes[idx] ^= 0x01;
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{}", err);
    }

    #[test]
    fn truncation_is_format_error_with_offset() {
        let m = small_model(7);
        let bytes = model_to_bytes(&m);
        let cut = &bytes[..bytes.len() / 3];
        match model_from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut.len() as u64),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn stored_hash_matches_model_hash() {
        let m = small_model(8);
        let bytes = model_to_bytes(&m);
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        assert_eq!(stored, m.shared_hash());
    }
}
