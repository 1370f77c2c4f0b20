//! Bit-exact integer range coder over per-channel PMF tables.
//!
//! 32-bit range, 8-bit renormalization, carry propagation through a
//! cache/pending-byte pipeline (Schindler/Subbotin lineage). No floating
//! point anywhere: identical inputs give identical bytes on every platform.
//!
//! Payload layout ("RC-1"): the payload is the fractional binary expansion
//! of a code value V in the final coding interval, chosen at termination as
//! the smallest multiple of 2^24 in that interval (the always-zero integer
//! byte is dropped, and only V's leading nonzero bytes are written). A
//! conforming decoder reads the payload big-endian into a 32-bit window and
//! needs exactly three implicit zero bytes past the end; needing a fourth
//! means the payload was truncated. Symbols are scanned channel-major, then
//! row-major within a channel, and every symbol is coded with its channel's
//! table. An empty grid encodes to an empty payload. Any change here is a
//! format-version bump.

use crate::entropy::PmfTable;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const WINDOW_MASK: u64 = 0xFFFF_FFFF;

/// Quantized latent laid out as channels x height x width, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolGrid {
    dims: [usize; 3],
    values: Vec<i32>,
}

impl SymbolGrid {
    pub fn new(dims: [usize; 3], values: Vec<i32>) -> Result<Self> {
        if dims[0] * dims[1] * dims[2] != values.len() {
            return Err(Error::Contract(format!(
                "symbol grid dims {:?} do not match {} values",
                dims,
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    lead_dropped: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            lead_dropped: false,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, cum: u32, freq: u32) {
        let r = self.range >> 16;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > WINDOW_MASK {
            let carry = (self.low >> 32) as u8;
            // The very first byte through the pipeline is the integer part
            // of the code value, provably zero (the coding interval stays
            // inside [0, 1)); it is dropped from the payload.
            if self.lead_dropped {
                self.out.push(self.cache.wrapping_add(carry));
            } else {
                debug_assert_eq!(self.cache.wrapping_add(carry), 0);
                self.lead_dropped = true;
            }
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    fn finish(mut self) -> Vec<u8> {
        // smallest multiple of 2^24 inside [low, low+range): range >= 2^24
        // guarantees it exists, and only its top byte is nonzero.
        let val = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
        debug_assert!(val >= self.low && val - self.low < self.range as u64);
        self.low = val;
        self.shift_low();
        self.shift_low();
        self.out
    }
}

struct RangeDecoder<'a> {
    payload: &'a [u8],
    pos: usize,
    code: u64,
    range: u32,
    pad_used: usize,
    pad_limit: Option<usize>,
}

impl<'a> RangeDecoder<'a> {
    fn new(payload: &'a [u8], pad_limit: Option<usize>) -> Result<Self> {
        let mut d = Self {
            payload,
            pos: 0,
            code: 0,
            range: u32::MAX,
            pad_used: 0,
            pad_limit,
        };
        for _ in 0..4 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos < self.payload.len() {
            let b = self.payload[self.pos];
            self.pos += 1;
            return Ok(b);
        }
        self.pad_used += 1;
        if let Some(limit) = self.pad_limit {
            // a well-formed payload needs at most `limit` implicit zeros
            if self.pad_used > limit {
                return Err(Error::Decode(format!(
                    "payload truncated: needed byte {} of a {}-byte payload",
                    self.pos + self.pad_used,
                    self.payload.len()
                )));
            }
        }
        Ok(0)
    }

    fn decode(&mut self, pmf: &crate::entropy::ChannelPmf) -> Result<i32> {
        let r = self.range >> 16;
        let dv = ((self.code / r as u64) as u32).min((1 << 16) - 1);
        let sym = pmf.symbol_at(dv);
        let (cum, freq) = pmf.range_of(sym);
        self.code -= r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = ((self.code << 8) | b as u64) & WINDOW_MASK;
            self.range <<= 8;
        }
        Ok(sym)
    }
}

/// Encodes a symbol grid against per-channel tables. Deterministic; errors if
/// any symbol lies outside its channel's support (clamping is the caller's job).
pub fn rc_encode(symbols: &SymbolGrid, tables: &PmfTable) -> Result<Vec<u8>> {
    let [c, h, w] = symbols.dims();
    if tables.num_channels() < c {
        return Err(Error::Contract(format!(
            "{} channels but table has {}",
            c,
            tables.num_channels()
        )));
    }
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    let vals = symbols.values();
    for ch in 0..c {
        let pmf = tables.channel(ch);
        for &v in &vals[ch * h * w..(ch + 1) * h * w] {
            if !pmf.contains(v) {
                return Err(Error::Contract(format!(
                    "symbol {} outside support [{}, {}] of channel {}",
                    v, pmf.q_min, pmf.q_max, ch
                )));
            }
            let (cum, freq) = pmf.range_of(v);
            enc.encode(cum, freq);
        }
    }
    Ok(enc.finish())
}

/// Exact inverse of [`rc_encode`] for matching tables and dims. Detects
/// truncated payloads; a payload encoded with *different* tables decodes to
/// garbage (integrity checks belong to the bitstream header).
pub fn rc_decode(payload: &[u8], tables: &PmfTable, dims: [usize; 3]) -> Result<SymbolGrid> {
    // a well-formed payload needs exactly 3 implicit zero bytes
    rc_decode_inner(payload, tables, dims, Some(3))
}

/// Like [`rc_decode`] but total: exhausted payloads read as zeros instead of
/// erroring. Used by experiment modes that decode with a mismatched model on
/// purpose, where the renormalization schedule no longer matches the encoder.
pub fn rc_decode_tolerant(payload: &[u8], tables: &PmfTable, dims: [usize; 3]) -> Result<SymbolGrid> {
    rc_decode_inner(payload, tables, dims, None)
}

fn rc_decode_inner(
    payload: &[u8],
    tables: &PmfTable,
    dims: [usize; 3],
    pad_limit: Option<usize>,
) -> Result<SymbolGrid> {
    let [c, h, w] = dims;
    let n = c * h * w;
    if n == 0 {
        return SymbolGrid::new(dims, Vec::new());
    }
    if tables.num_channels() < c {
        return Err(Error::Contract(format!(
            "{} channels but table has {}",
            c,
            tables.num_channels()
        )));
    }
    if payload.is_empty() {
        return Err(Error::Decode(format!(
            "empty payload cannot hold {} symbols",
            n
        )));
    }
    let mut dec = RangeDecoder::new(payload, pad_limit)?;
    let mut vals = Vec::with_capacity(n);
    for ch in 0..c {
        let pmf = tables.channel(ch);
        for _ in 0..h * w {
            vals.push(dec.decode(pmf)?);
        }
    }
    SymbolGrid::new(dims, vals)
}

/// Information content in bits of `symbols` under the integer tables:
/// sum of -log2(freq/2^16). The companion bound for payload-size tests.
pub fn information_bits(symbols: &SymbolGrid, tables: &PmfTable) -> f64 {
    let [c, h, w] = symbols.dims();
    let mut acc = 0.0f64;
    for ch in 0..c {
        let pmf = tables.channel(ch);
        for &v in &symbols.values()[ch * h * w..(ch + 1) * h * w] {
            let (_, f) = pmf.range_of(v);
            acc -= (f as f64 / crate::entropy::FREQ_TOTAL as f64).log2();
        }
    }
    acc
}
