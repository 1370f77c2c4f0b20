//! Rate-distortion measurement: PSNR, RD curves, BD-rate, and the
//! forgetting/compatibility experiment driver.
//!
//! Rates are always measured from emitted bitstream bytes (header included),
//! never from entropy estimates. PSNR is average RGB over all channels and
//! pixels; bit-identical images report a lossless sentinel of 99 dB so curve
//! math stays finite. BD-rate uses the classic cubic-polynomial form: fit
//! log10(bpp) against PSNR per curve, average the gap over the common PSNR
//! interval, and convert back to a percentage.

use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::pipeline::{decode_image, encode_image, Bitstream, DecodeOptions};
use image::RgbImage;
use std::path::Path;

/// Capped sentinel reported for lossless (or near-lossless) reconstructions.
pub const PSNR_LOSSLESS_SENTINEL: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub lossless: bool,
}

/// Average-RGB PSNR in dB between two same-sized 8-bit images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<Psnr> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Contract(format!(
            "psnr: dimension mismatch {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let m = mse(a, b);
    if m == 0.0 {
        return Ok(Psnr { db: PSNR_LOSSLESS_SENTINEL, lossless: true });
    }
    let db = 10.0 * (255.0f64 * 255.0 / m).log10();
    Ok(Psnr { db: db.min(PSNR_LOSSLESS_SENTINEL), lossless: false })
}

/// Mean squared error over all channels and pixels, f64 accumulation.
pub fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    let mut acc = 0.0f64;
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for ch in 0..3 {
            let d = pa.0[ch] as f64 - pb.0[ch] as f64;
            acc += d * d;
        }
    }
    acc / (3.0 * a.width() as f64 * a.height() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub lambda: f64,
    /// bits per pixel of the actual bitstream, header included
    pub bpp: f64,
    pub psnr: f64,
    pub lossless: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    pub domain: String,
    pub codec: String,
    pub time: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts points by bpp and checks the curve is strictly increasing.
    pub fn new(domain: &str, codec: &str, time: &str, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Eval("empty RD curve".into()));
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::Eval("RD curve has non-increasing bpp".into()));
        }
        Ok(Self {
            domain: domain.into(),
            codec: codec.into(),
            time: time.into(),
            points,
        })
    }
}

/// Cubic least-squares fit of log10(bpp) against (PSNR - mean PSNR).
/// Returns (coefficients low-to-high degree, the PSNR shift).
pub fn fit_log_cubic(points: &[RdPoint]) -> Result<([f64; 4], f64)> {
    if points.len() < 4 {
        return Err(Error::Eval(format!(
            "cubic fit needs >= 4 points, got {}",
            points.len()
        )));
    }
    let shift = points.iter().map(|p| p.psnr).sum::<f64>() / points.len() as f64;
    // normal equations A^T A c = A^T y with A[i] = [1, x, x^2, x^3]
    let mut ata = [[0.0f64; 4]; 4];
    let mut aty = [0.0f64; 4];
    for p in points {
        let x = p.psnr - shift;
        let y = p.bpp.log10();
        let row = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            aty[i] += row[i] * y;
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let c = solve4(ata, aty)?;
    Ok((c, shift))
}

/// Gaussian elimination with partial pivoting for a 4x4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Eval("singular system in polynomial fit".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

fn poly_eval(c: &[f64; 4], x: f64) -> f64 {
    c[0] + x * (c[1] + x * (c[2] + x * c[3]))
}

/// Antiderivative of the cubic evaluated at x.
fn poly_integral(c: &[f64; 4], x: f64) -> f64 {
    x * (c[0] + x * (c[1] / 2.0 + x * (c[2] / 3.0 + x * c[3] / 4.0)))
}

/// Classic Bjontegaard delta rate in percent: average bitrate difference of
/// `test` against `reference` at equal quality over the common PSNR range.
/// Positive means `test` spends more bits.
pub fn bd_rate(reference: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (cr, sr) = fit_log_cubic(&reference.points)?;
    let (ct, st) = fit_log_cubic(&test.points)?;
    let min_psnr = |c: &RdCurve| c.points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
    let max_psnr = |c: &RdCurve| c.points.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
    let lo = min_psnr(reference).max(min_psnr(test));
    let hi = max_psnr(reference).min(max_psnr(test));
    if hi <= lo {
        return Err(Error::Eval(format!(
            "no PSNR overlap between curves ([{:.2}, {:.2}])",
            lo, hi
        )));
    }
    let int_ref = poly_integral(&cr, hi - sr) - poly_integral(&cr, lo - sr);
    let int_test = poly_integral(&ct, hi - st) - poly_integral(&ct, lo - st);
    let avg_diff = (int_test - int_ref) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Evaluates the fitted log10(bpp) of a curve at a PSNR value (test hook for
/// integration oracles).
pub fn fitted_log_bpp(curve: &RdCurve, at_psnr: f64) -> Result<f64> {
    let (c, s) = fit_log_cubic(&curve.points)?;
    Ok(poly_eval(&c, at_psnr - s))
}

/// Mean measurements of one model over an image set.
#[derive(Debug, Clone, Copy)]
pub struct RdSummary {
    pub bpp: f64,
    pub psnr: f64,
    pub mse: f64,
    pub lossless: bool,
}

/// Encodes and decodes every image, averaging actual bpp, PSNR, and MSE.
pub fn mean_rd(model: &CodecModel, use_version: u8, images: &[RgbImage]) -> Result<RdSummary> {
    if images.is_empty() {
        return Err(Error::Contract("mean_rd: empty image set".into()));
    }
    let mut bpp = 0.0;
    let mut db = 0.0;
    let mut ms = 0.0;
    let mut lossless = true;
    for img in images {
        let bs = encode_image(img, model, use_version)?;
        let recon = decode_image(&bs, model, DecodeOptions::default())?;
        let p = psnr(img, &recon)?;
        bpp += bs.bpp();
        db += p.db;
        ms += mse(img, &recon);
        lossless &= p.lossless;
    }
    let n = images.len() as f64;
    Ok(RdSummary { bpp: bpp / n, psnr: db / n, mse: ms / n, lossless })
}

/// Encodes a dataset with one model per lambda and averages into an RD curve.
pub fn rd_sweep(
    images: &[RgbImage],
    models: &[(f64, &CodecModel)],
    domain: &str,
    codec: &str,
    time: &str,
) -> Result<RdCurve> {
    if models.is_empty() {
        return Err(Error::Contract("rd_sweep: no models".into()));
    }
    let mut points = Vec::with_capacity(models.len());
    for (lambda, model) in models {
        let s = mean_rd(model, model.version, images)?;
        points.push(RdPoint { lambda: *lambda, bpp: s.bpp, psnr: s.psnr, lossless: s.lossless });
    }
    RdCurve::new(domain, codec, time, points)
}

/// One row of the forgetting report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub domain: String,
    /// "t1", "t2_naive", "t2_cawf", or "cross_t2_decodes_t1"
    pub mode: String,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
    pub lossless: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    Naive,
    Cawf,
}

impl AdaptMode {
    fn label(&self) -> &'static str {
        match self {
            AdaptMode::Naive => "t2_naive",
            AdaptMode::Cawf => "t2_cawf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub rows: Vec<ReportRow>,
}

/// Runs the forgetting/compatibility experiment for one adapted model.
///
/// Per domain, measures the source codec (t = 1) and the adapted codec
/// (t = 2); then the cross-version decode of source-domain t = 1 bitstreams
/// through the t = 2 decoder. For `Naive` that decode bypasses the hash
/// check on purpose (the catastrophic case); for `Cawf` it routes through
/// the embedded version-1 codec and must reproduce t = 1 exactly.
///
/// Under `Cawf`, source-domain content at t = 2 keeps using the embedded
/// version-1 codec (the backward-compatible route), so its row is expected
/// to reproduce the t = 1 row exactly; the target domain uses version 2.
///
/// With `artifacts`, per-image PNGs are written: `err_*` (absolute
/// difference against the original) and `interf_*` (absolute difference
/// against the t = 1 reconstruction).
pub fn forgetting_report(
    source_images: &[RgbImage],
    target_images: &[RgbImage],
    model_t1: &CodecModel,
    model_t2: &CodecModel,
    mode: AdaptMode,
    artifacts: Option<&Path>,
) -> Result<ForgettingReport> {
    if mode == AdaptMode::Cawf && model_t2.shared_hash() != model_t1.shared_hash() {
        return Err(Error::Contract(
            "forgetting_report: t2 model does not embed the t1 model (hash lineage mismatch)".into(),
        ));
    }
    let mut rows = Vec::with_capacity(5);
    for (domain, images) in [("source", source_images), ("target", target_images)] {
        let s1 = mean_rd(model_t1, model_t1.version, images)?;
        rows.push(ReportRow {
            domain: domain.into(),
            mode: "t1".into(),
            mean_bpp: s1.bpp,
            mean_psnr: s1.psnr,
            lossless: s1.lossless,
        });
        let t2_version = if mode == AdaptMode::Cawf && domain == "source" {
            1
        } else {
            model_t2.version
        };
        let s2 = mean_rd(model_t2, t2_version, images)?;
        rows.push(ReportRow {
            domain: domain.into(),
            mode: mode.label().into(),
            mean_bpp: s2.bpp,
            mean_psnr: s2.psnr,
            lossless: s2.lossless,
        });
        if let Some(dir) = artifacts {
            write_artifacts(dir, domain, mode.label(), t2_version, images, model_t1, model_t2)?;
        }
    }
    // cross-version: decode t1 source bitstreams with the t2 decoder
    let mut bpp = 0.0;
    let mut db = 0.0;
    let mut lossless = true;
    for img in source_images {
        let b1 = encode_image(img, model_t1, model_t1.version)?;
        let recon = cross_decode(&b1, model_t2, mode)?;
        let p = psnr(img, &recon)?;
        bpp += b1.bpp();
        db += p.db;
        lossless &= p.lossless;
    }
    let n = source_images.len() as f64;
    rows.push(ReportRow {
        domain: "source".into(),
        mode: "cross_t2_decodes_t1".into(),
        mean_bpp: bpp / n,
        mean_psnr: db / n,
        lossless,
    });
    Ok(ForgettingReport { rows })
}

fn cross_decode(b1: &Bitstream, model_t2: &CodecModel, mode: AdaptMode) -> Result<RgbImage> {
    let opts = DecodeOptions { allow_hash_mismatch: mode == AdaptMode::Naive };
    decode_image(b1, model_t2, opts)
}

fn abs_diff_image(a: &RgbImage, b: &RgbImage) -> RgbImage {
    let mut out = RgbImage::new(a.width(), a.height());
    for (x, y, p) in out.enumerate_pixels_mut() {
        let pa = a.get_pixel(x, y);
        let pb = b.get_pixel(x, y);
        *p = image::Rgb([
            pa.0[0].abs_diff(pb.0[0]),
            pa.0[1].abs_diff(pb.0[1]),
            pa.0[2].abs_diff(pb.0[2]),
        ]);
    }
    out
}

fn write_artifacts(
    dir: &Path,
    domain: &str,
    mode: &str,
    t2_version: u8,
    images: &[RgbImage],
    model_t1: &CodecModel,
    model_t2: &CodecModel,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        let b1 = encode_image(img, model_t1, model_t1.version)?;
        let r1 = decode_image(&b1, model_t1, DecodeOptions::default())?;
        let b2 = encode_image(img, model_t2, t2_version)?;
        let r2 = decode_image(&b2, model_t2, DecodeOptions::default())?;
        abs_diff_image(img, &r2)
            .save(dir.join(format!("err_{}_{}_{:03}.png", mode, domain, i)))?;
        abs_diff_image(&r1, &r2)
            .save(dir.join(format!("interf_{}_{}_{:03}.png", mode, domain, i)))?;
    }
    Ok(())
}

/// Merges a naive and a cawf report into the summary table: two domains
/// times three codecs (t1, t2 naive, t2 cawf) plus the catastrophic
/// cross-version row (naive decode of t1 streams).
pub fn merge_reports(naive: &ForgettingReport, cawf: &ForgettingReport) -> Vec<ReportRow> {
    let mut rows = Vec::with_capacity(7);
    let pick = |rep: &ForgettingReport, mode: &str| -> Vec<ReportRow> {
        rep.rows.iter().filter(|r| r.mode == mode).cloned().collect()
    };
    rows.extend(pick(naive, "t1"));
    rows.extend(pick(naive, "t2_naive"));
    rows.extend(pick(cawf, "t2_cawf"));
    rows.extend(
        naive
            .rows
            .iter()
            .filter(|r| r.mode == "cross_t2_decodes_t1")
            .cloned(),
    );
    rows
}

/// CSV with header `domain,mode,mean_bpp,mean_psnr,lossless`.
pub fn write_forgetting_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut s = String::from("domain,mode,mean_bpp,mean_psnr,lossless\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.domain, r.mode, r.mean_bpp, r.mean_psnr, r.lossless
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// CSV with header `domain,codec,time,lambda,bpp,psnr,lossless`.
pub fn write_rd_csv(path: &Path, curves: &[RdCurve]) -> Result<()> {
    let mut s = String::from("domain,codec,time,lambda,bpp,psnr,lossless\n");
    for c in curves {
        for p in &c.points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.domain, c.codec, c.time, p.lambda, p.bpp, p.psnr, p.lossless
            ));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Whitespace-separated `lambda bpp psnr` table, one block per curve,
/// loadable from gnuplot.
pub fn write_rd_dat(path: &Path, curves: &[RdCurve]) -> Result<()> {
    let mut s = String::new();
    for c in curves {
        s.push_str(&format!("# {} {} {}\nlambda bpp psnr\n", c.domain, c.codec, c.time));
        for p in &c.points {
            s.push_str(&format!("{} {} {}\n", p.lambda, p.bpp, p.psnr));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Parses a CSV written by [`write_rd_csv`] into one curve per
/// (domain, codec, time) group, in file order.
pub fn read_rd_csv(path: &Path) -> Result<Vec<RdCurve>> {
    let text = std::fs::read_to_string(path)?;
    let mut groups: Vec<(String, String, String, Vec<RdPoint>)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Format {
                offset: ln as u64,
                msg: format!("RD CSV line {} has {} columns, expected 7", ln + 1, cols.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Format {
                offset: ln as u64,
                msg: format!("bad {} '{}' on line {}", what, s, ln + 1),
            })
        };
        let point = RdPoint {
            lambda: parse(cols[3], "lambda")?,
            bpp: parse(cols[4], "bpp")?,
            psnr: parse(cols[5], "psnr")?,
            lossless: cols[6].trim() == "true",
        };
        let key = (cols[0].to_string(), cols[1].to_string(), cols[2].to_string());
        match groups.iter_mut().find(|(d, c, t, _)| (d, c, t) == (&key.0, &key.1, &key.2)) {
            Some((_, _, _, pts)) => pts.push(point),
            None => groups.push((key.0, key.1, key.2, vec![point])),
        }
    }
    groups
        .into_iter()
        .map(|(d, c, t, pts)| RdCurve::new(&d, &c, &t, pts))
        .collect()
}
