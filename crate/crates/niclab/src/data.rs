//! Dataset ingestion: image IO, line-oriented manifests with fingerprints,
//! seeded patch sampling, and the synthetic two-domain generators used by
//! the desk-scale experiments.
//!
//! The two synthetic domains are deliberately far apart: `smooth` images are
//! mixtures of low-frequency Gaussian blobs, `texture` images are
//! high-frequency oriented gratings and checkers with random phase. Real
//! datasets plug in through the same manifest format.

use crate::digest::Fnv1a;
use crate::error::{Error, Result};
use crate::pipeline::image_to_tensor;
use crate::tensor::Tensor;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::{Path, PathBuf};

/// Loads any supported image file as 8-bit RGB.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Saves as PNG or binary PPM depending on the extension.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Path relative to the manifest's directory (or absolute).
    pub path: String,
}

/// Line-oriented dataset manifest:
///
/// ```text
/// # niclab manifest v1
/// name <label>
/// fingerprint <hex of the entry list>
/// train <relative path>
/// eval <relative path>
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory entries are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for e in &self.entries {
            h.write(format!("{} {}\n", e.split, e.path).as_bytes());
        }
        h.finish()
    }

    pub fn files(&self, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.root.join(&e.path))
            .collect()
    }

    /// Loads and decodes every image of a split, verifying readability.
    pub fn load_images(&self, split: Split) -> Result<Vec<RgbImage>> {
        let files = self.files(split);
        if files.is_empty() {
            return Err(Error::Contract(format!(
                "manifest '{}' has no {} images",
                self.name, split
            )));
        }
        files.iter().map(|p| load_image(p)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::from("# niclab manifest v1\n");
        s.push_str(&format!("name {}\n", self.name));
        s.push_str(&format!("fingerprint {:016x}\n", self.fingerprint()));
        for e in &self.entries {
            s.push_str(&format!("{} {}\n", e.split, e.path));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Reads a manifest and verifies its stored fingerprint.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut name = String::new();
        let mut stored_fp: Option<u64> = None;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(' ').ok_or(Error::Format {
                offset: ln as u64,
                msg: format!("manifest line {} has no value", ln + 1),
            })?;
            match key {
                "name" => name = rest.to_string(),
                "fingerprint" => {
                    stored_fp = Some(u64::from_str_radix(rest, 16).map_err(|_| Error::Format {
                        offset: ln as u64,
                        msg: format!("bad fingerprint '{}'", rest),
                    })?)
                }
                "train" => entries.push(ManifestEntry { split: Split::Train, path: rest.into() }),
                "eval" => entries.push(ManifestEntry { split: Split::Eval, path: rest.into() }),
                other => {
                    return Err(Error::Format {
                        offset: ln as u64,
                        msg: format!("unknown manifest key '{}'", other),
                    })
                }
            }
        }
        let m = Self { name, root, entries };
        if let Some(fp) = stored_fp {
            let actual = m.fingerprint();
            if fp != actual {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!(
                        "manifest fingerprint mismatch: stored {:016x}, computed {:016x}",
                        fp, actual
                    ),
                });
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Smooth,
    Texture,
}

impl std::str::FromStr for DomainKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "texture" => Ok(Self::Texture),
            other => Err(Error::Contract(format!("unknown domain kind '{}'", other))),
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Smooth => "smooth",
            Self::Texture => "texture",
        })
    }
}

/// One synthetic image; deterministic per rng state.
pub fn synth_image(kind: DomainKind, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut planes = vec![0.0f64; 3 * size * size];
    match kind {
        DomainKind::Smooth => {
            let base: [f64; 3] = [
                rng.gen_range(90.0..160.0),
                rng.gen_range(90.0..160.0),
                rng.gen_range(90.0..160.0),
            ];
            for c in 0..3 {
                planes[c * size * size..(c + 1) * size * size].fill(base[c]);
            }
            let blobs = rng.gen_range(4..=8);
            for _ in 0..blobs {
                let cx: f64 = rng.gen_range(0.0..size as f64);
                let cy: f64 = rng.gen_range(0.0..size as f64);
                let sigma: f64 = rng.gen_range(size as f64 / 6.0..size as f64 / 3.0);
                let amp: [f64; 3] = [
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-60.0..60.0),
                ];
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        for c in 0..3 {
                            planes[c * size * size + y * size + x] += amp[c] * g;
                        }
                    }
                }
            }
        }
        DomainKind::Texture => {
            let base: [f64; 3] = [
                rng.gen_range(60.0..190.0),
                rng.gen_range(60.0..190.0),
                rng.gen_range(60.0..190.0),
            ];
            for c in 0..3 {
                planes[c * size * size..(c + 1) * size * size].fill(base[c]);
            }
            let gratings = rng.gen_range(2..=4);
            for _ in 0..gratings {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let omega: f64 = rng.gen_range(0.25..0.9);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp: [f64; 3] = [
                    rng.gen_range(15.0..45.0),
                    rng.gen_range(15.0..45.0),
                    rng.gen_range(15.0..45.0),
                ];
                let (ct, st) = (theta.cos(), theta.sin());
                for y in 0..size {
                    for x in 0..size {
                        let u = omega * (x as f64 * ct + y as f64 * st) + phase;
                        let s = u.sin();
                        for c in 0..3 {
                            planes[c * size * size + y * size + x] += amp[c] * s;
                        }
                    }
                }
            }
            // checker field with random orientation and phase
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (ct, st) = (theta.cos(), theta.sin());
            let (w1, w2): (f64, f64) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6));
            let (p1, p2): (f64, f64) =
                (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
            let amp: f64 = rng.gen_range(15.0..35.0);
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 * ct + y as f64 * st;
                    let v = -(x as f64) * st + y as f64 * ct;
                    let s = (w1 * u + p1).sin().signum() * (w2 * v + p2).sin().signum();
                    for c in 0..3 {
                        planes[c * size * size + y * size + x] += amp * s;
                    }
                }
            }
        }
    }
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let px = [
                planes[y * size + x].round().clamp(0.0, 255.0) as u8,
                planes[size * size + y * size + x].round().clamp(0.0, 255.0) as u8,
                planes[2 * size * size + y * size + x].round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Mean spatial gradient magnitude (forward differences, all channels).
/// The statistic separating the two synthetic domains.
pub fn mean_gradient_magnitude(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = img.get_pixel(x as u32, y as u32);
            let px = img.get_pixel(x as u32 + 1, y as u32);
            let py = img.get_pixel(x as u32, y as u32 + 1);
            for c in 0..3 {
                let dx = p.0[c] as f64 - px.0[c] as f64;
                let dy = p.0[c] as f64 - py.0[c] as f64;
                acc += (dx * dx + dy * dy).sqrt();
                n += 1;
            }
        }
    }
    acc / n as f64
}

/// Generates `n` images of one synthetic domain into `out_dir` (PNG), tags
/// roughly 1 in 5 (at least one) as eval, and writes `manifest.txt`.
pub fn synth_domain(
    kind: DomainKind,
    n: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n < 1 {
        return Err(Error::Contract("synth_domain: n must be >= 1".into()));
    }
    if size == 0 || size % 16 != 0 {
        return Err(Error::Contract("synth_domain: size must be a positive multiple of 16".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_eval = if n == 1 { 0 } else { n.div_ceil(5).max(1) };
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let img = synth_image(kind, size, &mut rng);
        let file = format!("{}_{:03}.png", kind, i);
        save_image(&img, &out_dir.join(&file))?;
        let split = if i >= n - n_eval && n > 1 { Split::Eval } else { Split::Train };
        entries.push(ManifestEntry { split, path: file });
    }
    let manifest = DatasetManifest {
        name: kind.to_string(),
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Seeded uniform random crops from in-memory images, as 0-255 tensors.
pub fn sample_patches_from(
    images: &[RgbImage],
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::Contract("sample_patches: no images".into()));
    }
    for img in images {
        if (img.width() as usize) < patch || (img.height() as usize) < patch {
            return Err(Error::Contract(format!(
                "patch {} larger than image {}x{}",
                patch,
                img.width(),
                img.height()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let img = &images[rng.gen_range(0..images.len())];
        let x0 = rng.gen_range(0..=img.width() - patch as u32);
        let y0 = rng.gen_range(0..=img.height() - patch as u32);
        let view = image::imageops::crop_imm(img, x0, y0, patch as u32, patch as u32).to_image();
        out.push(image_to_tensor(&view));
    }
    Ok(out)
}

/// Manifest-level variant of [`sample_patches_from`].
pub fn sample_patches(
    manifest: &DatasetManifest,
    split: Split,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let images = manifest.load_images(split)?;
    sample_patches_from(&images, patch, count, seed)
}
