use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::rain::SamplePair;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

fn data_err(path: &Path, msg: impl ToString) -> Error {
    Error::Data { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Loads an 8-bit PNG; grayscale and alpha variants are converted to RGB.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| data_err(path, e))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Image::new(w, h, data)
}

/// Quantizes `round(v * 255)` after clamping to [0, 1].
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * n);
    for i in 0..n {
        buf.extend([quantize(d[i]), quantize(d[n + i]), quantize(d[2 * n + i])]);
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).ok_or_else(|| data_err(path, "bad image buffer"))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|e| data_err(path, e))
}

/// `n` random windows of `patch×patch`, the same window cut from both images.
pub fn crop_patches(pair: &SamplePair, patch: usize, n: usize, multiple: usize, seed: u64) -> Result<Vec<SamplePair>> {
    let (w, h) = (pair.clean.width(), pair.clean.height());
    if (pair.rainy.width(), pair.rainy.height()) != (w, h) {
        return Err(Error::ShapeMismatch { op: "crop", lhs: vec![h, w], rhs: vec![pair.rainy.height(), pair.rainy.width()] });
    }
    if patch == 0 || patch > w || patch > h {
        return Err(Error::invalid("crop", format!("patch {patch} does not fit {w}x{h}")));
    }
    if multiple > 0 && patch % multiple != 0 {
        return Err(Error::invalid("crop", format!("patch {patch} is not a multiple of {multiple}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x = rng.gen_range(0..=w - patch);
            let y = rng.gen_range(0..=h - patch);
            Ok(SamplePair {
                id: format!("{}_p{i}", pair.id),
                rainy: pair.rainy.crop(x, y, patch, patch)?,
                clean: pair.clean.crop(x, y, patch, patch)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

/// Parses `id<TAB>rainy<TAB>clean` lines; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(data_err(path, format!("line {}: expected id, rainy and clean separated by tabs", lineno + 1)));
        }
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            rainy: base.join(fields[1]),
            clean: base.join(fields[2]),
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let manifest = dir.as_ref().join(MANIFEST);
    read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            let rainy = load_png(&e.rainy)?;
            let clean = load_png(&e.clean)?;
            if (rainy.width(), rainy.height()) != (clean.width(), clean.height()) {
                return Err(data_err(&e.rainy, format!("extents differ from {}", e.clean.display())));
            }
            Ok(SamplePair { id: e.id, rainy, clean })
        })
        .collect()
}

/// Writes `rainy/<id>.png`, `clean/<id>.png` and the manifest under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, pairs: &[SamplePair]) -> Result<()> {
    let dir = dir.as_ref();
    let mut manifest = String::new();
    for p in pairs {
        if p.id.is_empty() || p.id.contains(['\t', '\n', '/', '\\']) {
            return Err(data_err(dir, format!("invalid sample id {:?}", p.id)));
        }
        let rainy = format!("rainy/{}.png", p.id);
        let clean = format!("clean/{}.png", p.id);
        save_png(&p.rainy, dir.join(&rainy))?;
        save_png(&p.clean, dir.join(&clean))?;
        manifest.push_str(&format!("{}\t{rainy}\t{clean}\n", p.id));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}
