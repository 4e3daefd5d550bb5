use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CleanKind {
    Ramp,
    Checker,
    Blobs,
    Mixed,
}

impl fmt::Display for CleanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CleanKind::Ramp => "ramp",
            CleanKind::Checker => "checker",
            CleanKind::Blobs => "blobs",
            CleanKind::Mixed => "mixed",
        })
    }
}

impl FromStr for CleanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(CleanKind::Ramp),
            "checker" => Ok(CleanKind::Checker),
            "blobs" => Ok(CleanKind::Blobs),
            "mixed" => Ok(CleanKind::Mixed),
            _ => Err(Error::Config(format!("unknown image kind {s:?}"))),
        }
    }
}

/// Extents must be a positive multiple of this.
pub const SYNTH_MULTIPLE: usize = 4;

/// Deterministic procedural clean image of `size×size` pixels.
pub fn synth_clean(kind: CleanKind, size: usize, seed: u64) -> Result<Image> {
    if size == 0 || size % SYNTH_MULTIPLE != 0 {
        return Err(Error::invalid("synth", format!("size {size} is not a positive multiple of {SYNTH_MULTIPLE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        CleanKind::Ramp => ramp(size),
        CleanKind::Checker => checker(size, &mut rng),
        CleanKind::Blobs => blobs(size, &mut rng),
        CleanKind::Mixed => {
            let b = blobs(size, &mut rng);
            let c = checker(size, &mut rng);
            let r = ramp(size);
            let data = (0..b.data().len())
                .map(|i| 0.6 * b.data()[i] + 0.2 * c.data()[i] + 0.2 * r.data()[i])
                .collect();
            Image::new(size, size, data)?
        }
    })
}

fn ramp(size: usize) -> Image {
    let denom = (size * size - 1).max(1) as f32;
    let plane: Vec<f32> = (0..size * size).map(|i| i as f32 / denom).collect();
    let data = plane.iter().chain(&plane).chain(&plane).copied().collect();
    Image::new(size, size, data).expect("three planes")
}

/// 8×8 cells; per channel the two tones sum to 1, so the mean is exactly 0.5.
fn checker(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let cell = (size / 8).max(1);
    let mut img = Image::filled(size, size, 0.0);
    for c in 0..3 {
        let lo: f32 = rng.gen_range(0.05..0.35);
        for y in 0..size {
            for x in 0..size {
                let odd = (x / cell + y / cell) % 2 == 1;
                img.set(c, y, x, if odd { 1.0 - lo } else { lo });
            }
        }
    }
    img
}

/// Smooth sum of coloured Gaussian bumps over a dim background.
fn blobs(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f32;
    let base: [f32; 3] = [rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)];
    let bumps: Vec<_> = (0..6)
        .map(|_| {
            let cx = rng.gen_range(0.0..s);
            let cy = rng.gen_range(0.0..s);
            let sigma = rng.gen_range(s / 8.0..s / 3.0);
            let color: [f32; 3] = [rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)];
            (cx, cy, sigma, color)
        })
        .collect();
    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut v = base;
            for &(cx, cy, sigma, color) in &bumps {
                let g = (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    v[c] += color[c] * g;
                }
            }
            for (c, value) in v.iter().enumerate() {
                img.set(c, y, x, value.clamp(0.0, 0.85));
            }
        }
    }
    img
}
