use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// Streak generator settings. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainParams {
    /// Expected streaks per million pixels.
    pub streaks_per_mpx: f64,
    /// Degrees from horizontal.
    pub angle_deg: [f64; 2],
    pub length_px: [f64; 2],
    pub width_px: [f64; 2],
    pub intensity: [f64; 2],
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streaks_per_mpx: 5000.0,
            angle_deg: [60.0, 120.0],
            length_px: [8.0, 20.0],
            width_px: [1.0, 1.5],
            intensity: [0.15, 0.4],
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("rain: {msg}")));
        for (name, [lo, hi]) in
            [("angle_deg", self.angle_deg), ("length_px", self.length_px), ("width_px", self.width_px), ("intensity", self.intensity)]
        {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(&format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if !(self.streaks_per_mpx >= 0.0 && self.streaks_per_mpx.is_finite()) {
            return bad("streaks_per_mpx must be non-negative");
        }
        if self.intensity[0] <= 0.0 || self.intensity[1] > 1.0 {
            return bad("intensity must lie in (0, 1]");
        }
        if self.length_px[0] < 0.0 || self.width_px[0] <= 0.0 {
            return bad("length must be non-negative and width positive");
        }
        Ok(())
    }

    /// Streak count for an image of `pixels` pixels.
    pub fn streak_count(&self, pixels: usize) -> usize {
        (self.streaks_per_mpx * pixels as f64 / 1e6).round() as usize
    }

    fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    }
}

/// Rainy and clean views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub rainy: Image,
    pub clean: Image,
}

/// Achromatic additive rain layer. Each streak is an anti-aliased rotated
/// rectangle: per-pixel coverage is the product of the clipped across- and
/// along-axis distances to its edges.
pub fn rain_layer(width: usize, height: usize, rp: &RainParams) -> Result<Vec<f32>> {
    rp.validate()?;
    let mut layer = vec![0f32; width * height];
    let mut rng = ChaCha8Rng::seed_from_u64(rp.seed);
    for _ in 0..rp.streak_count(width * height) {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let theta = RainParams::draw(&mut rng, rp.angle_deg).to_radians();
        let len = RainParams::draw(&mut rng, rp.length_px);
        let wid = RainParams::draw(&mut rng, rp.width_px);
        let amp = RainParams::draw(&mut rng, rp.intensity);
        // image y grows downward
        let (dx, dy) = (theta.cos(), -theta.sin());
        let reach = len / 2.0 + wid / 2.0 + 1.0;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = (px * dx + py * dy).abs();
                let across = (-px * dy + py * dx).abs();
                let cov = (wid / 2.0 + 0.5 - across).clamp(0.0, 1.0) * (len / 2.0 + 0.5 - along).clamp(0.0, 1.0);
                if cov > 0.0 {
                    layer[y * width + x] += (amp * cov) as f32;
                }
            }
        }
    }
    Ok(layer)
}

/// `rainy = clamp(clean + R, 0, 1)` with `R` from [`rain_layer`].
pub fn add_rain(clean: &Image, rp: &RainParams, id: impl Into<String>) -> Result<SamplePair> {
    let (w, h) = (clean.width(), clean.height());
    let layer = rain_layer(w, h, rp)?;
    let mut rainy = clean.clone();
    for (i, v) in rainy.data_mut().iter_mut().enumerate() {
        let r = layer[i % (w * h)];
        if r > 0.0 {
            *v = (*v + r).clamp(0.0, 1.0);
        }
    }
    Ok(SamplePair { id: id.into(), rainy, clean: clean.clone() })
}
