//! Intermediate outputs of one inference: raw tensors in checkpoint format
//! plus PNG views of the sub-sampled predictions and fused features.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use elf_core::data::{save_png, Image};
use elf_core::model::Elf;
use elf_core::train::checkpoint;
use elf_core::{ParamStore32, Tensor32};

pub const TENSORS: &str = "intermediates.ckpt";

/// Feature maps tiled in a near-square grid, each channel min-max
/// stretched to the full range and shown in gray.
pub fn feature_grid(t: &Tensor32) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let mut img = Image::filled(cols * w, rows * h, 0.0);
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (ox, oy) = ((ch % cols) * w, (ch / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let v = (plane[y * w + x] - lo) / span;
                for k in 0..3 {
                    img.set(k, oy + y, ox + x, v);
                }
            }
        }
    }
    Ok(img)
}

/// Derains `rainy` and writes its intermediates into `dir`.
pub fn derain_with_dump(model: &Elf, params: &ParamStore32, rainy: &Image, dir: &Path) -> Result<Image> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let padded = rainy.pad_to_multiple(model.cfg.spatial_multiple());
    let inf = model.infer(params, &padded.to_tensor::<f32>())?;

    let mut store = ParamStore32::default();
    store.insert("rainy_sub", inf.rainy_sub.clone());
    store.insert("rain_pred_sub", inf.rain_pred_sub.clone());
    store.insert("derained_sub", inf.derained_sub.clone());
    store.insert("derained_full", inf.derained_full.clone());
    store.insert("f_bt", inf.f_bt.clone());
    store.insert("f_b_s", inf.f_b_s.clone());
    for (i, a) in inf.attention.iter().enumerate() {
        store.insert(format!("attention.{i:02}.{}", a.layer), a.map.clone());
    }
    checkpoint::save(&store, dir.join(TENSORS))?;

    save_png(&Image::from_tensor(&inf.rain_pred_sub, 0)?.clamped(), dir.join("rain_pred_sub.png"))?;
    save_png(&Image::from_tensor(&inf.derained_sub, 0)?.clamped(), dir.join("derained_sub.png"))?;
    save_png(&feature_grid(&inf.f_bt)?, dir.join("f_bt.png"))?;
    save_png(&feature_grid(&inf.f_b_s)?, dir.join("f_b_s.png"))?;

    Ok(Image::from_tensor(&inf.derained_full, 0)?.crop(0, 0, rainy.width(), rainy.height())?.clamped())
}
