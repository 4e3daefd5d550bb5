use super::image::Image;
use crate::error::{Error, Result};

pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// Normalized histogram of full-range luma over [0, 1].
pub fn y_histogram(img: &Image, bins: usize) -> Vec<f64> {
    let mut h = vec![0f64; bins.max(1)];
    let n = img.width() * img.height();
    if n == 0 {
        return h;
    }
    let d = img.data();
    for i in 0..n {
        let y = BT601[0] * d[i] as f64 + BT601[1] * d[n + i] as f64 + BT601[2] * d[2 * n + i] as f64;
        let b = ((y.clamp(0.0, 1.0) * h.len() as f64) as usize).min(h.len() - 1);
        h[b] += 1.0;
    }
    h.iter_mut().for_each(|v| *v /= n as f64);
    h
}

/// Pearson correlation of two equally long vectors.
pub fn hist_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch { op: "hist_correlation", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("hist_correlation", "zero-variance histogram"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Bilinear `1/s` then `s×` reconstruction.
pub fn down_up(img: &Image, factor: usize) -> Result<Image> {
    let tape = crate::tensor::Tape::<f64>::new();
    let x = tape.constant(img.to_tensor());
    let y = x
        .rescale(num_rational::Ratio::new(1, factor))?
        .rescale(num_rational::Ratio::from_integer(factor))?;
    Image::from_tensor(y.value(), 0)
}

/// Luma-histogram correlation between `img` and its down-up reconstruction.
pub fn down_up_correlation(img: &Image, factor: usize) -> Result<f64> {
    let rec = down_up(img, factor)?.clamped();
    hist_correlation(&y_histogram(img, 256), &y_histogram(&rec, 256))
}
