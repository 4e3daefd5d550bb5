use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dOpts, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable Gaussian blur, per channel.
fn blur<'t, T: Scalar>(x: &Var<'t, T>, rows: &Var<'t, T>, cols: &Var<'t, T>, channels: usize) -> Result<Var<'t, T>> {
    let opts = Conv2dOpts { groups: channels, ..Conv2dOpts::default() };
    x.conv2d(rows, None, opts)?.conv2d(cols, None, opts)
}

/// Mean SSIM over every valid window position and channel. Differentiable
/// in both arguments.
pub fn ssim<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "ssim", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (_, c, h, w) = a.value().dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let tape = a.tape();
    let taps: Vec<f64> = (0..c).flat_map(|_| gaussian_taps()).collect();
    let rows = tape.constant(Tensor::from_f64(vec![c, 1, 1, SSIM_WINDOW], &taps)?);
    let cols = tape.constant(Tensor::from_f64(vec![c, 1, SSIM_WINDOW, 1], &taps)?);
    let mu_a = blur(a, &rows, &cols, c)?;
    let mu_b = blur(b, &rows, &cols, c)?;
    let mu_aa = mu_a.square()?;
    let mu_bb = mu_b.square()?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = blur(&a.square()?, &rows, &cols, c)?.sub(&mu_aa)?;
    let var_b = blur(&b.square()?, &rows, &cols, c)?.sub(&mu_bb)?;
    let cov = blur(&a.mul(b)?, &rows, &cols, c)?.sub(&mu_ab)?;
    let (c1, c2) = (T::lit(C1), T::lit(C2));
    let num = mu_ab.scale(T::lit(2.0))?.add_scalar(c1)?.mul(&cov.scale(T::lit(2.0))?.add_scalar(c2)?)?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(c1)?.mul(&var_a.add(&var_b)?.add_scalar(c2)?)?;
    num.div(&den)?.mean_all()
}

/// SSIM of two `[N, C, H, W]` tensors, evaluated without gradient tracking.
pub fn ssim_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let tape = Tape::new();
    Ok(ssim(&tape.constant(a.clone()), &tape.constant(b.clone()))?.value().item().as_f64())
}

/// `10 log10(1 / MSE)` for images in [0, 1]; capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "psnr", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    if a.numel() == 0 {
        return Err(Error::invalid("psnr", "empty image"));
    }
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}
