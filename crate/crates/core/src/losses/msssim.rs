//! Differentiable multi-scale SSIM on `(B, C, H, W)` tensors in `[0, 1]`.
//!
//! Gaussian window 11 with σ = 1.5, valid filtering, `C1 = 0.01²`,
//! `C2 = 0.03²`, 2×2 average pooling between scales. The five standard
//! scale weights are truncated to the scales whose side still covers the
//! window and renormalised; inputs smaller than the window use a single
//! scale with the largest odd window that fits.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Floor applied before fractional powers so gradients stay finite.
const POW_FLOOR: f64 = 1e-6;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Window size and the number of scales used for a given shorter side.
pub fn plan(min_side: usize) -> (usize, usize) {
    if min_side < WINDOW {
        let w = if min_side % 2 == 1 { min_side } else { min_side.saturating_sub(1) };
        return (w.max(1), 1);
    }
    let mut levels = 1;
    while levels < MS_SSIM_WEIGHTS.len() && (min_side >> levels) >= WINDOW {
        levels += 1;
    }
    (WINDOW, levels)
}

/// Normalised weights for `levels` scales.
pub fn level_weights(levels: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..levels];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn filter(x: &Tensor, kernel: &[f64]) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let k = kernel.len();
    let kx = Tensor::from_slice(kernel, (1, 1, 1, k), x.device())?.to_dtype(x.dtype())?;
    let ky = kx.reshape((1, 1, k, 1))?;
    let flat = x.reshape((b * c, 1, h, w))?;
    let out = flat.conv2d(&kx, 0, 1, 1, 1)?.conv2d(&ky, 0, 1, 1, 1)?;
    let (_, _, oh, ow) = out.dims4()?;
    Ok(out.reshape((b, c, oh, ow))?)
}

/// `(luminance·cs, cs)` means over space, each `(B, C)`.
fn ssim_terms(x: &Tensor, y: &Tensor, kernel: &[f64]) -> Result<(Tensor, Tensor)> {
    let mu_x = filter(x, kernel)?;
    let mu_y = filter(y, kernel)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (filter(&x.sqr()?, kernel)? - &mu_xx)?;
    let s_yy = (filter(&y.sqr()?, kernel)? - &mu_yy)?;
    let s_xy = (filter(&(x * y)?, kernel)? - &mu_xy)?;
    let cs = ((s_xy * 2.0)? + C2)?.div(&((s_xx + s_yy)? + C2)?)?;
    let lum = ((mu_xy * 2.0)? + C1)?.div(&((mu_xx + mu_yy)? + C1)?)?;
    let ssim = (lum * &cs)?;
    let mean = |t: &Tensor| -> Result<Tensor> { Ok(t.flatten_from(2)?.mean(D::Minus1)?) };
    Ok((mean(&ssim)?, mean(&cs)?))
}

/// MS-SSIM averaged over batch and channels; a scalar tensor.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let (_, _, h, w) = x.dims4()?;
    let (win, levels) = plan(h.min(w));
    let kernel = gaussian_window(win, SIGMA);
    let weights = level_weights(levels);
    let mut x = x.clone();
    let mut y = y.clone();
    let mut acc: Option<Tensor> = None;
    for (l, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, &kernel)?;
        let last = l + 1 == levels;
        let term = if last { ssim } else { cs };
        let term = term.clamp(POW_FLOOR, f64::INFINITY)?.powf(wt)?;
        acc = Some(match acc {
            Some(a) => (a * term)?,
            None => term,
        });
        if !last {
            x = x.avg_pool2d(2)?;
            y = y.avg_pool2d(2)?;
        }
    }
    let acc = acc.ok_or_else(|| Error::shape("empty image"))?;
    Ok(acc.mean_all()?)
}

/// Single-scale SSIM with the same window; a scalar tensor.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (win, _) = plan(h.min(w));
    let (s, _) = ssim_terms(x, y, &gaussian_window(win, SIGMA))?;
    Ok(s.mean_all()?)
}
