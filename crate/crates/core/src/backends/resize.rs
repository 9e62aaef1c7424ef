use candle_core::Tensor;

use crate::error::Result;

/// Interpolation matrix of shape `(out, input)` for half-pixel-centre bilinear
/// sampling (no antialiasing), matching the usual `align_corners = false`.
fn interp_matrix(input: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a `(B, C, H, W)` tensor, expressed as two
/// matrix products so gradients flow through ordinary matmuls.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(interp_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let flat = x.reshape((b * c, h, w))?;
    let rows = ry.broadcast_left(b * c)?.contiguous()?.matmul(&flat.contiguous()?)?;
    let both = rows.matmul(&rx.t()?.broadcast_left(b * c)?.contiguous()?)?;
    Ok(both.reshape((b, c, out_h, out_w))?.contiguous()?)
}
