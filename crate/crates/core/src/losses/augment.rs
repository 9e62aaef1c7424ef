//! Patch gathering with optional random perspective warps.
//!
//! Every view is a square crop of a `(1, 3, H, W)` image, optionally warped
//! by a perspective transform inside the crop. A view's pixels are a fixed
//! bilinear combination of source pixels, so the whole batch is four
//! `index_select`s and a weighted sum, and gradients scatter back into the
//! image through the same indices.

use candle_core::Tensor;
use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Rect;

/// Maps output pixel coordinates `(x, y)` of a view to input coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perspective {
    coeffs: [f64; 8],
}

impl Perspective {
    pub fn identity() -> Self {
        Self {
            coeffs: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Transform sending each `end` corner to the matching `start` corner.
    pub fn from_corners(start: [[f64; 2]; 4], end: [[f64; 2]; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let [x, y] = end[i];
            let [u, v] = start[i];
            a.set_row(2 * i, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
            a.set_row(2 * i + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
            b[2 * i] = u;
            b[2 * i + 1] = v;
        }
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::DegenerateInput("perspective corners are collinear".into()))?;
        let mut coeffs = [0.0; 8];
        coeffs.copy_from_slice(sol.as_slice());
        Ok(Self { coeffs })
    }

    /// Random distortion of a `size`-pixel square: each corner moves inwards
    /// by up to `distortion · size/2` pixels along each axis.
    pub fn random(size: usize, distortion: f64, rng: &mut impl Rng) -> Result<Self> {
        let s = size as i64;
        let half = s / 2;
        let d = (distortion * half as f64) as i64;
        let mut pick = |a: i64, b: i64| rng.gen_range(a..=b);
        let tl = [pick(0, d), pick(0, d)];
        let tr = [pick(s - d - 1, s - 1), pick(0, d)];
        let br = [pick(s - d - 1, s - 1), pick(s - d - 1, s - 1)];
        let bl = [pick(0, d), pick(s - d - 1, s - 1)];
        let m = (s - 1) as f64;
        let start = [[0.0, 0.0], [m, 0.0], [m, m], [0.0, m]];
        let end = [tl, tr, br, bl].map(|[x, y]| [x as f64, y as f64]);
        Self::from_corners(start, end)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let c = &self.coeffs;
        let den = c[6] * x + c[7] * y + 1.0;
        ((c[0] * x + c[1] * y + c[2]) / den, (c[3] * x + c[4] * y + c[5]) / den)
    }
}

/// One view: a crop and the warp applied inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub rect: Rect,
    pub warp: Perspective,
}

/// Precomputed bilinear gather for a batch of equally sized views.
#[derive(Debug, Clone)]
pub struct ViewSampler {
    size: usize,
    count: usize,
    height: usize,
    width: usize,
    /// Four `(index, weight)` corner terms, each of length `count · size²`.
    terms: Vec<(Vec<u32>, Vec<f64>)>,
}

impl ViewSampler {
    pub fn new(views: &[View], height: usize, width: usize) -> Result<Self> {
        let size = views.first().map(|v| v.rect.size).unwrap_or(0);
        if views.iter().any(|v| v.rect.size != size || !v.rect.fits(height, width)) {
            return Err(Error::shape("views must share one size and lie inside the image"));
        }
        let n = views.len() * size * size;
        let mut terms: Vec<(Vec<u32>, Vec<f64>)> = (0..4).map(|_| (vec![0; n], vec![0.0; n])).collect();
        let mut k = 0;
        for v in views {
            for oy in 0..size {
                for ox in 0..size {
                    // Pixel centres sit at half-integer coordinates.
                    let (sx, sy) = v.warp.apply(ox as f64 + 0.5, oy as f64 + 0.5);
                    let (sx, sy) = (sx - 0.5, sy - 0.5);
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let corners = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x0 + 1.0, (1.0 - fy) * fx),
                        (y0 + 1.0, x0, fy * (1.0 - fx)),
                        (y0 + 1.0, x0 + 1.0, fy * fx),
                    ];
                    for (c, &(py, px, w)) in corners.iter().enumerate() {
                        let inside = py >= 0.0 && px >= 0.0 && py < size as f64 && px < size as f64;
                        if inside && w != 0.0 {
                            let gy = v.rect.top + py as usize;
                            let gx = v.rect.left + px as usize;
                            terms[c].0[k] = (gy * width + gx) as u32;
                            terms[c].1[k] = w;
                        }
                    }
                    k += 1;
                }
            }
        }
        Ok(Self {
            size,
            count: views.len(),
            height,
            width,
            terms,
        })
    }

    /// Plain crops, no warp.
    pub fn crops(rects: &[Rect], height: usize, width: usize) -> Result<Self> {
        let views: Vec<View> = rects
            .iter()
            .map(|&rect| View {
                rect,
                warp: Perspective::identity(),
            })
            .collect();
        Self::new(&views, height, width)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `(1, 3, H, W)` image to `(count, 3, size, size)` views.
    pub fn gather(&self, img: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = img.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(format!(
                "sampler built for {}x{}, got {h}x{w}",
                self.height, self.width
            )));
        }
        let flat = img.reshape((c, h * w))?;
        let n = self.count * self.size * self.size;
        let dev = img.device();
        let mut acc: Option<Tensor> = None;
        for (idx, wts) in &self.terms {
            if wts.iter().all(|&v| v == 0.0) {
                continue;
            }
            let idx = Tensor::from_slice(idx, n, dev)?;
            let wts = Tensor::from_slice(wts, (1, n), dev)?.to_dtype(img.dtype())?;
            let part = flat.index_select(&idx, 1)?.broadcast_mul(&wts)?;
            acc = Some(match acc {
                Some(a) => (a + part)?,
                None => part,
            });
        }
        let acc = match acc {
            Some(a) => a,
            None => Tensor::zeros((c, n), img.dtype(), dev)?,
        };
        Ok(acc
            .reshape((c, self.count, self.size, self.size))?
            .transpose(0, 1)?
            .contiguous()?)
    }
}

/// `n_aug` random views per rect, rect-major: views `i·n_aug .. (i+1)·n_aug`
/// belong to rect `i`.
pub fn random_views(rects: &[Rect], n_aug: usize, distortion: f64, rng: &mut impl Rng) -> Result<Vec<View>> {
    let mut out = Vec::with_capacity(rects.len() * n_aug);
    for &rect in rects {
        for _ in 0..n_aug {
            out.push(View {
                rect,
                warp: Perspective::random(rect.size, distortion, rng)?,
            });
        }
    }
    Ok(out)
}
