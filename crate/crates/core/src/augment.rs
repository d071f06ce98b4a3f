//! Random resized crop and horizontal flip with an exact adjoint, so gradients
//! reach the source pixels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageBatch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub random_resized_crop: bool,
    pub horizontal_flip: bool,
    /// Crop area as a fraction of the image.
    pub scale: (f64, f64),
    /// Crop aspect ratio (width / height).
    pub ratio: (f64, f64),
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            random_resized_crop: true,
            horizontal_flip: true,
            scale: (0.5, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags {
            random_resized_crop: false,
            horizontal_flip: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.scale;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("crop scale must satisfy 0 < lo <= hi <= 1, got {a}..{b}")));
        }
        let (a, b) = self.ratio;
        if !(0.0 < a && a <= b) {
            return Err(Error::Config(format!("crop ratio must satisfy 0 < lo <= hi, got {a}..{b}")));
        }
        Ok(())
    }
}

/// Integer crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        CropBox {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    /// Samples a box the way torchvision's `RandomResizedCrop` does, falling
    /// back to the whole image after ten rejected draws.
    pub fn sample(h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut Rng) -> Self {
        let area = (h * w) as f64;
        let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
        for _ in 0..10 {
            let target = area * uniform(rng, scale.0, scale.1);
            let r = uniform(rng, lr0, lr1).exp();
            let cw = (target * r).sqrt().round() as usize;
            let ch = (target / r).sqrt().round() as usize;
            if cw > 0 && ch > 0 && cw <= w && ch <= h {
                let top = rng.gen_range(0..=h - ch);
                let left = rng.gen_range(0..=w - cw);
                return CropBox {
                    top,
                    left,
                    height: ch,
                    width: cw,
                };
            }
        }
        CropBox::full(h, w)
    }
}

fn uniform(rng: &mut Rng, a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

/// Per-image transform: resample `crop` to the output size, then optionally mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub crop: CropBox,
    pub flip: bool,
}

/// Logged per-image transforms for one batch; replaying a plan is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub views: Vec<ViewTransform>,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl AugmentPlan {
    pub fn sample(n: usize, in_hw: (usize, usize), out_hw: (usize, usize), flags: &AugmentFlags, rng: &mut Rng) -> Self {
        let views = (0..n)
            .map(|_| {
                let crop = if flags.random_resized_crop {
                    CropBox::sample(in_hw.0, in_hw.1, flags.scale, flags.ratio, rng)
                } else {
                    CropBox::full(in_hw.0, in_hw.1)
                };
                let flip = flags.horizontal_flip && rng.gen_bool(0.5);
                ViewTransform { crop, flip }
            })
            .collect();
        AugmentPlan { views, in_hw, out_hw }
    }

    pub fn identity(n: usize, hw: (usize, usize)) -> Self {
        AugmentPlan {
            views: vec![
                ViewTransform {
                    crop: CropBox::full(hw.0, hw.1),
                    flip: false,
                };
                n
            ],
            in_hw: hw,
            out_hw: hw,
        }
    }

    fn check(&self, x: &Tensor, hw: (usize, usize)) -> Result<(usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if n != self.views.len() || (h, w) != hw {
            return Err(Error::shape(format!(
                "plan for {} images of {:?} applied to {:?}",
                self.views.len(),
                hw,
                x.shape()
            )));
        }
        Ok((n, c))
    }

    pub fn apply(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let (n, c) = self.check(x, self.in_hw)?;
        let (oh, ow) = self.out_hw;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for (i, v) in self.views.iter().enumerate() {
            let taps = taps(v, self.in_hw, self.out_hw);
            let src = x.item(i);
            let dst = out.item_mut(i);
            let (ihw, ohw) = (self.in_hw.0 * self.in_hw.1, oh * ow);
            for ch in 0..c {
                let s = &src[ch * ihw..(ch + 1) * ihw];
                for (o, t) in taps.iter().enumerate() {
                    dst[ch * ohw + o] = t.iter().map(|&(k, wt)| wt * s[k]).sum();
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`AugmentPlan::apply`]: scatters output gradients back onto
    /// the source pixels.
    pub fn backward(&self, dy: &Tensor) -> Result<Tensor> {
        let (n, c) = self.check(dy, self.out_hw)?;
        let (ih, iw) = self.in_hw;
        let mut dx = Tensor::zeros(&[n, c, ih, iw]);
        for (i, v) in self.views.iter().enumerate() {
            let taps = taps(v, self.in_hw, self.out_hw);
            let g = dy.item(i);
            let out = dx.item_mut(i);
            let (ihw, ohw) = (ih * iw, self.out_hw.0 * self.out_hw.1);
            for ch in 0..c {
                for (o, t) in taps.iter().enumerate() {
                    let d = g[ch * ohw + o];
                    for &(k, wt) in t {
                        out[ch * ihw + k] += wt * d;
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Bilinear taps `(source index, weight)` for every output pixel, using
/// half-pixel centers and edge clamping inside the crop.
fn taps(v: &ViewTransform, (_, iw): (usize, usize), (oh, ow): (usize, usize)) -> Vec<Vec<(usize, f64)>> {
    let b = v.crop;
    let axis = |o: usize, n_out: usize, start: usize, len: usize| -> (usize, usize, f64) {
        let pos = (o as f64 + 0.5) * len as f64 / n_out as f64 - 0.5;
        let pos = pos.clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (start + lo, start + hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, oh, b.top, b.height);
        for x in 0..ow {
            let xo = if v.flip { ow - 1 - x } else { x };
            let (x0, x1, fx) = axis(xo, ow, b.left, b.width);
            let mut t = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wt = wy * wx;
                    if wt != 0.0 {
                        t.push((yy * iw + xx, wt));
                    }
                }
            }
            out.push(t);
        }
    }
    out
}

/// Mirrors every image left-to-right.
pub fn hflip(x: &ImageBatch) -> Result<ImageBatch> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    for i in 0..n {
        let dst = out.item_mut(i);
        for row in 0..c * h {
            dst[row * w..(row + 1) * w].reverse();
        }
    }
    Ok(out)
}
