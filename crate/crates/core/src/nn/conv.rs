use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// 2-d convolution with square kernels, symmetric zero padding and channel
/// groups. Weights are laid out `(out, in / groups, k, k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub slot: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::shape(format!(
                "{h}x{w} input too small for {}x{} kernel",
                self.kernel, self.kernel
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.out_size(h, w)?;
        let cg = c / self.groups;
        let og = self.out_channels / self.groups;
        let kk = self.patch_len();
        let hw = ho * wo;
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut cols = vec![0.0; if self.is_pointwise() { 0 } else { kk * hw }];
        for i in 0..n {
            let xs = x.item(i);
            let ys = out.item_mut(i);
            for g in 0..self.groups {
                let src = &xs[g * cg * h * w..(g + 1) * cg * h * w];
                let b: &[f64] = if self.is_pointwise() {
                    src
                } else {
                    im2col(src, cg, h, w, self.kernel, self.stride, self.padding, ho, wo, &mut cols);
                    &cols
                };
                let wg = &self.weight[g * og * kk..(g + 1) * og * kk];
                let dst = &mut ys[g * og * hw..(g + 1) * og * hw];
                gemm(og, kk, hw, wg, kk, 1, b, hw, 1, 0.0, dst);
            }
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.iter().enumerate() {
                    ys[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    /// Returns the input gradient; accumulates weight/bias gradients when
    /// `grads` is given (weight then bias).
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        mut grads: Option<(&mut [f64], Option<&mut [f64]>)>,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (_, _, ho, wo) = dy.dims4()?;
        let cg = c / self.groups;
        let og = self.out_channels / self.groups;
        let kk = self.patch_len();
        let hw = ho * wo;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; kk * hw];
        let mut dcols = vec![0.0; kk * hw];
        for i in 0..n {
            let xs = x.item(i);
            let dys = dy.item(i);
            for g in 0..self.groups {
                let dyg = &dys[g * og * hw..(g + 1) * og * hw];
                let wg = &self.weight[g * og * kk..(g + 1) * og * kk];
                if let Some((gw, _)) = grads.as_mut() {
                    let src = &xs[g * cg * h * w..(g + 1) * cg * h * w];
                    let b: &[f64] = if self.is_pointwise() {
                        src
                    } else {
                        im2col(src, cg, h, w, self.kernel, self.stride, self.padding, ho, wo, &mut cols);
                        &cols
                    };
                    let gwg = &mut gw[g * og * kk..(g + 1) * og * kk];
                    // dW += dY · colsᵀ
                    gemm(og, hw, kk, dyg, hw, 1, b, 1, hw, 1.0, gwg);
                }
                let dxs = &mut dx.item_mut(i)[g * cg * h * w..(g + 1) * cg * h * w];
                if self.is_pointwise() {
                    // dX += Wᵀ · dY
                    gemm(kk, og, hw, wg, 1, kk, dyg, hw, 1, 1.0, dxs);
                } else {
                    gemm(kk, og, hw, wg, 1, kk, dyg, hw, 1, 0.0, &mut dcols);
                    col2im(&dcols, cg, h, w, self.kernel, self.stride, self.padding, ho, wo, dxs);
                }
            }
            if let Some((_, Some(gb))) = grads.as_mut() {
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += dys[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        Ok(dx)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
