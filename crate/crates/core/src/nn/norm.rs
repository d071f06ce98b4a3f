use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Running variance is stored as the normalizing variance, i.e. it tracks the
/// batch variance *including* ε, so running-mode normalization divides by
/// `sqrt(running_var)` and coincides exactly with batch-mode normalization
/// whenever the running statistics equal the batch statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub slot: usize,
    /// Ordinal of this layer among the model's BN layers in forward order.
    pub index: usize,
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

/// Per-channel statistics of one batch at one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRecord {
    pub index: usize,
    pub mean: Vec<f64>,
    /// Population variance plus ε.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch: bool,
}

/// Per-channel `(mean, population variance + eps)` over `(N, H, W)`.
pub fn channel_stats(x: &Tensor, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let m = n * h * w;
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let hw = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.item(i)[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m as f64;
        let mut q = 0.0;
        for i in 0..n {
            q += x.item(i)[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m as f64 + eps;
    }
    Ok((mean, var))
}

impl BatchNorm2d {
    pub fn new(slot: usize, index: usize, channels: usize) -> Self {
        BatchNorm2d {
            slot,
            index,
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let d = x.dims4()?;
        if d.1 != self.channels {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels, d.1
            )));
        }
        Ok(d)
    }

    /// Normalizes with the batch's own statistics.
    pub fn forward_batch(&self, x: &Tensor, eps: Option<f64>) -> Result<(Tensor, BnCache)> {
        let (n, c, h, w) = self.check(x)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if n * h * w < 2 {
            return Err(Error::DegenerateNormalization(format!(
                "layer {} sees a single value per channel",
                self.index
            )));
        }
        let (mean, var) = channel_stats(x, eps.unwrap_or(self.eps))?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let (xhat, y) = self.affine(x, &mean, &inv_std, (n, c, h, w));
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
                batch: true,
            },
        ))
    }

    /// Normalizes with the running statistics.
    pub fn forward_running(&self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let d = self.check(x)?;
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt())
            .collect();
        let mean = self.running_mean.clone();
        let (xhat, y) = self.affine(x, &mean, &inv_std, d);
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var: self.running_var.clone(),
                batch: false,
            },
        ))
    }

    fn affine(
        &self,
        x: &Tensor,
        mean: &[f64],
        inv_std: &[f64],
        (n, c, h, w): (usize, usize, usize, usize),
    ) -> (Tensor, Tensor) {
        let hw = h * w;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let xs = x.item(i);
            let xh = xhat.item_mut(i);
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                for j in ch * hw..(ch + 1) * hw {
                    xh[j] = (xs[j] - mu) * is;
                }
            }
            let ys = y.item_mut(i);
            let xh = xhat.item(i);
            for ch in 0..c {
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for j in ch * hw..(ch + 1) * hw {
                    ys[j] = g * xh[j] + b;
                }
            }
        }
        (xhat, y)
    }

    /// `align` is the coefficient on this layer's statistic-matching term
    /// `‖μ_B − μ_run‖² + ‖σ²_B − σ²_run‖²`; its gradient is added directly to
    /// the input gradient.
    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Tensor,
        grads: Option<(&mut [f64], &mut [f64])>,
        align: f64,
    ) -> Result<Tensor> {
        let (n, c, h, w) = dy.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            let d = dy.item(i);
            let xh = cache.xhat.item(i);
            for ch in 0..c {
                for j in ch * hw..(ch + 1) * hw {
                    sum_dy[ch] += d[j];
                    sum_dy_xhat[ch] += d[j] * xh[j];
                }
            }
        }
        if let Some((gg, gb)) = grads {
            for ch in 0..c {
                gg[ch] += sum_dy_xhat[ch];
                gb[ch] += sum_dy[ch];
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..n {
            let d = dy.item(i);
            let xh = cache.xhat.item(i);
            let out = dx.item_mut(i);
            for ch in 0..c {
                let g = self.gamma[ch];
                let is = cache.inv_std[ch];
                if cache.batch {
                    let a = g * is / m;
                    // d/dx of the alignment term: ∂μ/∂x = 1/M, ∂σ²/∂x = 2(x − μ)/M
                    let (da_mean, da_var) = if align != 0.0 {
                        (
                            align * 2.0 * (cache.mean[ch] - self.running_mean[ch]) / m,
                            align * 4.0 * (cache.var[ch] - self.running_var[ch]) / (m * is),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    for j in ch * hw..(ch + 1) * hw {
                        out[j] = a * (m * d[j] - sum_dy[ch] - xh[j] * sum_dy_xhat[ch])
                            + da_mean
                            + da_var * xh[j];
                    }
                } else {
                    for j in ch * hw..(ch + 1) * hw {
                        out[j] = d[j] * g * is;
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn update_running(&mut self, rec: &BnRecord, momentum: f64) {
        for ch in 0..self.channels {
            self.running_mean[ch] = momentum * self.running_mean[ch] + (1.0 - momentum) * rec.mean[ch];
            self.running_var[ch] = momentum * self.running_var[ch] + (1.0 - momentum) * rec.var[ch];
        }
    }
}
