//! Layers with explicit forward/backward passes.
//!
//! Forward passes take `&self` and write whatever backward needs onto a
//! [`Pass`] tape; running-statistic updates are applied afterwards from the
//! recorded per-layer batch statistics. A model is therefore never mutated by
//! a forward pass, which is what lets frozen teachers be shared.

mod conv;
mod norm;

use serde::{Deserialize, Serialize};

pub use conv::Conv2d;
pub use norm::{channel_stats, BatchNorm2d, BnCache, BnRecord, DEFAULT_EPS};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Which statistics the BN layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

pub struct Pass {
    pub mode: NormMode,
    /// Overrides each BN layer's ε in batch mode.
    pub eps: Option<f64>,
    tape: Option<Vec<Cache>>,
    /// Batch statistics of every BN layer, in forward order (batch mode only).
    pub records: Vec<BnRecord>,
}

impl Pass {
    pub fn new(mode: NormMode, keep_tape: bool) -> Self {
        Pass {
            mode,
            eps: None,
            tape: keep_tape.then(Vec::new),
            records: Vec::new(),
        }
    }

    fn push(&mut self, c: Cache) {
        if let Some(t) = self.tape.as_mut() {
            t.push(c);
        }
    }

    fn recording(&self) -> bool {
        self.tape.is_some()
    }

    fn pop(&mut self) -> Result<Cache> {
        self.tape
            .as_mut()
            .and_then(|t| t.pop())
            .ok_or_else(|| Error::shape("backward pass without a matching forward tape"))
    }
}

#[derive(Debug)]
enum Cache {
    Input(Tensor),
    Bn(BnCache),
    Mask(Vec<bool>),
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    Split(usize),
}

/// Parameter gradients indexed by parameter slot.
#[derive(Debug, Clone)]
pub struct Grads {
    pub bufs: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| b.fill(0.0));
    }

    fn pair(&mut self, slot: usize) -> (&mut [f64], &mut [f64]) {
        let (a, b) = self.bufs.split_at_mut(slot + 1);
        (&mut a[slot], &mut b[0])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOpts {
    /// Coefficient on each BN layer's statistic-alignment term.
    pub bn_align: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub slot: usize,
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if f != self.in_features {
            return Err(Error::shape(format!(
                "linear expects {} features, got {f}",
                self.in_features
            )));
        }
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(&self.bias);
        }
        let o = self.out_features;
        gemm(n, f, o, x.data(), f, 1, &self.weight, 1, f, 1.0, y.data_mut());
        Ok(y)
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, grads: Option<(&mut [f64], &mut [f64])>) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        let o = self.out_features;
        if let Some((gw, gb)) = grads {
            // dW += dYᵀ · X
            gemm(o, n, f, dy.data(), 1, o, x.data(), f, 1, 1.0, gw);
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(dy.item(i)) {
                    *g += d;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(n, o, f, dy.data(), o, 1, &self.weight, f, 1, 0.0, dx.data_mut());
        Ok(dx)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    Relu,
    Relu6,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Linear(Linear),
    Seq(Vec<Layer>),
    /// `body(x) + shortcut(x)`; identity shortcut when `None`.
    Residual {
        body: Box<Layer>,
        shortcut: Option<Box<Layer>>,
    },
    /// `concat(x, body(x))` along channels.
    DenseConcat(Box<Layer>),
    /// Two-branch unit followed by a 2-group channel shuffle. With no `left`
    /// branch the input is split in half and the first half passes through.
    Shuffle {
        left: Option<Box<Layer>>,
        right: Box<Layer>,
    },
}

impl Layer {
    pub fn forward(&self, x: Tensor, pass: &mut Pass) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => {
                let y = c.forward(&x)?;
                pass.push(Cache::Input(x));
                Ok(y)
            }
            Layer::Norm(bn) => {
                let (y, cache) = match pass.mode {
                    NormMode::Batch => {
                        let (y, cache) = bn.forward_batch(&x, pass.eps)?;
                        pass.records.push(BnRecord {
                            index: bn.index,
                            mean: cache.mean.clone(),
                            var: cache.var.clone(),
                        });
                        (y, cache)
                    }
                    NormMode::Running => bn.forward_running(&x)?,
                };
                pass.push(Cache::Bn(cache));
                Ok(y)
            }
            Layer::Relu => {
                let mut y = x;
                if pass.recording() {
                    pass.push(Cache::Mask(y.data().iter().map(|&v| v > 0.0).collect()));
                }
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                Ok(y)
            }
            Layer::Relu6 => {
                let mut y = x;
                if pass.recording() {
                    pass.push(Cache::Mask(
                        y.data().iter().map(|&v| v > 0.0 && v < 6.0).collect(),
                    ));
                }
                y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
                Ok(y)
            }
            Layer::MaxPool2 => {
                let (n, c, h, w) = x.dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                if ho == 0 || wo == 0 {
                    return Err(Error::shape(format!("{h}x{w} too small to pool")));
                }
                let mut y = Tensor::zeros(&[n, c, ho, wo]);
                let mut argmax = Vec::with_capacity(y.len());
                let xd = x.data();
                for (p, out) in y.data_mut().iter_mut().enumerate() {
                    let ox = p % wo;
                    let oy = (p / wo) % ho;
                    let plane = p / (wo * ho);
                    let base = plane * h * w;
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let q = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[q] > xd[best] {
                            best = q;
                        }
                    }
                    *out = xd[best];
                    argmax.push(best);
                }
                pass.push(Cache::MaxPool {
                    argmax,
                    in_shape: x.shape().to_vec(),
                });
                Ok(y)
            }
            Layer::AvgPool2 => {
                let (n, c, h, w) = x.dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                if ho == 0 || wo == 0 {
                    return Err(Error::shape(format!("{h}x{w} too small to pool")));
                }
                let mut y = Tensor::zeros(&[n, c, ho, wo]);
                let xd = x.data();
                for (p, out) in y.data_mut().iter_mut().enumerate() {
                    let ox = p % wo;
                    let oy = (p / wo) % ho;
                    let base = (p / (wo * ho)) * h * w + 2 * oy * w + 2 * ox;
                    *out = 0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                }
                pass.push(Cache::Shape(x.shape().to_vec()));
                Ok(y)
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let data = x
                    .data()
                    .chunks(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect();
                pass.push(Cache::Shape(x.shape().to_vec()));
                Tensor::from_vec(&[n, c], data)
            }
            Layer::Linear(l) => {
                let y = l.forward(&x)?;
                pass.push(Cache::Input(x));
                Ok(y)
            }
            Layer::Seq(layers) => layers.iter().try_fold(x, |h, l| l.forward(h, pass)),
            Layer::Residual { body, shortcut } => {
                let mut y = body.forward(x.clone(), pass)?;
                let s = match shortcut {
                    Some(s) => s.forward(x, pass)?,
                    None => x,
                };
                y.add_assign(&s)?;
                Ok(y)
            }
            Layer::DenseConcat(body) => {
                let c = x.dims4()?.1;
                let y = body.forward(x.clone(), pass)?;
                pass.push(Cache::Split(c));
                concat_channels(&x, &y)
            }
            Layer::Shuffle { left, right } => {
                let c = x.dims4()?.1;
                let (a, b) = match left {
                    None => {
                        let (x1, x2) = split_channels(&x, c / 2)?;
                        let b = right.forward(x2, pass)?;
                        (x1, b)
                    }
                    Some(l) => {
                        let a = l.forward(x.clone(), pass)?;
                        let b = right.forward(x, pass)?;
                        (a, b)
                    }
                };
                pass.push(Cache::Split(a.dims4()?.1));
                Ok(channel_shuffle(&concat_channels(&a, &b)?, 2, false))
            }
        }
    }

    pub fn backward(
        &self,
        dy: Tensor,
        pass: &mut Pass,
        grads: &mut Option<&mut Grads>,
        opts: &BackwardOpts,
    ) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => {
                let Cache::Input(x) = pass.pop()? else {
                    return Err(tape_mismatch("conv"));
                };
                let g = grads.as_mut().map(|g| {
                    if c.bias.is_some() {
                        let (w, b) = g.pair(c.slot);
                        (w, Some(b))
                    } else {
                        (&mut g.bufs[c.slot][..], None)
                    }
                });
                c.backward(&x, &dy, g)
            }
            Layer::Norm(bn) => {
                let Cache::Bn(cache) = pass.pop()? else {
                    return Err(tape_mismatch("batch norm"));
                };
                let g = grads.as_mut().map(|g| g.pair(bn.slot));
                bn.backward(&cache, &dy, g, opts.bn_align)
            }
            Layer::Relu | Layer::Relu6 => {
                let Cache::Mask(mask) = pass.pop()? else {
                    return Err(tape_mismatch("activation"));
                };
                let mut dx = dy;
                for (d, &m) in dx.data_mut().iter_mut().zip(&mask) {
                    if !m {
                        *d = 0.0;
                    }
                }
                Ok(dx)
            }
            Layer::MaxPool2 => {
                let Cache::MaxPool { argmax, in_shape } = pass.pop()? else {
                    return Err(tape_mismatch("max pool"));
                };
                let mut dx = Tensor::zeros(&in_shape);
                for (&q, &d) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[q] += d;
                }
                Ok(dx)
            }
            Layer::AvgPool2 => {
                let Cache::Shape(in_shape) = pass.pop()? else {
                    return Err(tape_mismatch("avg pool"));
                };
                let (_, _, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(&in_shape);
                let out = dx.data_mut();
                for (p, &d) in dy.data().iter().enumerate() {
                    let ox = p % wo;
                    let oy = (p / wo) % ho;
                    let base = (p / (wo * ho)) * h * w + 2 * oy * w + 2 * ox;
                    for q in [base, base + 1, base + w, base + w + 1] {
                        out[q] += 0.25 * d;
                    }
                }
                Ok(dx)
            }
            Layer::GlobalAvgPool => {
                let Cache::Shape(in_shape) = pass.pop()? else {
                    return Err(tape_mismatch("global pool"));
                };
                let hw = in_shape[2] * in_shape[3];
                let mut dx = Tensor::zeros(&in_shape);
                for (plane, &d) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
                    plane.fill(d / hw as f64);
                }
                Ok(dx)
            }
            Layer::Linear(l) => {
                let Cache::Input(x) = pass.pop()? else {
                    return Err(tape_mismatch("linear"));
                };
                let g = grads.as_mut().map(|g| g.pair(l.slot));
                l.backward(&x, &dy, g)
            }
            Layer::Seq(layers) => layers
                .iter()
                .rev()
                .try_fold(dy, |d, l| l.backward(d, pass, grads, opts)),
            Layer::Residual { body, shortcut } => {
                let ds = match shortcut {
                    Some(s) => s.backward(dy.clone(), pass, grads, opts)?,
                    None => dy.clone(),
                };
                let mut dx = body.backward(dy, pass, grads, opts)?;
                dx.add_assign(&ds)?;
                Ok(dx)
            }
            Layer::DenseConcat(body) => {
                let Cache::Split(c) = pass.pop()? else {
                    return Err(tape_mismatch("dense concat"));
                };
                let (d1, d2) = split_channels(&dy, c)?;
                let mut dx = body.backward(d2, pass, grads, opts)?;
                dx.add_assign(&d1)?;
                Ok(dx)
            }
            Layer::Shuffle { left, right } => {
                let Cache::Split(c) = pass.pop()? else {
                    return Err(tape_mismatch("shuffle unit"));
                };
                let d = channel_shuffle(&dy, 2, true);
                let (da, db) = split_channels(&d, c)?;
                let dxb = right.backward(db, pass, grads, opts)?;
                match left {
                    None => concat_channels(&da, &dxb),
                    Some(l) => {
                        let mut dx = l.backward(da, pass, grads, opts)?;
                        dx.add_assign(&dxb)?;
                        Ok(dx)
                    }
                }
            }
        }
    }

    /// Visits BN layers in forward order.
    pub fn visit_norms<'a>(&'a self, f: &mut dyn FnMut(&'a BatchNorm2d)) {
        match self {
            Layer::Norm(bn) => f(bn),
            Layer::Seq(ls) => ls.iter().for_each(|l| l.visit_norms(f)),
            Layer::Residual { body, shortcut } => {
                body.visit_norms(f);
                if let Some(s) = shortcut {
                    s.visit_norms(f);
                }
            }
            Layer::DenseConcat(b) => b.visit_norms(f),
            Layer::Shuffle { left, right } => {
                if let Some(l) = left {
                    l.visit_norms(f);
                }
                right.visit_norms(f);
            }
            _ => {}
        }
    }

    pub fn visit_norms_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut BatchNorm2d)) {
        match self {
            Layer::Norm(bn) => f(bn),
            Layer::Seq(ls) => ls.iter_mut().for_each(|l| l.visit_norms_mut(f)),
            Layer::Residual { body, shortcut } => {
                body.visit_norms_mut(f);
                if let Some(s) = shortcut {
                    s.visit_norms_mut(f);
                }
            }
            Layer::DenseConcat(b) => b.visit_norms_mut(f),
            Layer::Shuffle { left, right } => {
                if let Some(l) = left {
                    l.visit_norms_mut(f);
                }
                right.visit_norms_mut(f);
            }
            _ => {}
        }
    }

    /// Visits parameter tensors in slot order with a dotted path name.
    pub fn visit_params<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a Vec<f64>)) {
        match self {
            Layer::Conv(c) => {
                f(format!("{path}.weight"), &c.weight);
                if let Some(b) = &c.bias {
                    f(format!("{path}.bias"), b);
                }
            }
            Layer::Norm(bn) => {
                f(format!("{path}.weight"), &bn.gamma);
                f(format!("{path}.bias"), &bn.beta);
            }
            Layer::Linear(l) => {
                f(format!("{path}.weight"), &l.weight);
                f(format!("{path}.bias"), &l.bias);
            }
            _ => self.children().enumerate().for_each(|(i, (tag, c))| {
                c.visit_params(&format!("{path}.{tag}{i}"), f)
            }),
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Vec<f64>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            Layer::Norm(bn) => {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            Layer::Linear(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::Seq(ls) => ls.iter_mut().for_each(|l| l.visit_params_mut(f)),
            Layer::Residual { body, shortcut } => {
                body.visit_params_mut(f);
                if let Some(s) = shortcut {
                    s.visit_params_mut(f);
                }
            }
            Layer::DenseConcat(b) => b.visit_params_mut(f),
            Layer::Shuffle { left, right } => {
                if let Some(l) = left {
                    l.visit_params_mut(f);
                }
                right.visit_params_mut(f);
            }
            _ => {}
        }
    }

    fn children(&self) -> Box<dyn Iterator<Item = (&'static str, &Layer)> + '_> {
        match self {
            Layer::Seq(ls) => Box::new(ls.iter().map(|l| ("", l))),
            Layer::Residual { body, shortcut } => Box::new(
                std::iter::once(("body", body.as_ref()))
                    .chain(shortcut.iter().map(|s| ("shortcut", s.as_ref()))),
            ),
            Layer::DenseConcat(b) => Box::new(std::iter::once(("body", b.as_ref()))),
            Layer::Shuffle { left, right } => Box::new(
                left.iter()
                    .map(|l| ("left", l.as_ref()))
                    .chain(std::iter::once(("right", right.as_ref()))),
            ),
            _ => Box::new(std::iter::empty()),
        }
    }
}

fn tape_mismatch(layer: &str) -> Error {
    Error::shape(format!("tape entry mismatch at {layer} layer"))
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if n != nb || h != hb || w != wb {
        return Err(Error::shape(format!(
            "cannot concat {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

pub(crate) fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if first > c {
        return Err(Error::shape(format!("cannot split {c} channels at {first}")));
    }
    let k = first * h * w;
    let mut a = Vec::with_capacity(n * k);
    let mut b = Vec::with_capacity(x.len() - n * k);
    for i in 0..n {
        let s = x.item(i);
        a.extend_from_slice(&s[..k]);
        b.extend_from_slice(&s[k..]);
    }
    Ok((
        Tensor::from_vec(&[n, first, h, w], a)?,
        Tensor::from_vec(&[n, c - first, h, w], b)?,
    ))
}

/// Views channels as `(groups, c / groups)` and transposes; `inverse` undoes it.
pub(crate) fn channel_shuffle(x: &Tensor, groups: usize, inverse: bool) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("4-d");
    let per = c / groups;
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        let src = x.item(i);
        let dst = y.item_mut(i);
        for g in 0..groups {
            for j in 0..per {
                let (from, to) = (g * per + j, j * groups + g);
                let (from, to) = if inverse { (to, from) } else { (from, to) };
                dst[to * hw..(to + 1) * hw].copy_from_slice(&src[from * hw..(from + 1) * hw]);
            }
        }
    }
    y
}
