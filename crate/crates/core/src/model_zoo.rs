//! Backbone registry, BN instrumentation and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::nn::{BackwardOpts, BatchNorm2d, BnRecord, Conv2d, Grads, Layer, Linear, NormMode, Pass};
use crate::rng::{self, Rng};
use crate::tensor::{ImageBatch, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    TinyCnn,
    Resnet18Like,
    Resnet50Like,
    Densenet121Like,
    Mobilenetv2Like,
    Shufflenetv2Like,
}

impl ArchId {
    pub const ALL: [ArchId; 6] = [
        ArchId::TinyCnn,
        ArchId::Resnet18Like,
        ArchId::Resnet50Like,
        ArchId::Densenet121Like,
        ArchId::Mobilenetv2Like,
        ArchId::Shufflenetv2Like,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchId::TinyCnn => "tiny-cnn",
            ArchId::Resnet18Like => "resnet18-like",
            ArchId::Resnet50Like => "resnet50-like",
            ArchId::Densenet121Like => "densenet121-like",
            ArchId::Mobilenetv2Like => "mobilenetv2-like",
            ArchId::Shufflenetv2Like => "shufflenetv2-like",
        }
    }

    /// Total spatial downsampling; input sides must be a multiple of it.
    fn downsampling(self) -> usize {
        match self {
            ArchId::TinyCnn => 4,
            _ => 8,
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub arch_id: String,
    pub num_classes: usize,
    pub input_resolution: (usize, usize),
    /// Image channels.
    pub channels: usize,
    /// Base feature width; every stage is a multiple of it.
    pub width: usize,
}

impl BackboneSpec {
    pub fn new(arch: ArchId, num_classes: usize, resolution: (usize, usize), width: usize) -> Self {
        BackboneSpec {
            arch_id: arch.name().to_string(),
            num_classes,
            input_resolution: resolution,
            channels: 3,
            width,
        }
    }

    pub fn arch(&self) -> Result<ArchId> {
        self.arch_id.parse()
    }

    /// Stable identifier of a committee member built from this spec.
    pub fn member_id(&self) -> String {
        format!("{}-w{}", self.arch_id, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsKind {
    Running,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_id: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BNStatistics {
    pub kind: StatsKind,
    pub per_layer: Vec<LayerStats>,
}

impl BNStatistics {
    fn from_records(records: &[BnRecord]) -> Self {
        BNStatistics {
            kind: StatsKind::Batch,
            per_layer: records
                .iter()
                .map(|r| LayerStats {
                    layer_id: layer_id(r.index),
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCapture {
    pub stats: BNStatistics,
    pub forward_id: u64,
}

static FORWARD_COUNTER: AtomicU64 = AtomicU64::new(0);

fn layer_id(index: usize) -> String {
    format!("bn{index}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    spec: BackboneSpec,
    seed: u64,
    features: Layer,
    head: Layer,
    slots: Vec<usize>,
    norms: usize,
}

impl Model {
    /// Assembles a model from hand-built layers. The spec's `arch_id` is only
    /// a label here; such models cannot be reloaded from a checkpoint.
    pub fn custom(spec: BackboneSpec, factory: LayerFactory, features: Vec<Layer>, head: Layer) -> Model {
        Model {
            spec,
            seed: 0,
            features: Layer::Seq(features),
            head,
            slots: factory.slots,
            norms: factory.norms,
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_norm_layers(&self) -> usize {
        self.norms
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let (eh, ew) = self.spec.input_resolution;
        if c != self.spec.channels || h != eh || w != ew {
            return Err(Error::shape(format!(
                "model expects (_, {}, {eh}, {ew}) input, got {:?}",
                self.spec.channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Penultimate (globally pooled) features, shape `(N, F)`.
    pub fn embed(&self, x: &ImageBatch, pass: &mut Pass) -> Result<Tensor> {
        self.check_input(x)?;
        self.features.forward(x.clone(), pass)
    }

    pub fn forward(&self, x: &ImageBatch, pass: &mut Pass) -> Result<Tensor> {
        let f = self.embed(x, pass)?;
        self.head.forward(f, pass)
    }

    /// Inference-mode logits (running statistics, no tape).
    pub fn predict(&self, x: &ImageBatch) -> Result<Tensor> {
        self.forward(x, &mut Pass::new(NormMode::Running, false))
    }

    /// Back-propagates `dlogits` through a tape produced by [`Model::forward`];
    /// returns the gradient with respect to the input images.
    pub fn backward(
        &self,
        dlogits: Tensor,
        pass: &mut Pass,
        grads: Option<&mut Grads>,
        opts: &BackwardOpts,
    ) -> Result<Tensor> {
        let mut grads = grads;
        let df = self.head.backward(dlogits, pass, &mut grads, opts)?;
        self.features.backward(df, pass, &mut grads, opts)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self.slots.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Named parameters in slot order.
    pub fn params(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        self.features
            .visit_params("features", &mut |n, p| out.push((n, p)));
        self.head.visit_params("head", &mut |n, p| out.push((n, p)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        self.features.visit_params_mut(&mut |p| out.push(p));
        self.head.visit_params_mut(&mut |p| out.push(p));
        out
    }

    pub fn norm_layers(&self) -> Vec<&BatchNorm2d> {
        let mut out = Vec::new();
        self.features.visit_norms(&mut |b| out.push(b));
        out
    }

    /// Folds recorded batch statistics into the running statistics.
    pub fn apply_running_update(&mut self, records: &[BnRecord], momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidMomentum(momentum));
        }
        if records.len() != self.norms {
            return Err(Error::shape(format!(
                "{} records for {} BN layers",
                records.len(),
                self.norms
            )));
        }
        let mut i = 0;
        self.features.visit_norms_mut(&mut |bn| {
            bn.update_running(&records[i], momentum);
            i += 1;
        });
        Ok(())
    }

    pub fn set_running_stats(&mut self, stats: &BNStatistics) -> Result<()> {
        if stats.per_layer.len() != self.norms {
            return Err(Error::shape(format!(
                "{} layers of statistics for {} BN layers",
                stats.per_layer.len(),
                self.norms
            )));
        }
        let mut err = None;
        let mut i = 0;
        self.features.visit_norms_mut(&mut |bn| {
            let s = &stats.per_layer[i];
            if s.mean.len() != bn.channels || s.var.len() != bn.channels {
                err.get_or_insert_with(|| Error::shape(format!("channel mismatch at {}", s.layer_id)));
            } else {
                bn.running_mean.clone_from(&s.mean);
                bn.running_var.clone_from(&s.var);
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }

    /// Hash over parameters and running statistics.
    pub fn digest(&self) -> String {
        let mut all = Vec::new();
        for (_, p) in self.params() {
            all.extend_from_slice(p);
        }
        for bn in self.norm_layers() {
            all.extend_from_slice(&bn.running_mean);
            all.extend_from_slice(&bn.running_var);
        }
        digest::digest_f64(&all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            params: self
                .params()
                .into_iter()
                .map(|(name, v)| NamedParam { name, values: v.clone() })
                .collect(),
            running: read_running_stats(self)?,
        };
        crate::pipeline::store::write_atomic(path, &serde_json::to_vec(&ck)?)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", ck.format_version)));
        }
        let mut model = build_backbone(&ck.spec, ck.seed)?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.params.len() {
            return Err(bad("parameter count mismatch".into()));
        }
        for ((dst, name), src) in model.params_mut().into_iter().zip(&names).zip(&ck.params) {
            if &src.name != name || src.values.len() != dst.len() {
                return Err(bad(format!("parameter `{}` does not match `{name}`", src.name)));
            }
            dst.clone_from(&src.values);
        }
        model.set_running_stats(&ck.running)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    spec: BackboneSpec,
    seed: u64,
    params: Vec<NamedParam>,
    running: BNStatistics,
}

pub fn read_running_stats(model: &Model) -> Result<BNStatistics> {
    let layers = model.norm_layers();
    if layers.is_empty() {
        return Err(Error::NoNormalizationLayers);
    }
    Ok(BNStatistics {
        kind: StatsKind::Running,
        per_layer: layers
            .iter()
            .map(|bn| LayerStats {
                layer_id: layer_id(bn.index),
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
            })
            .collect(),
    })
}

/// Per-layer batch statistics of `batch`, from one batch-mode forward pass.
/// Neither weights nor running statistics are touched.
pub fn capture_batch_stats(model: &Model, batch: &ImageBatch) -> Result<ProbeCapture> {
    capture_batch_stats_eps(model, batch, None)
}

pub fn capture_batch_stats_eps(model: &Model, batch: &ImageBatch, eps: Option<f64>) -> Result<ProbeCapture> {
    if batch.batch() == 0 {
        return Err(Error::EmptyBatch);
    }
    if model.num_norm_layers() == 0 {
        return Err(Error::NoNormalizationLayers);
    }
    let mut pass = Pass::new(NormMode::Batch, false);
    pass.eps = eps;
    model.forward(batch, &mut pass)?;
    Ok(ProbeCapture {
        stats: BNStatistics::from_records(&pass.records),
        forward_id: FORWARD_COUNTER.fetch_add(1, Ordering::Relaxed),
    })
}

/// Allocates parameter slots and BN ordinals while layers are assembled.
pub struct LayerFactory {
    rng: Rng,
    slots: Vec<usize>,
    norms: usize,
}

impl LayerFactory {
    pub fn new(seed: u64) -> Self {
        LayerFactory {
            rng: rng::stream(seed, "init", 0),
            slots: Vec::new(),
            norms: 0,
        }
    }

    /// Bias-free convolution with Kaiming-normal weights and `k / 2` padding.
    pub fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Layer {
        let fan_in = cin / groups * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = (0..cout * fan_in).map(|_| normal.sample(&mut self.rng)).collect();
        let slot = self.slots.len();
        self.slots.push(cout * fan_in);
        Layer::Conv(Conv2d {
            slot,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: k / 2,
            groups,
            weight,
            bias: None,
        })
    }

    pub fn bn(&mut self, c: usize) -> Layer {
        let slot = self.slots.len();
        self.slots.extend([c, c]);
        let index = self.norms;
        self.norms += 1;
        Layer::Norm(BatchNorm2d::new(slot, index, c))
    }

    pub fn linear(&mut self, inp: usize, out: usize) -> Layer {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = (0..inp * out).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let bias = (0..out).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let slot = self.slots.len();
        self.slots.extend([inp * out, out]);
        Layer::Linear(Linear {
            slot,
            in_features: inp,
            out_features: out,
            weight,
            bias,
        })
    }

    fn conv_bn(&mut self, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Vec<Layer> {
        vec![self.conv(cin, cout, k, stride, groups), self.bn(cout)]
    }

    fn conv_bn_relu(&mut self, cin: usize, cout: usize, k: usize, stride: usize) -> Vec<Layer> {
        let mut v = self.conv_bn(cin, cout, k, stride, 1);
        v.push(Layer::Relu);
        v
    }

    fn basic_block(&mut self, cin: usize, cout: usize, stride: usize) -> Layer {
        let mut body = self.conv_bn_relu(cin, cout, 3, stride);
        body.extend(self.conv_bn(cout, cout, 3, 1, 1));
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Box::new(Layer::Seq(self.conv_bn(cin, cout, 1, stride, 1))));
        Layer::Seq(vec![
            Layer::Residual {
                body: Box::new(Layer::Seq(body)),
                shortcut,
            },
            Layer::Relu,
        ])
    }

    fn bottleneck(&mut self, cin: usize, mid: usize, stride: usize) -> Layer {
        let cout = mid * 4;
        let mut body = self.conv_bn_relu(cin, mid, 1, 1);
        body.extend(self.conv_bn_relu(mid, mid, 3, stride));
        body.extend(self.conv_bn(mid, cout, 1, 1, 1));
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Box::new(Layer::Seq(self.conv_bn(cin, cout, 1, stride, 1))));
        Layer::Seq(vec![
            Layer::Residual {
                body: Box::new(Layer::Seq(body)),
                shortcut,
            },
            Layer::Relu,
        ])
    }

    fn inverted_residual(&mut self, cin: usize, cout: usize, stride: usize, expand: usize) -> Layer {
        let hidden = cin * expand;
        let mut body = Vec::new();
        if expand != 1 {
            body.extend(self.conv_bn(cin, hidden, 1, 1, 1));
            body.push(Layer::Relu6);
        }
        body.extend(self.conv_bn(hidden, hidden, 3, stride, hidden));
        body.push(Layer::Relu6);
        body.extend(self.conv_bn(hidden, cout, 1, 1, 1));
        let body = Layer::Seq(body);
        if stride == 1 && cin == cout {
            Layer::Residual {
                body: Box::new(body),
                shortcut: None,
            }
        } else {
            body
        }
    }

    fn shuffle_unit(&mut self, cin: usize, cout: usize, stride: usize) -> Layer {
        let branch = cout / 2;
        if stride == 1 {
            let half = cin / 2;
            let mut right = self.conv_bn_relu(half, branch, 1, 1);
            right.extend(self.conv_bn(branch, branch, 3, 1, branch));
            right.extend(self.conv_bn_relu(branch, branch, 1, 1));
            Layer::Shuffle {
                left: None,
                right: Box::new(Layer::Seq(right)),
            }
        } else {
            let mut left = self.conv_bn(cin, cin, 3, stride, cin);
            left.extend(self.conv_bn_relu(cin, branch, 1, 1));
            let mut right = self.conv_bn_relu(cin, branch, 1, 1);
            right.extend(self.conv_bn(branch, branch, 3, stride, branch));
            right.extend(self.conv_bn_relu(branch, branch, 1, 1));
            Layer::Shuffle {
                left: Some(Box::new(Layer::Seq(left))),
                right: Box::new(Layer::Seq(right)),
            }
        }
    }

    fn dense_layer(&mut self, cin: usize, growth: usize) -> Layer {
        let mid = 4 * growth;
        let body = vec![
            self.bn(cin),
            Layer::Relu,
            self.conv(cin, mid, 1, 1, 1),
            self.bn(mid),
            Layer::Relu,
            self.conv(mid, growth, 3, 1, 1),
        ];
        Layer::DenseConcat(Box::new(Layer::Seq(body)))
    }
}

/// Builds a freshly initialized model; a pure function of `(spec, seed)`.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Model> {
    let arch = spec.arch()?;
    let (h, w) = spec.input_resolution;
    let f = arch.downsampling();
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "{arch} needs input sides that are positive multiples of {f}, got {h}x{w}"
        )));
    }
    if spec.num_classes == 0 || spec.channels == 0 || spec.width == 0 {
        return Err(Error::shape("classes, channels and width must be positive"));
    }
    let mut b = LayerFactory::new(seed);
    let c = spec.width;
    let cin = spec.channels;
    let mut layers = Vec::new();
    let feat = match arch {
        ArchId::TinyCnn => {
            layers.extend(b.conv_bn_relu(cin, c, 3, 1));
            layers.push(Layer::MaxPool2);
            layers.extend(b.conv_bn_relu(c, 2 * c, 3, 1));
            layers.push(Layer::MaxPool2);
            layers.extend(b.conv_bn_relu(2 * c, 4 * c, 3, 1));
            4 * c
        }
        ArchId::Resnet18Like => {
            layers.extend(b.conv_bn_relu(cin, c, 3, 1));
            let mut prev = c;
            for (i, mult) in [1, 2, 4, 8].into_iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                layers.push(b.basic_block(prev, c * mult, stride));
                layers.push(b.basic_block(c * mult, c * mult, 1));
                prev = c * mult;
            }
            prev
        }
        ArchId::Resnet50Like => {
            layers.extend(b.conv_bn_relu(cin, c, 3, 1));
            let mut prev = c;
            for (i, (mult, blocks)) in [(1, 1), (2, 2), (4, 2), (8, 1)].into_iter().enumerate() {
                for j in 0..blocks {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    layers.push(b.bottleneck(prev, c * mult, stride));
                    prev = c * mult * 4;
                }
            }
            prev
        }
        ArchId::Densenet121Like => {
            let growth = (c / 2).max(2);
            let mut ch = 2 * growth;
            layers.push(b.conv(cin, ch, 3, 1, 1));
            let blocks = [2, 3, 4, 2];
            for (i, &n) in blocks.iter().enumerate() {
                for _ in 0..n {
                    layers.push(b.dense_layer(ch, growth));
                    ch += growth;
                }
                if i + 1 < blocks.len() {
                    let out = ch / 2;
                    layers.push(b.bn(ch));
                    layers.push(Layer::Relu);
                    layers.push(b.conv(ch, out, 1, 1, 1));
                    layers.push(Layer::AvgPool2);
                    ch = out;
                }
            }
            layers.push(b.bn(ch));
            layers.push(Layer::Relu);
            ch
        }
        ArchId::Mobilenetv2Like => {
            layers.extend(b.conv_bn(cin, c, 3, 1, 1));
            layers.push(Layer::Relu6);
            let mut prev = c;
            for (expand, mult, n, stride) in [(1, 1, 1, 1), (6, 2, 2, 2), (6, 4, 2, 2), (6, 8, 1, 2)] {
                for j in 0..n {
                    let s = if j == 0 { stride } else { 1 };
                    layers.push(b.inverted_residual(prev, c * mult, s, expand));
                    prev = c * mult;
                }
            }
            layers.extend(b.conv_bn(prev, 16 * c, 1, 1, 1));
            layers.push(Layer::Relu6);
            16 * c
        }
        ArchId::Shufflenetv2Like => {
            let c = c.max(2) / 2 * 2;
            layers.extend(b.conv_bn_relu(cin, c, 3, 1));
            let mut prev = c;
            for mult in [2, 4, 8] {
                layers.push(b.shuffle_unit(prev, c * mult, 2));
                layers.push(b.shuffle_unit(c * mult, c * mult, 1));
                prev = c * mult;
            }
            layers.extend(b.conv_bn_relu(prev, 16 * c, 1, 1));
            16 * c
        }
    };
    layers.push(Layer::GlobalAvgPool);
    let head = b.linear(feat, spec.num_classes);
    Ok(Model {
        spec: spec.clone(),
        seed,
        features: Layer::Seq(layers),
        head,
        slots: b.slots,
        norms: b.norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softlabel::running_stat_update;

    fn batch(n: usize, res: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-batch", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_vec(
            &[n, 3, res, res],
            (0..n * 3 * res * res).map(|_| normal.sample(&mut r)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = BackboneSpec::new(ArchId::TinyCnn, 10, (32, 32), 8);
        let a = build_backbone(&spec, 0).unwrap();
        let b = build_backbone(&spec, 0).unwrap();
        let c = build_backbone(&spec, 1).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        for ((_, p), (_, q)) in a.params().iter().zip(b.params()) {
            let bits: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, bits2);
        }
    }

    #[test]
    fn every_arch_builds_and_classifies() {
        for arch in ArchId::ALL {
            let spec = BackboneSpec::new(arch, 100, (32, 32), 4);
            let m = build_backbone(&spec, 1).unwrap();
            assert!(m.num_norm_layers() >= 1, "{arch}");
            let y = m.predict(&batch(2, 32, 0)).unwrap();
            assert_eq!(y.shape(), &[2, 100], "{arch}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn every_arch_backprops() {
        for arch in ArchId::ALL {
            let spec = BackboneSpec::new(arch, 5, (16, 16), 4);
            let m = build_backbone(&spec, 2).unwrap();
            let x = batch(3, 16, 1);
            let mut pass = Pass::new(NormMode::Batch, true);
            let y = m.forward(&x, &mut pass).unwrap();
            let mut g = m.zero_grads();
            let dx = m
                .backward(Tensor::full(y.shape(), 0.1), &mut pass, Some(&mut g), &BackwardOpts { bn_align: 0.0 })
                .unwrap();
            assert_eq!(dx.shape(), x.shape(), "{arch}");
            assert!(g.bufs.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn unknown_arch_and_bad_resolution() {
        let mut spec = BackboneSpec::new(ArchId::TinyCnn, 10, (32, 32), 8);
        spec.arch_id = "vit".into();
        assert!(matches!(build_backbone(&spec, 0), Err(Error::UnknownArchitecture(_))));
        let spec = BackboneSpec::new(ArchId::Resnet18Like, 10, (30, 30), 8);
        assert!(matches!(build_backbone(&spec, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_running_stats_are_standard() {
        let m = build_backbone(&BackboneSpec::new(ArchId::TinyCnn, 10, (16, 16), 4), 0).unwrap();
        let s = read_running_stats(&m).unwrap();
        assert_eq!(s.kind, StatsKind::Running);
        assert_eq!(s.per_layer.len(), 3);
        for l in &s.per_layer {
            assert!(l.mean.iter().all(|&v| v == 0.0));
            assert!(l.var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn zero_momentum_update_copies_batch_stats() {
        let mut m = build_backbone(&BackboneSpec::new(ArchId::TinyCnn, 10, (16, 16), 4), 0).unwrap();
        let x = batch(4, 16, 3);
        let mut pass = Pass::new(NormMode::Batch, false);
        m.forward(&x, &mut pass).unwrap();
        m.apply_running_update(&pass.records, 0.0).unwrap();
        let s = read_running_stats(&m).unwrap();
        for (l, r) in s.per_layer.iter().zip(&pass.records) {
            assert_eq!(l.mean, r.mean);
            assert_eq!(l.var, r.var);
        }
    }

    #[test]
    fn scripted_updates_replay_the_recurrence() {
        let mut m = build_backbone(&BackboneSpec::new(ArchId::TinyCnn, 10, (16, 16), 4), 5).unwrap();
        let momentum = 0.9;
        let mut replay = read_running_stats(&m).unwrap();
        let snapshot = replay.clone();
        for step in 0..3 {
            let x = batch(4, 16, 10 + step);
            let cap = capture_batch_stats(&m, &x).unwrap();
            let mut pass = Pass::new(NormMode::Batch, false);
            m.forward(&x, &mut pass).unwrap();
            m.apply_running_update(&pass.records, momentum).unwrap();
            for (r, b) in replay.per_layer.iter_mut().zip(&cap.stats.per_layer) {
                let (mean, var) =
                    running_stat_update((&r.mean, &r.var), (&b.mean, &b.var), momentum).unwrap();
                r.mean = mean;
                r.var = var;
            }
        }
        assert_eq!(read_running_stats(&m).unwrap(), replay);
        assert_ne!(replay, snapshot, "snapshot must be a copy");
    }

    #[test]
    fn capture_leaves_running_stats_alone_and_is_order_invariant() {
        let m = build_backbone(&BackboneSpec::new(ArchId::Resnet18Like, 10, (16, 16), 4), 0).unwrap();
        let before = read_running_stats(&m).unwrap();
        let x = batch(5, 16, 4);
        let a = capture_batch_stats(&m, &x).unwrap();
        assert_eq!(read_running_stats(&m).unwrap(), before);
        let b = capture_batch_stats(&m, &x.select(&[4, 2, 0, 3, 1])).unwrap();
        assert!(b.forward_id > a.forward_id);
        for (la, lb) in a.stats.per_layer.iter().zip(&b.stats.per_layer) {
            for (u, v) in la.mean.iter().zip(&lb.mean).chain(la.var.iter().zip(&lb.var)) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
        assert!(matches!(
            capture_batch_stats(&m, &Tensor::zeros(&[0, 3, 16, 16])),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_backbone(&BackboneSpec::new(ArchId::Mobilenetv2Like, 7, (16, 16), 4), 9).unwrap();
        let mut pass = Pass::new(NormMode::Batch, false);
        m.forward(&batch(3, 16, 0), &mut pass).unwrap();
        m.apply_running_update(&pass.records, 0.9).unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back.digest(), m.digest());
    }
}
