//! Checks shared by the per-topic integration tests and the acceptance run.
#![allow(dead_code)]

use committee_distill::loss::softmax_rows;
use committee_distill::model_zoo::{ArchId, BackboneSpec, LayerFactory, Model};
use committee_distill::nn::{Layer, NormMode, Pass};
use committee_distill::optim::cosine_lr;
use committee_distill::posteval::kd_loss;
use committee_distill::prior::PriorTable;
use committee_distill::rng;
use committee_distill::softlabel::{batch_stats, bssl_labels, running_labels, running_stat_update, SoftLabelConfig};
use committee_distill::tensor::Tensor;
use committee_distill::voting::{committee_loss, ppg_weights, recover_loss, VoterMode};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub struct Check {
    pub ok: bool,
    pub detail: String,
}

impl Check {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Check {
            ok,
            detail: detail.into(),
        }
    }
}

/// Combines sub-checks; the detail lists every failing one, or all when none fail.
fn all(parts: Vec<Check>) -> Check {
    let ok = parts.iter().all(|c| c.ok);
    let detail = parts
        .iter()
        .filter(|c| !ok || c.ok)
        .filter(|c| ok || !c.ok)
        .map(|c| c.detail.as_str())
        .collect::<Vec<_>>()
        .join("; ");
    Check { ok, detail }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test-randn", 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

/// conv-BN-ReLU twice, global pooling and a linear head on 3×5×5 inputs,
/// with running statistics moved away from their initial values.
pub fn tiny_bn_net(seed: u64, classes: usize) -> Model {
    let mut f = LayerFactory::new(seed);
    let features = vec![
        f.conv(3, 4, 3, 1, 1),
        f.bn(4),
        Layer::Relu,
        f.conv(4, 4, 3, 1, 1),
        f.bn(4),
        Layer::Relu,
        Layer::GlobalAvgPool,
    ];
    let head = f.linear(4, classes);
    let mut m = Model::custom(BackboneSpec::new(ArchId::TinyCnn, classes, (5, 5), 4), f, features, head);
    for k in 0..3 {
        let mut x = randn(&[6, 3, 5, 5], 100 + seed * 10 + k);
        x.data_mut().iter_mut().for_each(|v| *v = 0.7 * *v + 0.3);
        let mut pass = Pass::new(NormMode::Batch, false);
        m.forward(&x, &mut pass).unwrap();
        m.apply_running_update(&pass.records, 0.5).unwrap();
    }
    m
}

/// BN followed by global pooling and an identity head: logits are the
/// per-sample spatial means of the standardized, affinely mapped input.
pub fn standardizing_net(gamma: &[f64], beta: &[f64]) -> Model {
    let c = gamma.len();
    let mut f = LayerFactory::new(0);
    let features = vec![f.bn(c), Layer::GlobalAvgPool];
    let head = f.linear(c, c);
    let mut m = Model::custom(BackboneSpec::new(ArchId::TinyCnn, c, (3, 4), c), f, features, head);
    let mut eye = vec![0.0; c * c];
    (0..c).for_each(|i| eye[i * c + i] = 1.0);
    let values = [gamma.to_vec(), beta.to_vec(), eye, vec![0.0; c]];
    for (p, v) in m.params_mut().into_iter().zip(values) {
        *p = v;
    }
    m
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖ / ‖b‖`, or the absolute norm when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nb = norm(b);
    if nb == 0.0 {
        norm(&d)
    } else {
        norm(&d) / nb
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = probe.data()[i];
            probe.data_mut()[i] = v + h;
            let up = f(&probe);
            probe.data_mut()[i] = v - h;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn criterion_1_softmax_weights() -> Check {
    let mut r = rng::stream(1, "criterion-1", 0);
    let mut scratch = rng::stream(1, "criterion-1-unused", 0);
    let mut parts = Vec::new();
    let (mut worst_sum, mut worst_shift, mut order_ok) = (0.0f64, 0.0f64, true);
    for _ in 0..200 {
        let k = r.gen_range(2..6);
        let alphas: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..100.0)).collect();
        let t = [0.5, 1.0, 4.0, 25.0][r.gen_range(0..4)];
        let w = ppg_weights(&alphas, t, VoterMode::Prior, &mut scratch).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let shift = r.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = alphas.iter().map(|a| a + shift).collect();
        let ws = ppg_weights(&shifted, t, VoterMode::Prior, &mut scratch).unwrap();
        worst_shift = worst_shift.max(max_abs_diff(&w, &ws));
        for i in 0..k {
            for j in 0..k {
                if alphas[i] > alphas[j] && w[j] > 0.0 && w[i] <= w[j] {
                    order_ok = false;
                }
            }
        }
    }
    parts.push(Check::new(worst_sum <= 1e-9, format!("sum-to-one max error {worst_sum:.1e}")));
    parts.push(Check::new(worst_shift <= 1e-12, format!("shift invariance max change {worst_shift:.1e}")));
    parts.push(Check::new(order_ok, format!("order preservation {}", if order_ok { "holds" } else { "violated" })));

    let table = PriorTable::cifar100_fixture();
    let pair = [
        table.lookup_alpha("resnet18-like").unwrap(),
        table.lookup_alpha("shufflenetv2-like").unwrap(),
    ];
    let hot = ppg_weights(&pair, 1e6, VoterMode::Prior, &mut scratch).unwrap();
    let spread = hot.iter().map(|w| (w - 0.5).abs()).fold(0.0, f64::max);
    parts.push(Check::new(spread <= 1e-5, format!("T=1e6 deviation from uniform {spread:.1e}")));
    let cold = ppg_weights(&pair, 1e-3, VoterMode::Prior, &mut scratch).unwrap();
    parts.push(Check::new(cold[0] >= 0.999, format!("T=1e-3 argmax weight {:.6}", cold[0])));
    all(parts)
}

/// Two-pass reference: per-channel mean, then mean squared deviation.
pub fn brute_force_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| x.item(i)[ch * h * w..(ch + 1) * h * w].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        means[ch] = m;
        vars[ch] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64 + eps;
    }
    (means, vars)
}

pub fn criterion_2_bn_arithmetic() -> Check {
    let mut r = rng::stream(2, "criterion-2", 0);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for case in 0..50 {
        let shape = [r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..7)];
        let mut x = randn(&shape, 1000 + case);
        let (scale, offset) = (r.gen_range(0.1..20.0), r.gen_range(-10.0..10.0));
        x.data_mut().iter_mut().for_each(|v| *v = *v * scale + offset);
        let (m, v) = batch_stats(&x, 1e-5).unwrap();
        let (bm, bv) = brute_force_stats(&x, 1e-5);
        for (got, want) in m.iter().zip(&bm).chain(v.iter().zip(&bv)) {
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
        }
    }
    parts.push(Check::new(worst <= 1e-6, format!("batch_stats max relative error {worst:.1e}")));

    let momentum = 0.9;
    let (mut rm, mut rv) = (vec![0.3, -1.0], vec![1.0, 2.5]);
    let (m0, v0) = (rm.clone(), rv.clone());
    let batches: Vec<(Vec<f64>, Vec<f64>)> = (0..25)
        .map(|_| {
            (
                vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)],
                vec![r.gen_range(0.1..3.0), r.gen_range(0.1..3.0)],
            )
        })
        .collect();
    let (mut hm, mut hv) = (rm.clone(), rv.clone());
    let mut bitwise = true;
    for (bm, bv) in &batches {
        let (nm, nv) = running_stat_update((&rm, &rv), (bm, bv), momentum).unwrap();
        for c in 0..2 {
            hm[c] = momentum * hm[c] + (1.0 - momentum) * bm[c];
            hv[c] = momentum * hv[c] + (1.0 - momentum) * bv[c];
        }
        bitwise &= nm == hm && nv == hv;
        rm = nm;
        rv = nv;
    }
    let k = batches.len() as i32;
    let closed = |init: &[f64], pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64, c: usize| {
        let mut acc = momentum.powi(k) * init[c];
        for (j, b) in batches.iter().enumerate() {
            acc += (1.0 - momentum) * momentum.powi(k - 1 - j as i32) * pick(b);
        }
        acc
    };
    let unrolled = (0..2)
        .map(|c| {
            let em = closed(&m0, &|b| b.0[c], c);
            let ev = closed(&v0, &|b| b.1[c], c);
            (rm[c] - em).abs().max((rv[c] - ev).abs())
        })
        .fold(0.0, f64::max);
    parts.push(Check::new(
        bitwise && unrolled <= 1e-12,
        format!("running update: step-by-step replay bit-identical {bitwise}, unrolled sum error {unrolled:.1e}"),
    ));

    let mut net = tiny_bn_net(3, 3);
    let before: Vec<(Vec<f64>, Vec<f64>)> = net
        .norm_layers()
        .iter()
        .map(|b| (b.running_mean.clone(), b.running_var.clone()))
        .collect();
    let mut pass = Pass::new(NormMode::Batch, false);
    net.forward(&randn(&[5, 3, 5, 5], 77), &mut pass).unwrap();
    net.apply_running_update(&pass.records, momentum).unwrap();
    let mut model_ok = true;
    for ((bn, (om, ov)), rec) in net.norm_layers().iter().zip(&before).zip(&pass.records) {
        let (em, ev) = running_stat_update((om, ov), (&rec.mean, &rec.var), momentum).unwrap();
        model_ok &= bn.running_mean == em && bn.running_var == ev;
    }
    parts.push(Check::new(model_ok, format!("model running update matches recurrence: {model_ok}")));

    let mut constant_ok = true;
    for (value, eps) in [(0.1, 1e-5), (3.7, 1e-5), (-12.25, 1e-3)] {
        let x = Tensor::full(&[4, 2, 3, 3], value);
        let (_, v) = batch_stats(&x, eps).unwrap();
        constant_ok &= v.iter().all(|&vv| vv == eps);
    }
    parts.push(Check::new(constant_ok, format!("constant-batch variance equals epsilon: {constant_ok}")));
    all(parts)
}

pub fn criterion_3_gradients() -> Check {
    let mut parts = Vec::new();
    let x = randn(&[4, 3, 5, 5], 31);
    let y = vec![0, 2, 1, 2];
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (seed, lambda) in [(11, 0.01), (12, 1.0)] {
        let net = tiny_bn_net(seed, 3);
        let (_, g) = recover_loss(&net, &x, &y, lambda).unwrap();
        let num = numeric_grad(&x, h, |p| recover_loss(&net, p, &y, lambda).unwrap().0.weighted);
        worst = worst.max(rel_err(g.data(), &num));
    }
    parts.push(Check::new(worst <= 1e-4, format!("recover_loss vs finite differences {worst:.1e}")));

    let nets: Vec<Model> = (21..24).map(|s| tiny_bn_net(s, 3)).collect();
    let weights = [0.2, 0.3, 0.5];
    let members: Vec<(&Model, f64)> = nets.iter().zip(weights).collect();
    let (_, g) = committee_loss(&members, &x, &y, 0.01).unwrap();
    let num = numeric_grad(&x, h, |p| committee_loss(&members, p, &y, 0.01).unwrap().0.total);
    let fd = rel_err(g.data(), &num);
    parts.push(Check::new(fd <= 1e-4, format!("committee_loss vs finite differences {fd:.1e}")));

    let mut summed = vec![0.0; x.len()];
    for (net, w) in &members {
        let (_, gi) = recover_loss(net, &x, &y, 0.01).unwrap();
        summed.iter_mut().zip(gi.data()).for_each(|(s, v)| *s += w * v);
    }
    let lin = rel_err(g.data(), &summed);
    parts.push(Check::new(lin <= 1e-6, format!("committee gradient vs weighted member sum {lin:.1e}")));
    all(parts)
}

pub fn criterion_4_bssl() -> Check {
    let mut parts = Vec::new();
    let cfg = SoftLabelConfig::default();
    let teacher = tiny_bn_net(41, 3);
    let digest = teacher.digest();
    let params: Vec<Vec<f64>> = teacher.params().into_iter().map(|(_, p)| p.clone()).collect();
    let stats: Vec<(Vec<f64>, Vec<f64>)> = teacher
        .norm_layers()
        .iter()
        .map(|b| (b.running_mean.clone(), b.running_var.clone()))
        .collect();
    let batch = randn(&[6, 3, 5, 5], 42);
    let first = bssl_labels(&teacher, &batch, &cfg).unwrap();
    let mut same = true;
    for _ in 0..3 {
        same &= bssl_labels(&teacher, &batch, &cfg).unwrap().logits == first.logits;
    }
    let params_after: Vec<Vec<f64>> = teacher.params().into_iter().map(|(_, p)| p.clone()).collect();
    let stats_after: Vec<(Vec<f64>, Vec<f64>)> = teacher
        .norm_layers()
        .iter()
        .map(|b| (b.running_mean.clone(), b.running_var.clone()))
        .collect();
    let untouched = params == params_after && stats == stats_after && digest == teacher.digest();
    parts.push(Check::new(
        untouched && same,
        format!("teacher bit-identical across calls {untouched}, labels repeat exactly {same}"),
    ));

    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = bssl_labels(&teacher, &batch.select(&perm), &cfg).unwrap();
    let mut worst = 0.0f64;
    for (row, &src) in perm.iter().enumerate() {
        worst = worst.max(max_abs_diff(permuted.logits.item(row), first.logits.item(src)));
    }
    parts.push(Check::new(worst <= 1e-12, format!("permutation invariance max deviation {worst:.1e}")));

    let shared = randn(&[1, 3, 5, 5], 43);
    let mut partner_b = randn(&[1, 3, 5, 5], 44);
    let partner_a = partner_b.clone();
    partner_b.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 2.0);
    let batch_a = Tensor::stack(&[&shared, &partner_a]).unwrap();
    let batch_b = Tensor::stack(&[&shared, &partner_b]).unwrap();
    let la = bssl_labels(&teacher, &batch_a, &cfg).unwrap();
    let lb = bssl_labels(&teacher, &batch_b, &cfg).unwrap();
    let moved = max_abs_diff(la.logits.item(0), lb.logits.item(0));
    let ra = running_labels(&teacher, &batch_a).unwrap();
    let rb = running_labels(&teacher, &batch_b).unwrap();
    let still = ra.logits.item(0) == rb.logits.item(0);
    parts.push(Check::new(
        moved > 1e-3 && still,
        format!("composition dependence: shared sample moves by {moved:.3} under BSSL, unchanged under running {still}"),
    ));

    let gamma = [2.0, 0.5, 1.0];
    let beta = [0.1, -0.3, 0.0];
    let net = standardizing_net(&gamma, &beta);
    let x = randn(&[5, 3, 3, 4], 45);
    let got = bssl_labels(&net, &x, &cfg).unwrap();
    let (mu, var) = brute_force_stats(&x, cfg.epsilon);
    let mut worst = 0.0f64;
    for i in 0..5 {
        for c in 0..3 {
            let px = &x.item(i)[c * 12..(c + 1) * 12];
            let want = px
                .iter()
                .map(|v| gamma[c] * (v - mu[c]) / var[c].sqrt() + beta[c])
                .sum::<f64>()
                / 12.0;
            let g = got.logits.item(i)[c];
            worst = worst.max((g - want).abs() / want.abs().max(1e-12));
        }
    }
    parts.push(Check::new(worst <= 1e-6, format!("closed-form standardization max relative error {worst:.1e}")));
    all(parts)
}

pub fn criterion_8_schedule_kd() -> Check {
    let mut parts = Vec::new();
    let unit = [0, 500, 1000].map(|s| cosine_lr(s, 1000, 1.0, 0.0, 1).unwrap());
    let shifted = [0, 500, 1000].map(|s| cosine_lr(s, 1000, 0.2, 0.01, 1).unwrap());
    let shifted_err = max_abs_diff(&shifted, &[0.2, 0.105, 0.01]);
    parts.push(Check::new(
        unit == [1.0, 0.5, 0.0] && shifted_err <= 1e-15,
        format!("cosine_lr unit endpoints/midpoint {unit:?}, shifted error {shifted_err:.1e}"),
    ));
    let student = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
    let teacher = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
    let p = softmax_rows(&teacher, 1.0).unwrap();
    let one_hot = p.data() == [1.0, 0.0];
    let (loss, _) = kd_loss(&student, &teacher, 1.0).unwrap();
    let err = (loss - std::f64::consts::LN_2).abs();
    parts.push(Check::new(
        one_hot && err <= 1e-9,
        format!("kd_loss(one-hot, uniform) - ln 2 = {err:.1e}"),
    ));
    all(parts)
}
