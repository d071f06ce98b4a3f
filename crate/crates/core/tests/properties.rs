mod common;

use committee_distill::analysis::cosine_report;
use committee_distill::augment::{AugmentFlags, AugmentPlan};
use committee_distill::optim::cosine_lr;
use committee_distill::posteval::{cutmix, kd_loss};
use committee_distill::rng;
use committee_distill::softlabel::{batch_stats, running_stat_update};
use committee_distill::voting::{ppg_weights, sample_committee, VoterMode, VotingConfig};
use committee_distill::Error;
use common::{brute_force_stats, numeric_grad, randn, rel_err};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augment_backward_is_the_adjoint(seed in 0u64..1000, n in 1usize..4, h in 4usize..12, w in 4usize..12, out in 3usize..10) {
        let mut r = rng::stream(seed, "prop-augment", 0);
        let plan = AugmentPlan::sample(n, (h, w), (out, out), &AugmentFlags::default(), &mut r);
        let x = randn(&[n, 2, h, w], seed);
        let y = randn(&[n, 2, out, out], seed + 1);
        let lhs = dot(plan.apply(&x).unwrap().data(), y.data());
        let rhs = dot(x.data(), plan.backward(&y).unwrap().data());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn committee_samples_are_sorted_distinct_and_reproducible(size in 2usize..9, pick in 2usize..9, seed in 0u64..500, draw in 0u64..50) {
        let n = pick.min(size);
        let cfg = VotingConfig { n, seed, ..Default::default() };
        let s = sample_committee(size, &cfg, draw).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(s.iter().all(|&i| i < size));
        prop_assert_eq!(s, sample_committee(size, &cfg, draw).unwrap());
    }

    #[test]
    fn every_voter_mode_lands_on_the_simplex(alphas in prop::collection::vec(0.0f64..100.0, 1..7), t in 0.05f64..50.0, seed in 0u64..100) {
        let mut r = rng::stream(seed, "prop-voter", 0);
        for mode in [VoterMode::Prior, VoterMode::Equal, VoterMode::Random] {
            let w = ppg_weights(&alphas, t, mode, &mut r).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn batch_stats_match_two_pass_reference(seed in 0u64..1000, n in 1usize..5, c in 1usize..4, h in 1usize..6, w in 1usize..6, eps in 1e-8f64..1e-2) {
        let x = randn(&[n, c, h, w], seed);
        let (m, v) = batch_stats(&x, eps).unwrap();
        let (bm, bv) = brute_force_stats(&x, eps);
        for (a, b) in m.iter().zip(&bm) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        for (a, b) in v.iter().zip(&bv) {
            prop_assert!((a - b).abs() <= 1e-6 * b);
        }
    }

    #[test]
    fn running_update_stays_between_old_and_batch(r in -5.0f64..5.0, b in -5.0f64..5.0, momentum in 0.0f64..=1.0) {
        let (m, _) = running_stat_update((&[r], &[1.0]), (&[b], &[1.0]), momentum).unwrap();
        prop_assert!(m[0] >= r.min(b) - 1e-12 && m[0] <= r.max(b) + 1e-12);
    }

    #[test]
    fn cosine_lr_is_bounded_and_non_increasing_in_one_cycle(total in 1usize..500, base in 0.01f64..1.0, frac in 0.0f64..1.0) {
        let min = base * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, base, min, 1).unwrap();
            prop_assert!(lr <= base + 1e-15 && lr >= min - 1e-15);
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn cutmix_lambda_matches_the_pasted_area(seed in 0u64..1000, n in 2usize..6, side in 2usize..12) {
        let x = randn(&[n, 3, side, side], seed);
        let labels: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(seed, "prop-cutmix", 0);
        let m = cutmix(&x, &labels, &mut r, 1.0).unwrap();
        let area = (m.cut.y1 - m.cut.y0) * (m.cut.x1 - m.cut.x0);
        prop_assert_eq!(m.lambda, 1.0 - area as f64 / (side * side) as f64);
        for i in 0..n {
            prop_assert_eq!(m.labels_b[i], labels[m.partner[i]]);
            let (own, mixed) = (x.item(i), m.images.item(i));
            let (src, row) = (x.item(m.partner[i]), |ch: usize, y: usize| (ch * side + y) * side);
            for ch in 0..3 {
                for y in 0..side {
                    for xx in 0..side {
                        let inside = (m.cut.y0..m.cut.y1).contains(&y) && (m.cut.x0..m.cut.x1).contains(&xx);
                        let want = if inside { src[row(ch, y) + xx] } else { own[row(ch, y) + xx] };
                        prop_assert_eq!(mixed[row(ch, y) + xx], want);
                    }
                }
            }
        }
    }

    #[test]
    fn cosine_similarity_ignores_positive_scaling(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let e = randn(&[6, 5], seed);
        let labels = [0, 1, 0, 1, 0, 1];
        let mut scaled = e.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= scale);
        let a = cosine_report(&e, &labels, 2, "x").unwrap();
        let b = cosine_report(&scaled, &labels, 2, "x").unwrap();
        prop_assert!((a.overall_mean - b.overall_mean).abs() <= 1e-12);
        prop_assert!(a.per_class.values().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn kd_gradient_matches_finite_differences() {
    let teacher = randn(&[3, 4], 5);
    let student = randn(&[3, 4], 6);
    for tau in [1.0, 2.5] {
        let (_, g) = kd_loss(&student, &teacher, tau).unwrap();
        let num = numeric_grad(&student, 1e-6, |s| kd_loss(s, &teacher, tau).unwrap().0);
        assert!(rel_err(g.data(), &num) < 1e-7);
    }
}

#[test]
fn momentum_outside_unit_interval_is_rejected() {
    for m in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(
            running_stat_update((&[0.0], &[1.0]), (&[1.0], &[1.0]), m),
            Err(Error::InvalidMomentum(_))
        ));
    }
}

#[test]
fn cosine_lr_restarts_each_cycle() {
    let at = |s| cosine_lr(s, 300, 1.0, 0.0, 3).unwrap();
    assert_eq!(at(0), 1.0);
    assert_eq!(at(100), 1.0);
    assert_eq!(at(200), 1.0);
    assert_eq!(at(300), 0.0);
    assert!(at(99) < 0.01);
    assert!(matches!(cosine_lr(301, 300, 1.0, 0.0, 3), Err(Error::Range { .. })));
}

#[test]
fn identity_plan_is_exact() {
    let x = randn(&[2, 3, 5, 7], 9);
    let plan = AugmentPlan::identity(2, (5, 7));
    assert_eq!(plan.apply(&x).unwrap(), x);
    assert_eq!(plan.backward(&x).unwrap(), x);
}
