mod common;

use common::*;

#[test]
fn softmax_weight_suite() {
    let c = criterion_1_softmax_weights();
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn bn_arithmetic_oracles() {
    let c = criterion_2_bn_arithmetic();
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn synthesis_gradients_match_finite_differences() {
    let c = criterion_3_gradients();
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn bssl_semantics() {
    let c = criterion_4_bssl();
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn schedule_and_kd_closed_forms() {
    let c = criterion_8_schedule_kd();
    assert!(c.ok, "{}", c.detail);
}
