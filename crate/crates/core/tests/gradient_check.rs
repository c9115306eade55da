mod common;

use common::*;
use embsqueeze::models::Model;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const L2: f64 = 0.005;

fn check(model: &Model, seed: u64) {
    let batch = toy_batch(seed, 4, 6, 3, 5);
    let r = finite_difference_check(model, &batch, L2, EPS, None);
    assert!(r.max_rel_err <= TOL, "max relative error {:e} at {}", r.max_rel_err, r.worst);
    assert_eq!(r.checked, model.parameter_count());
}

#[test]
fn dan_plain_embedding() {
    for seed in 0..3 {
        check(&toy_dan(seed, [7, 5]), seed + 100);
    }
}

#[test]
fn dan_factorized_embedding() {
    for seed in 0..3 {
        let mut m = toy_dan(seed, [7, 5]);
        m.factorize_embedding_rank(3).unwrap();
        check(&m, seed + 200);
    }
}

#[test]
fn lstm_plain_embedding() {
    for seed in 0..3 {
        check(&toy_lstm(seed, 5), seed + 300);
    }
}

#[test]
fn lstm_factorized_embedding() {
    for seed in 0..3 {
        let mut m = toy_lstm(seed, 5);
        m.factorize_embedding_rank(2).unwrap();
        check(&m, seed + 400);
    }
}

#[test]
fn dan_full_width_sampled() {
    let m = toy_dan(9, [1024, 512]);
    let batch = toy_batch(9, 3, 6, 3, 5);
    let r = finite_difference_check(&m, &batch, L2, EPS, Some(12));
    assert!(r.max_rel_err <= TOL, "max relative error {:e} at {}", r.max_rel_err, r.worst);
    let expected: usize = m.named_tensors().iter().map(|(_, t)| t.len().min(12)).sum();
    assert_eq!(r.checked, expected);
}
