//! One test per acceptance criterion. Each prints a PASS/FAIL line followed by
//! the measured details, then asserts the verdict.

use bdm::verify::{criterion, CheckSettings};

const SEED: u64 = 1;

fn run(id: u8) {
    let outcome = criterion(id, &CheckSettings::with_seed(SEED)).expect("criterion evaluates");
    println!("criterion {id} {}: {}", outcome.name, if outcome.passed { "PASS" } else { "FAIL" });
    for line in &outcome.lines {
        println!("    {line}");
    }
    assert!(outcome.passed, "criterion {id} ({}) failed", outcome.name);
}

#[test]
fn criterion_1_exponential_table() {
    run(1);
}

#[test]
fn criterion_2_spot_anchors() {
    run(2);
}

#[test]
fn criterion_3_logistic_example() {
    run(3);
}

#[test]
fn criterion_4_higher_order_accuracy() {
    run(4);
}

#[test]
fn criterion_5_sn_round_trip() {
    run(5);
}

#[test]
fn criterion_6_ot_pushforward() {
    run(6);
}

#[test]
fn criterion_7_special_functions() {
    run(7);
}

#[test]
fn criterion_8_determinism() {
    run(8);
}
