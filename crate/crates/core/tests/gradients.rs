mod common;

use common::gradsuite::{block_checks, op_checks};
use common::GRAD_TOL;

#[test]
fn every_op_matches_finite_differences() {
    let failures: Vec<String> = op_checks(1)
        .into_iter()
        .filter(|c| !(c.worst < GRAD_TOL))
        .map(|c| format!("{}: {:.3e}", c.name, c.worst))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn every_block_matches_finite_differences() {
    let failures: Vec<String> = block_checks(2)
        .into_iter()
        .filter(|c| !(c.worst < GRAD_TOL))
        .map(|c| format!("{}: {:.3e}", c.name, c.worst))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn models_match_finite_differences() {
    let failures: Vec<String> = common::gradsuite::model_checks(3)
        .into_iter()
        .filter(|c| !(c.worst < GRAD_TOL))
        .map(|c| format!("{}: {:.3e}", c.name, c.worst))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}
