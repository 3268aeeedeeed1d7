//! Per-role weight matrices and masking soundness.

mod common;

use common::checks;

#[test]
fn popcount_identities_on_random_shapes() {
    checks::weight_popcounts(1, 50).unwrap();
}

#[test]
fn losses_ignore_everything_off_the_weights() {
    checks::sparsity_leak(2, 20).unwrap();
}

#[test]
fn training_step_ignores_ground_truth_off_the_slices() {
    checks::training_sparsity_leak(3).unwrap();
}
