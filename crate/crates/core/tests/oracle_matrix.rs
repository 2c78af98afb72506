// Engine-vs-reference equivalence: every hybrid variant x mixer x update
// rule against the straight-line simulator, the chunk-size sweep, the two
// architectural reductions, and the state-bookkeeping invariants.

use hqlt_core::verify;

fn assert_check(check: verify::CheckResult) {
    assert!(check.passed, "{}: {}", check.name, check.detail);
    println!("PASS {} — {}", check.name, check.detail);
}

#[test]
fn oracle_matrix_18_combos() {
    assert_check(verify::check_oracle_matrix());
}

#[test]
fn chunkwise_form_matches_recurrent_form() {
    assert_check(verify::check_chunk_invariance());
}

#[test]
fn synchronous_reduces_to_full_softmax_attention() {
    assert_check(verify::check_reduction_full_attention());
}

#[test]
fn fast_weight_branch_reduces_to_standalone_deltanet() {
    assert_check(verify::check_reduction_deltanet());
}

#[test]
fn eviction_conservation_and_duplication() {
    assert_check(verify::check_eviction_conservation());
    assert_check(verify::check_synchronous_duplication());
}

#[test]
fn delta_rule_retrieval_properties() {
    assert_check(verify::check_delta_retrieval());
    assert_check(verify::check_delta_interpolation());
    assert_check(verify::check_linear_additivity());
}

#[test]
fn causality_and_determinism() {
    assert_check(verify::check_causality());
    assert_check(verify::check_determinism());
    assert_check(verify::check_generator_determinism());
}
