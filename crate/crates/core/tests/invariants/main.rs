//! Randomized invariants over all modules.

mod props;

#[test]
fn stick_weights_sum_to_one() {
    props::stick_weights_sum_to_one().unwrap();
}

#[test]
fn dpm_parameters_stay_normalized() {
    props::dpm_parameters_stay_normalized().unwrap();
}

#[test]
fn glm_predictions_are_probability_rows() {
    props::glm_predictions_are_probability_rows().unwrap();
}

#[test]
fn glm_keeps_observed_cells() {
    props::glm_keeps_observed_cells().unwrap();
}

#[test]
fn cart_keeps_observed_cells() {
    props::cart_keeps_observed_cells().unwrap();
}

#[test]
fn dpm_keeps_observed_cells() {
    props::dpm_keeps_observed_cells().unwrap();
}

#[test]
fn gini_is_bounded() {
    props::gini_is_bounded().unwrap();
}

#[test]
fn gini_never_increases_after_a_split() {
    props::gini_never_increases_after_a_split().unwrap();
}

#[test]
fn every_tree_split_reduces_impurity() {
    props::every_tree_split_reduces_impurity().unwrap();
}

#[test]
fn pooling_ignores_imputation_order() {
    props::pooling_ignores_imputation_order().unwrap();
}

#[test]
fn estimands_respect_the_filter() {
    props::estimands_respect_the_filter().unwrap();
}
