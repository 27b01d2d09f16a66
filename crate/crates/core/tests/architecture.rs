mod common;

fn check(c: common::Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}

#[test]
fn zeroed_fusion_scales_interaction_by_one_and_a_half() {
    check(common::fusion_closed_form());
}

#[test]
fn final_layer_is_not_fused() {
    check(common::last_layer_unfused());
}

#[test]
fn shared_encoder_head_gives_identical_representations() {
    check(common::shared_encoder_heads());
}

#[test]
fn heads_shared_within_and_distinct_across_decoders() {
    check(common::head_sharing());
}

#[test]
fn probability_rows_are_normalized() {
    check(common::softmax_rows());
}
