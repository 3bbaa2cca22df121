//! Whole-model finite-difference checks.

mod common;

use common::checks::model;

#[test]
fn encoder_loss_under_every_strategy() {
    model::encoder_loss_under_every_strategy();
}

#[test]
fn gate_weights_through_softmax_and_top_k() {
    model::gate_weights_through_softmax_and_top_k();
}
