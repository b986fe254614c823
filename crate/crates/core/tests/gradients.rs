//! Analytic gradients of every trainable component against central
//! differences at float64.

use kefs_core::gradcheck::suite::{self, TOLERANCE};
use kefs_core::gradcheck::GradCheck;

fn assert_close(what: &str, r: GradCheck) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(
        r.max_rel_error < TOLERANCE,
        "{what}: {} [{}] analytic {} numeric {} (rel {:.2e})",
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric,
        r.max_rel_error
    );
}

#[test]
fn gcn_weights() {
    assert_close("gcn", suite::gcn());
}

#[test]
fn attention_stack_cross_and_self() {
    assert_close("cross", suite::attention(true));
    assert_close("self", suite::attention(false));
}

#[test]
fn knowledge_encoder() {
    assert_close("knowledge encoder", suite::knowledge_encoder());
}

#[test]
fn content_encoder_and_decoder() {
    assert_close("content + decoder", suite::content_and_decoder());
}

#[test]
fn graph_loss_head_and_knowledge() {
    assert_close("graph loss", suite::graph_loss());
}

#[test]
fn denoiser_reconstruction() {
    assert_close("per step", suite::denoiser(false));
    assert_close("shared", suite::denoiser(true));
}

#[test]
fn critic_with_gradient_penalty() {
    assert_close("critic", suite::critic());
}

#[test]
fn end_to_end_total_loss() {
    assert_close("total loss", suite::total_loss());
}
