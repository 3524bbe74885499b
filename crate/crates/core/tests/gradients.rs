mod common;

use common::grad::{self, Check, TOLERANCE};

fn assert_close(c: Check, what: &str) {
    assert!(c.scalars > 0, "no {what} parameters probed");
    assert!(c.error < TOLERANCE, "{what} relative error {}", c.error);
}

#[test]
fn instances_are_small() {
    assert!(grad::head_scalars() <= 1000);
    assert!(grad::vae_scalars() <= 1000);
}

#[test]
fn detector_gradients_match_finite_differences() {
    assert_close(grad::detector(), "detector");
}

#[test]
fn descriptor_gradients_match_finite_differences() {
    assert_close(grad::descriptor(), "descriptor");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    assert_close(grad::encoder(), "encoder");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    assert_close(grad::decoder(), "decoder");
}

#[test]
fn correspondence_nll_gradient_matches_finite_differences() {
    let (check, gap) = grad::correspondence();
    assert!(gap < 1e-12, "taped and plain values differ by {gap}");
    assert_close(check, "correspondence");
}
