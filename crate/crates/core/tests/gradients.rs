//! Backprop against central finite differences in 64-bit mode.

mod common;

use common::{gradient_check, LossKind};

fn assert_close(kind: LossKind) {
    let errs = gradient_check(kind, 24, 11);
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst < 1e-4, "{kind:?}: worst relative error {worst:e} in {errs:?}");
}

#[test]
fn vae_loss_gradients() {
    assert_close(LossKind::Vae);
}

#[test]
fn discriminator_loss_gradients() {
    assert_close(LossKind::Disc);
}

#[test]
fn confusion_loss_gradients() {
    assert_close(LossKind::Confusion);
}
