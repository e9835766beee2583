mod checks;

use checks::gradient::{self, TOLERANCE};

fn assert_below(name: &str, worst: f64) {
    assert!(worst < TOLERANCE, "{name}: worst relative error {worst:e}");
}

#[test]
fn conv2d_gradients() {
    assert_below("conv2d", gradient::conv2d());
}

#[test]
fn relu_gradients() {
    assert_below("relu", gradient::relu());
}

#[test]
fn clipped_relu_gradients() {
    assert_below("clipped_relu", gradient::clipped_relu());
}

#[test]
fn depth_to_space_gradients() {
    assert_below("depth_to_space", gradient::depth_to_space());
}

#[test]
fn concat_gradients() {
    assert_below("concat", gradient::concat());
}

#[test]
fn charbonnier_gradients() {
    assert_below("charbonnier", gradient::charbonnier());
}

#[test]
fn full_model_loss_gradients() {
    assert_below("full model", gradient::full_model());
}
