mod common;

use common::{loss_and_grad, shape, utterance};
use hmctc::multitask::{LossWeights, Model};
use hmctc::numeric::grad_check;

fn stack_error(layers: usize, phone_layer: usize, lambda: f64) -> f64 {
    let a = utterance("a", 7, 3, &[1, 2, 2], &[1, 3], 1);
    let b = utterance("b", 5, 3, &[4], &[2, 2], 2);
    let batch = [&a, &b];
    let model = Model::init(shape(layers, 8, 3, Some(phone_layer)), 5).unwrap();
    let mut store = model.params.clone();
    let weights = LossWeights::interpolate(lambda);
    let report = grad_check(&mut store, 1e-5, |s| loss_and_grad(s, &model, &batch, weights)).unwrap();
    report.max_rel_error
}

#[test]
fn full_stack_phone_below_top() {
    let err = stack_error(2, 1, 0.5);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn full_stack_heads_share_top_layer() {
    let err = stack_error(2, 2, 0.5);
    assert!(err <= 1e-4, "max relative error {err}");
}
