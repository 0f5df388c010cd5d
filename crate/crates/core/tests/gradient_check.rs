//! Analytic gradients against central finite differences.

use feddlr::linalg::Matrix;
use feddlr::nn::{forward_loss_grad, Batch, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Max relative error over every weight and bias entry.
fn max_rel_err(model: &Mlp, batch: &Batch) -> f64 {
    let (_, grads) = forward_loss_grad(model, batch).unwrap();
    let loss_at = |m: &Mlp| forward_loss_grad(m, batch).unwrap().0;
    let mut worst: f64 = 0.0;
    for (l, layer) in model.layers().iter().enumerate() {
        for k in 0..layer.weight.len() {
            let mut plus = model.clone();
            plus.layers_mut()[l].weight.as_mut_slice()[k] += STEP;
            let mut minus = model.clone();
            minus.layers_mut()[l].weight.as_mut_slice()[k] -= STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.layers[l].weight.as_slice()[k], numeric));
        }
        for k in 0..layer.bias.len() {
            let mut plus = model.clone();
            plus.layers_mut()[l].bias[k] += STEP;
            let mut minus = model.clone();
            minus.layers_mut()[l].bias[k] -= STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.layers[l].bias[k], numeric));
        }
    }
    worst
}

fn random_case(seed: u64, dims: &[usize], b: usize) -> (Mlp, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mlp::init(dims, &mut rng).unwrap();
    for layer in model.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let inputs = Matrix::from_fn(b, dims[0], |_, _| rng.random_range(-2.0..2.0));
    let classes = *dims.last().unwrap();
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    (model, Batch::new(inputs, labels).unwrap())
}

#[test]
fn three_layer_model_batch_of_four() {
    let (model, batch) = random_case(7, &[6, 8, 5, 4], 4);
    let err = max_rel_err(&model, &batch);
    assert!(err <= TOL, "max relative error {err:e}");
}

#[test]
fn twenty_seeded_models() {
    for seed in 0..20u64 {
        let (model, batch) = random_case(100 + seed, &[5, 7, 6, 3], 4);
        let err = max_rel_err(&model, &batch);
        assert!(err <= TOL, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn single_layer_softmax_regression() {
    let (model, batch) = random_case(3, &[4, 3], 6);
    assert!(max_rel_err(&model, &batch) <= TOL);
}
