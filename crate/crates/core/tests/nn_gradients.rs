//! Finite-difference verification of the backward pass, one model per layer
//! kind. The oracle is central differences of the train-mode loss — no reuse
//! of any analytic gradient code.

use sca_core::lca::{self, LcaConfig};
use sca_core::nn::{
    backward_check, backward_check_sampled, LayerKind, LayerSpec, Model, ModelSpec,
};
use sca_core::tensor::{self, Tensor};
use sca_core::Rng;

fn random_batch(shape: &[usize], classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let mut x = Tensor::zeros(shape);
    rng.fill_normal(x.data_mut(), 1.0);
    // keep inputs in a sane image-ish range
    for v in x.data_mut() {
        *v = (*v * 0.25 + 0.5).clamp(0.0, 1.0);
    }
    let labels = (0..shape[0]).map(|i| i % classes).collect();
    (x, labels)
}

#[test]
fn linear_stack_gradients_match_finite_differences() {
    let spec = ModelSpec {
        input_shape: vec![1, 4, 4],
        layers: vec![
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Linear {
                inputs: 16,
                outputs: 7,
            }),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(LayerKind::Linear {
                inputs: 7,
                outputs: 3,
            }),
        ],
        classes: 3,
        seed: 42,
    };
    let model = Model::init(spec).unwrap();
    let (x, y) = random_batch(&[6, 1, 4, 4], 3, 1);
    let err = backward_check(&model, &x, &y).unwrap();
    assert!(err < 1e-5, "linear stack rel err {err}");
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let spec = ModelSpec {
        input_shape: vec![1, 4, 4],
        layers: vec![
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Linear {
                inputs: 16,
                outputs: 6,
            }),
            LayerSpec::new(LayerKind::BatchNorm { features: 6 }),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(LayerKind::Linear {
                inputs: 6,
                outputs: 3,
            }),
        ],
        classes: 3,
        seed: 7,
    };
    let model = Model::init(spec).unwrap();
    let (x, y) = random_batch(&[8, 1, 4, 4], 3, 2);
    let err = backward_check(&model, &x, &y).unwrap();
    assert!(err < 1e-4, "batch-norm stack rel err {err}");
}

#[test]
fn channelwise_batch_norm_gradients_match_finite_differences() {
    // Batch-norm applied to an image (per channel over N·H·W) rather than a
    // flat vector.
    let spec = ModelSpec {
        input_shape: vec![2, 3, 3],
        layers: vec![
            LayerSpec::new(LayerKind::BatchNorm { features: 2 }),
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Linear {
                inputs: 18,
                outputs: 2,
            }),
        ],
        classes: 2,
        seed: 12,
    };
    let model = Model::init(spec).unwrap();
    let (x, y) = random_batch(&[5, 2, 3, 3], 2, 3);
    let err = backward_check(&model, &x, &y).unwrap();
    assert!(err < 1e-4, "channelwise batch-norm rel err {err}");
}

#[test]
fn sigmoid_stack_gradients_match_finite_differences() {
    let spec = ModelSpec {
        input_shape: vec![9],
        layers: vec![
            LayerSpec::new(LayerKind::Linear {
                inputs: 9,
                outputs: 5,
            }),
            LayerSpec::new(LayerKind::Sigmoid),
            LayerSpec::new(LayerKind::Linear {
                inputs: 5,
                outputs: 2,
            }),
        ],
        classes: 2,
        seed: 23,
    };
    let model = Model::init(spec).unwrap();
    let (x, y) = random_batch(&[6, 9], 2, 4);
    let err = backward_check(&model, &x, &y).unwrap();
    assert!(err < 1e-4, "sigmoid stack rel err {err}");
}

#[test]
fn zero_batch_with_zero_parameters_gives_zero_gradients() {
    // Zero inputs through zero weights leave every logit at zero; with
    // balanced labels the bias gradient cancels too, so analytic and
    // finite-difference gradients are both (numerically) zero.
    let spec = ModelSpec {
        input_shape: vec![4],
        layers: vec![LayerSpec::new(LayerKind::Linear {
            inputs: 4,
            outputs: 2,
        })],
        classes: 2,
        seed: 0,
    };
    let mut model = Model::init(spec).unwrap();
    if let sca_core::nn::Layer::Linear { w, b } = &mut model.layers[0] {
        *w = Tensor::zeros(&[2, 4]);
        *b = Tensor::zeros(&[2]);
    }
    let x = Tensor::zeros(&[4, 4]);
    let labels = vec![0, 1, 0, 1];
    let err = backward_check(&model, &x, &labels).unwrap();
    assert!(err < 1e-4, "degenerate case rel err {err}");
}

/// Parameters upstream of a sparse-coding layer: their finite-difference
/// gradient goes through the full code solve, so agreement here validates
/// the support-restricted implicit gradient. The solver config must be well
/// past convergence — the analytic gradient is exact only at a fixed point.
#[test]
fn gradients_through_sparse_layer_match_finite_differences() {
    let lca_cfg = LcaConfig {
        lambda: 0.12,
        tau: 3.0,
        iterations: 3000,
        step: 1.0,
    };
    let spec = ModelSpec {
        input_shape: vec![1, 5, 5],
        layers: vec![
            LayerSpec::new(LayerKind::Scl {
                features: 2,
                kernel: 3,
                stride: (1, 1),
                lca: lca_cfg,
            }),
            LayerSpec::new(LayerKind::BatchNorm { features: 2 }),
            LayerSpec::new(LayerKind::Scl {
                features: 3,
                kernel: 3,
                stride: (1, 1),
                lca: lca_cfg,
            }),
            LayerSpec::new(LayerKind::BatchNorm { features: 3 }),
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Linear {
                inputs: 75,
                outputs: 2,
            }),
        ],
        classes: 2,
        seed: 61,
    };
    let model = Model::init(spec).unwrap();
    let (x, y) = random_batch(&[2, 1, 5, 5], 2, 5);
    let err = backward_check_sampled(&model, &x, &y, 24).unwrap();
    assert!(err < 1e-4, "sparse-layer stack rel err {err}");
}

/// The dictionary update direction is the gradient of the reconstruction
/// objective ½‖x − code⊛Ω‖² in the atoms, holding the code fixed. The oracle
/// evaluates that objective directly through `conv2d_transpose`, bypassing
/// the gradient code entirely.
#[test]
fn dictionary_update_gradient_matches_finite_differences() {
    let mut rng = Rng::new(19);
    let dict = lca::Dictionary::random(4, 1, 3, 3, (1, 1), &mut rng).unwrap();
    let mut x = Tensor::zeros(&[1, 6, 6]);
    rng.fill_normal(x.data_mut(), 1.0);
    let cfg = LcaConfig {
        lambda: 0.1,
        tau: 4.0,
        iterations: 1200,
        step: 1.0,
    };
    let state = lca::lca_solve(&x, &dict, &cfg).unwrap();
    assert!(state.code.count_active(0.0) > 0, "need a non-trivial code");

    let grad = lca::reconstruction_grad(&dict, &x, &state).unwrap();

    let objective = |atoms: &Tensor| -> f64 {
        let recon =
            tensor::conv2d_transpose(&state.code, atoms, dict.stride(), (6, 6)).unwrap();
        let diff = x.sub(&recon).unwrap();
        0.5 * diff.dot(&diff).unwrap()
    };

    let h = 1e-6;
    let n = dict.atoms().len();
    let mut worst: f64 = 0.0;
    // Probe a spread of coordinates, not just the corner.
    for coord in (0..n).step_by(n.div_ceil(12).max(1)) {
        let mut plus = dict.atoms().clone();
        plus.data_mut()[coord] += h;
        let mut minus = dict.atoms().clone();
        minus.data_mut()[coord] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let an = grad.data()[coord];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-5, "dictionary gradient rel err {worst}");
}
