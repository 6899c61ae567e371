//! Central finite-difference checks for every differentiable tensor operation.

mod support;

use mujo::tensor::gradcheck::random_tensor;
use mujo::tensor::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn every_op_matches_finite_differences() {
    let suite = support::gradients::op_suite();
    let failures = suite.failures();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn batch_norm_inference_mode_gradient() {
    // Running statistics path: the op is affine in x, gamma and beta.
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let rm = store.add_buffer("rm", random_tensor(&[2], 0.5, &mut r));
    let rv = store.add_buffer("rv", Tensor::new(&[2], vec![0.7, 1.3]).unwrap());
    let x = random_tensor(&[2, 2, 1, 3], 1.0, &mut r);
    let gamma = random_tensor(&[2], 1.0, &mut r);
    let mut g = Graph::new(&store, false);
    let xv = g.input_with_grad(x.clone());
    let gv = g.input(gamma.clone());
    let bv = g.input(Tensor::zeros(&[2]));
    let y = g.batch_norm2d(xv, gv, bv, rm, rv, 0.1, 1e-5).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let gx = grads.input(xv).unwrap();
    for b in 0..2 {
        for c in 0..2 {
            for i in 0..3 {
                let expected = gamma.data()[c] / (store.get(rv).data()[c] + 1e-5).sqrt();
                assert!((gx.data()[(b * 2 + c) * 3 + i] - expected).abs() < 1e-12);
            }
        }
    }
}
