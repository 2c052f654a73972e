use gda_autodiff::suite::{attention_block_check, op_gradient_suite, OPS};
use gda_autodiff::{grad_check, Graph, Tensor};

#[test]
fn every_op_passes_gradient_check() {
    let report = op_gradient_suite(20, 42, 1e-6).unwrap();
    assert_eq!(report.len(), OPS.len());
    for r in &report {
        assert!(r.instances >= 20);
        assert!(r.max_rel_err < 1e-4, "{}: {:.3e}", r.op, r.max_rel_err);
    }
}

#[test]
fn attention_block_gradient() {
    let err = attention_block_check(4, 8, 42, 1e-6).unwrap();
    assert!(err < 1e-4, "attention rel err {err:.3e}");
}

#[test]
fn linear_layer_with_mse() {
    let mut rng = gda_autodiff::rng::stream(3, "linear-mse");
    let x = Tensor::randn(&[5, 4], &mut rng);
    let w = Tensor::randn(&[4, 3], &mut rng);
    let b = Tensor::randn(&[3], &mut rng);
    let target = Tensor::randn(&[5, 3], &mut rng);
    let err = grad_check(
        |g, wv| {
            let xv = g.input(x.clone());
            let bv = g.input(b.clone());
            let y = g.linear(xv, wv, bv)?;
            g.mse_loss(y, &target)
        },
        &w,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:.3e}");
}

#[test]
fn constant_function_has_zero_gradients() {
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
    let err = grad_check(
        |g, x| {
            let z = g.scale(x, 0.0)?;
            g.sum(z)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert_eq!(err, 0.0);

    let mut g = Graph::new();
    let v = g.leaf(x);
    let z = g.scale(v, 0.0).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 0.0));
}

#[test]
fn non_scalar_output_is_rejected() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    assert!(grad_check(|g, x| g.scale(x, 2.0), &x, 1e-6).is_err());
}
