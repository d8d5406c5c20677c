use super::*;

fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, d).unwrap()
}

#[test]
fn elementwise_examples() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2], &[0.5, -2.0]));
    assert_eq!(a.min_const(0.0).value().data(), &[0.0, -2.0]);
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let y = tape.constant(t(&[2], &[3.0, 4.0]));
    assert_eq!(x.add(&y).unwrap().value().data(), &[4.0, 6.0]);
    let z = tape.constant(t(&[2], &[-1.5, 2.0]));
    assert_eq!(z.abs().value().data(), &[1.5, 2.0]);
    assert_eq!(z.square().value().data(), &[2.25, 4.0]);
    assert_eq!(z.neg().value().data(), &[1.5, -2.0]);
    assert_eq!(z.relu().value().data(), &[0.0, 2.0]);
    assert_eq!(x.sub(&y).unwrap().value().data(), &[-2.0, -2.0]);
    assert_eq!(x.mul(&y).unwrap().value().data(), &[3.0, 8.0]);
}

#[test]
fn incompatible_shapes_name_both() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = a.add(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn broadcast_row_vector_over_matrix() {
    let tape = Tape::<f64>::new();
    let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = tape.param(t(&[3], &[10.0, 20.0, 30.0]));
    let y = a.add(&b).unwrap();
    assert_eq!(y.value().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    y.sum_all().backward().unwrap();
    // reduction-sum over the broadcast axis
    assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    let c = tape.param(t(&[2, 1], &[1.0, -1.0]));
    let z = a.mul(&c).unwrap();
    assert_eq!(z.value().data(), &[1.0, 2.0, 3.0, -4.0, -5.0, -6.0]);
    z.sum_all().backward().unwrap();
    assert_eq!(c.grad().unwrap().data(), &[6.0, 15.0]);
}

#[test]
fn matmul_examples() {
    let tape = Tape::<f64>::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(eye.matmul(&m).unwrap().value(), m.value());
    let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let c = tape.constant(t(&[2, 1], &[2.0, 3.0]));
    assert_eq!(r.matmul(&c).unwrap().value().data(), &[2.0]);

    let a = tape.param(t(&[1, 2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2, 1], &[2.0, 5.0]));
    a.matmul(&b).unwrap().sum_all().backward().unwrap();
    assert_eq!(a.grad().unwrap().data(), &[2.0, 5.0]);

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(a.matmul(&bad).is_err());
}

#[test]
fn reduction_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert_eq!(x.mean(None).unwrap().item(), 2.0);
    assert_eq!(x.sum(Some(0)).unwrap().item(), 6.0);
    let c = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
    assert_eq!(c.std(None, 0).unwrap().item(), 0.0);
    let p = tape.constant(t(&[2], &[0.0, 2.0]));
    assert_eq!(p.std(None, 0).unwrap().item(), 1.0);
    assert!((p.std(None, 1).unwrap().item() - 2f64.sqrt()).abs() < 1e-12);
    let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    assert_eq!(m.mean(Some(0)).unwrap().value().data(), &[2.5, 3.5, 4.5]);
    assert_eq!(m.sum(Some(1)).unwrap().value().data(), &[6.0, 15.0]);
    assert!(matches!(m.sum(Some(2)), Err(TensorError::Axis { axis: 2, rank: 2 })));
    let one = tape.constant(t(&[1], &[4.0]));
    assert!(matches!(one.std(None, 1), Err(TensorError::EmptyReduction(_))));
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let s = |v: &[f64]| tape.constant(t(&[v.len()], v)).softmax(0).unwrap().value();
    assert_eq!(s(&[0.0, 0.0]).data(), &[0.5, 0.5]);
    assert_eq!(s(&[1000.0, 1000.0]).data(), &[0.5, 0.5]);
    let q = s(&[0.0, 3f64.ln()]);
    assert!((q.data()[0] - 0.25).abs() < 1e-12 && (q.data()[1] - 0.75).abs() < 1e-12);
    assert!(s(&[f64::NAN, 0.0]).data().iter().all(|v| v.is_nan()));
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    x.square().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);

    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
    // mae(x, x)
    x.sub(&x).unwrap().abs().mean_all().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let loss = x.square().sum_all();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
    tape.zero_grads();
    assert!(x.grad().is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(x.square().backward(), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn every_reachable_trainable_leaf_gets_a_grad() {
    let tape = Tape::<f64>::new();
    let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.param(t(&[2], &[0.5, -0.5]));
    let unused = tape.param(t(&[1], &[1.0]));
    let k = tape.constant(t(&[2], &[1.0, 1.0]));
    a.add(&b).unwrap().mul(&k).unwrap().relu().sum_all().backward().unwrap();
    assert!(a.grad().is_some() && b.grad().is_some());
    assert!(unused.grad().is_none());
    assert!(k.grad().is_none());
}

#[test]
fn kinks_have_zero_subgradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[0.0, 0.0]));
    x.abs().add(&x.min_const(0.0)).unwrap().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn gather_and_concat_shapes() {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let g = x.gather_rows(&[0, 0, 1]).unwrap();
    assert_eq!(g.value().data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
    g.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    assert!(x.gather_rows(&[2]).is_err());
    let c = concat_rows(&[x, g]).unwrap();
    assert_eq!(c.shape(), vec![5, 2]);
    let cc = concat_cols(&[x, x]).unwrap();
    assert_eq!(cc.value().row(1), &[3.0, 4.0, 3.0, 4.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64(&[3, 4], &(0..12).map(|i| i as f64 * 0.37).collect::<Vec<_>>()).unwrap());
        let b = tape.constant(Tensor::from_f64(&[4, 2], &(0..8).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap());
        a.matmul(&b).unwrap().softmax(1).unwrap().value()
    };
    assert_eq!(run().data(), run().data());
}
