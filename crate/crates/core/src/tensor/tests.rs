use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    let x = t(&[2], &[1.0, 2.0]);
    assert!(x.grad().iter().all(|&g| g == 0.0));
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let w = tape.param(&t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.param(&t(&[1], &[0.0]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &[2.0]);
}

#[test]
fn conv_sums_support_region() {
    // 2x2 all-ones kernel is even-sized; emulate with a 3x3 kernel whose
    // top-left 2x2 block is ones, padded so the support covers the input.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mut kernel = vec![0.0; 9];
    for (i, k) in kernel.iter_mut().enumerate() {
        if i % 3 >= 1 && i / 3 >= 1 {
            *k = 1.0;
        }
    }
    let w = tape.param(&t(&[1, 1, 3, 3], &kernel));
    let b = tape.param(&t(&[1], &[0.0]));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    // output (0,0) covers input rows/cols 0..2 through the ones block
    assert_eq!(tape.value(y)[0], 10.0);
}

#[test]
fn conv_rejects_even_kernel_and_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 3, 3], &[0.0; 18]));
    let w_even = tape.param(&Tensor::zeros(&[1, 2, 2, 2]));
    let b = tape.param(&Tensor::zeros(&[1]));
    assert!(tape.conv2d(x, w_even, b, 1, 0).is_err());
    let w_bad = tape.param(&Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, w_bad, b, 1, 0).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");
}

#[test]
fn conv_degenerate_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = tape.param(&Tensor::zeros(&[1, 1, 3, 3]));
    let b = tape.param(&Tensor::zeros(&[1]));
    assert!(matches!(
        tape.conv2d(x, w, b, 1, 0),
        Err(crate::NfsError::DegenerateOutput { .. })
    ));
}

#[test]
fn affine_identity_and_constant_maps() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]));
    let eye = tape.param(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero_b = tape.param(&Tensor::zeros(&[2]));
    let y = tape.affine(x, eye, zero_b).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let zero_w = tape.param(&Tensor::zeros(&[2, 3]));
    let b = tape.param(&t(&[3], &[0.5, 1.0, -1.0]));
    let y = tape.affine(x, zero_w, b).unwrap();
    assert_eq!(tape.value(y), &[0.5, 1.0, -1.0, 0.5, 1.0, -1.0]);
    let bad = tape.param(&Tensor::zeros(&[3, 3]));
    assert!(tape.affine(x, bad, b).is_err());
}

#[test]
fn batch_norm_train_normalizes() {
    let mut tape = Tape::<f64>::new();
    let vals: Vec<f64> = (0..12).map(|i| (i as f64).powi(2) * 0.3 - 2.0).collect();
    let x = tape.constant(t(&[4, 3], &vals));
    let g = tape.param(&Tensor::full(&[3], 1.0));
    let b = tape.param(&Tensor::zeros(&[3]));
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
    assert_eq!(stats.unwrap().count, 4);
    let y = tape.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..4).map(|r| y[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batch_norm_eval_identity_stats() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[0.15, -0.1]));
    let g = tape.param(&Tensor::full(&[2], 1.0));
    let b = tape.param(&Tensor::zeros(&[2]));
    let mean = [0.0, 0.0];
    let var = [1.0, 1.0];
    let (y, stats) = tape
        .batch_norm(x, g, b, BnMode::Eval { mean: &mean, var: &var })
        .unwrap();
    assert!(stats.is_none());
    for (a, e) in tape.value(y).iter().zip([0.15, -0.1]) {
        assert!((a - e).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_rejects_single_row_in_train() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    let g = tape.param(&Tensor::full(&[2], 1.0));
    let b = tape.param(&Tensor::zeros(&[2]));
    assert!(matches!(
        tape.batch_norm(x, g, b, BnMode::Train),
        Err(crate::NfsError::DegenerateBatch { .. })
    ));
}

#[test]
fn global_pool_constant_singleton_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[2, 3, 4, 2], 1.25).with_requires_grad(true));
    let y = tape.global_avg_pool(x).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 1.25));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).iter().all(|&g| (g - 1.0 / 8.0).abs() < 1e-15));

    let z = tape.constant(t(&[1, 2, 1, 1], &[3.0, -4.0]));
    let p = tape.global_avg_pool(z).unwrap();
    assert_eq!(tape.value(p), &[3.0, -4.0]);
}

#[test]
fn backward_of_sum_is_ones_and_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x), &[1.0, 1.0, 1.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x), &[2.0, 2.0, 2.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(x), &[0.0, 0.0, 0.0]);
}

#[test]
fn constant_loss_gives_zero_grads() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let zero = tape.scale(x, 0.0);
    let s = tape.sum(zero);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x), &[0.0, 0.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(crate::NfsError::NonScalarLoss(_))));
    let mut other = Tape::<f64>::new();
    let s = other.leaf(Tensor::scalar(1.0));
    let _ = s;
    assert!(matches!(Tape::<f64>::new().backward(s), Err(crate::NfsError::Detached)));
}

#[test]
fn shared_subexpression_counts_each_path_once() {
    // loss = sum(x*x + x) -> d/dx = 2x + 1
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[3.0, -1.0]).with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x), &[7.0, -1.0]);
}

#[test]
fn gate_mask_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let pix = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let ones = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
    let y = tape
        .gate_mask(x, [pix, ones], &[Modality::Rgb], GateLevel::Pixel)
        .unwrap();
    assert_eq!(tape.value(y), &[1.0, 0.0, 0.0, 4.0]);
    // ir row uses the second gate
    let y = tape
        .gate_mask(x, [pix, ones], &[Modality::Ir], GateLevel::Pixel)
        .unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let bad = tape.constant(Tensor::full(&[2], 1.0));
    assert!(tape
        .gate_mask(x, [bad, bad], &[Modality::Rgb], GateLevel::Channel)
        .is_err());
}

#[test]
fn ste_gate_passes_gradient_through_sigmoid() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(t(&[1], &[0.0]).with_requires_grad(true));
    let g = tape.ste_gate(p, vec![1.0]).unwrap();
    let loss = tape.scale(g, 0.3);
    let loss = tape.sum(loss);
    tape.backward(loss).unwrap();
    assert!((tape.grad(g)[0] - 0.3).abs() < 1e-15);
    assert!((tape.grad(p)[0] - 0.075).abs() < 1e-15);
}

use crate::modality::Modality;
