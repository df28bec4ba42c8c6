use super::*;
use crate::error::Error;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn conv1d_hand_cross_correlation() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 2.0, 3.0]]));
    let w = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
    let y = tape.conv1d(x, w, 1, Padding::Valid).unwrap();
    assert_eq!(tape.value(y).data(), &[-2.0]);
    assert_eq!(tape.shape(y), &[1, 1]);
}

#[test]
fn conv1d_identity_kernel_and_zero_input() {
    let mut tape = Tape::new();
    let data = t2(&[&[0.3, -1.5, 2.25, 7.0]]);
    let x = tape.constant(data.clone());
    let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv1d(x, w, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y), &data);

    let z = tape.constant(Tensor::zeros(&[2, 5]));
    let w = tape.constant(Tensor::new(vec![3, 2, 3], (0..18).map(|v| v as f64).collect()).unwrap());
    let y = tape.conv1d(z, w, 1, Padding::Same).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    assert_eq!(tape.shape(y), &[3, 5]);
}

#[test]
fn conv1d_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 5]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let err = tape.conv1d(x, w, 1, Padding::Same).unwrap_err();
    assert!(err.to_string().contains("3 input channels but input has 2"), "{err}");
}

#[test]
fn conv1d_output_length_formula() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 100]));
    let w = tape.constant(Tensor::zeros(&[2, 1, 5]));
    let y = tape.conv1d(x, w, 2, Padding::Same).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 50]);
    let y = tape.conv1d(x, w, 3, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, (100 - 5) / 3 + 1]);
}

#[test]
fn depthwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
    let w = tape.constant(t2(&[&[1.0], &[2.0]]));
    let y = tape.depthwise_conv1d(x, w, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);

    let x = tape.constant(t2(&[&[1.0, 2.0, 3.0]]));
    let w = tape.constant(t2(&[&[1.0, 1.0]]));
    let y = tape.depthwise_conv1d(x, w, 1, Padding::Valid).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

    let w = tape.constant(t2(&[&[1.0], &[1.0]]));
    assert!(tape.depthwise_conv1d(x, w, 1, Padding::Valid).is_err());
}

#[test]
fn depthwise_channels_are_independent() {
    let base = t2(&[&[0.1, 0.4, -0.2, 0.9], &[1.0, -1.0, 0.5, 0.25]]);
    let mut perturbed = base.clone();
    perturbed.data_mut()[1] += 3.0;
    let run = |input: Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let w = tape.constant(t2(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]]));
        let y = tape.depthwise_conv1d(x, w, 1, Padding::Same).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(base), run(perturbed));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t2(&[&[1.0, 2.0]]));
    let b = tape.constant(t2(&[&[3.0], &[4.0]]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0]);

    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let y = tape.matmul(z, m).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

    let bad = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.matmul(m, bad), Err(Error::Shape { .. })));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_slice(&[0.0, -3.0, 3.0]));
    let s = tape.sigmoid(x);
    let r = tape.relu(x);
    let w = tape.swish(x);
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    assert_eq!(tape.value(w).data()[0], 0.0);
    let big = tape.constant(Tensor::from_slice(&[-800.0, 800.0]));
    let s = tape.sigmoid(big);
    assert!(tape.value(s).data().iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_slice(&[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::from_slice(&[1.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    let e = std::f64::consts::E;
    close(tape.value(y).data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12);
    close(tape.value(y).data(), &[0.7311, 0.2689], 1e-4);

    let x = tape.constant(Tensor::from_slice(&[1000.0, 999.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_along_inner_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 5.0]]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 2.0, 3.0]]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0]);

    let x = tape.constant(t2(&[&[4.5, 4.5, 4.5, 4.5]]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.5]);

    let e = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(tape.global_avg_pool(e).is_err());
}

#[test]
fn concat_and_narrow_recover_parts() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
    let b = tape.constant(Tensor::from_slice(&[3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

    let empty = tape.constant(Tensor::zeros(&[0]));
    let c2 = tape.concat(&[a, empty], 0).unwrap();
    assert_eq!(tape.value(c2), tape.value(a));

    let m1 = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let m2 = tape.constant(t2(&[&[5.0], &[6.0]]));
    let m = tape.concat(&[m1, m2], 1).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let back1 = tape.narrow(m, 1, 0, 2).unwrap();
    let back2 = tape.narrow(m, 1, 2, 1).unwrap();
    assert_eq!(tape.value(back1), tape.value(m1));
    assert_eq!(tape.value(back2), tape.value(m2));

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(tape.concat(&[m1, bad], 1).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x), Tensor::ones(&[2, 3]));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]).with_requires_grad(true));
    let unused = tape.leaf(Tensor::from_slice(&[5.0, 6.0, 7.0]).with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused), Tensor::zeros(&[3]));

    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn gather_and_select_rows() {
    let mut tape = Tape::new();
    let table = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]).with_requires_grad(true));
    let row = tape.gather(table, &[1]).unwrap();
    assert_eq!(tape.value(row).data(), &[3.0, 4.0]);
    assert!(matches!(
        tape.gather(table, &[2]),
        Err(Error::IndexOutOfRange { index: 2, size: 2 })
    ));

    let a = tape.constant(t2(&[&[1.0], &[2.0]]));
    let b = tape.constant(t2(&[&[-1.0], &[-2.0]]));
    let s = tape.select_rows(&[true, false], a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, -2.0]);
}

#[test]
fn grad_check_examples() {
    let x = Tensor::from_slice(&[1.0, 2.0, 3.0]);
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");

    let x = Tensor::from_slice(&[-0.7, 0.2, 1.9, -2.4]);
    let err = grad_check(
        |t, v| {
            let s = t.sigmoid(v);
            Ok(t.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_flags_a_wrong_adjoint() {
    let x = Tensor::from_slice(&[0.3, -1.1, 0.8]);
    let err = grad_check(
        |t, v| {
            let y = t.custom_unary(
                v,
                |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect()).unwrap(),
                // d(x^2)/dx is 2x; this returns x
                |x, g| x.data().iter().zip(g.data()).map(|(x, g)| x * g).collect(),
            )?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err > 0.1, "{err}");
}

#[test]
fn batch_norm_train_normalizes_and_rejects_singleton_batch() {
    let mut tape = Tape::new();
    let x = tape.constant(
        Tensor::new(vec![2, 2, 3], vec![1.0, 2.0, 3.0, 10.0, 0.0, -4.0, 5.0, 6.0, 7.0, 2.0, 2.5, 3.0])
            .unwrap(),
    );
    let gamma = tape.constant(Tensor::ones(&[2]));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-12).unwrap();
    assert!((mean[0] - 4.0).abs() < 1e-12);
    assert!(var.iter().all(|v| *v > 0.0));
    let yv = tape.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..2).flat_map(|b| yv[(b * 2 + ch) * 3..(b * 2 + ch + 1) * 3].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 6.0;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "channel {ch}: {m} {v}");
    }

    let one = tape.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(tape.batch_norm_train(one, gamma, beta, 1e-5).is_err());
}

#[test]
fn batch_norm_eval_and_degenerate_scale() {
    let mut tape = Tape::new();
    let data = Tensor::new(vec![1, 2, 2], vec![0.5, -0.5, 2.0, 3.0]).unwrap();
    let x = tape.constant(data.clone());
    let gamma = tape.constant(Tensor::ones(&[2]));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let eps = 1e-5;
    let y = tape.batch_norm_eval(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], eps).unwrap();
    let expect: Vec<f64> = data.data().iter().map(|v| v / (1.0 + eps).sqrt()).collect();
    close(tape.value(y).data(), &expect, 1e-15);

    let x = tape.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 9.0, -3.0, 4.0]).unwrap());
    let gamma = tape.constant(Tensor::zeros(&[1]));
    let beta = tape.constant(Tensor::full(&[1], 5.0));
    let (y, _, _) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 5.0));
}
