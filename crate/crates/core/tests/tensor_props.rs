use effecg::tensor::{grad_check, grad_check_many, Padding, Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols)
        .prop_flat_map(move |(r, c)| (Just(r), Just(c), prop::collection::vec(-range..range, r * c)))
}

fn signal(max_c: usize, max_n: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_c, 1..=max_n).prop_flat_map(|(c, n)| (Just(c), Just(n), prop::collection::vec(-3.0..3.0f64, c * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts((rows, cols, data) in matrix(5, 8, 30.0), shift in -100.0..100.0f64) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = t.softmax(x, 1).unwrap();
        let moved = t.add_scalar(x, shift);
        let s2 = t.softmax(moved, 1).unwrap();
        for r in 0..rows {
            let sum: f64 = t.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row {} sums to {}", r, sum);
        }
        prop_assert!(t.value(s).max_abs_diff(t.value(s2)) < 1e-9);
    }

    #[test]
    fn unit_kernel_conv_is_exact_identity((c, n, data) in signal(4, 12)) {
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let mut t = Tape::new();
        let x = Tensor::new(vec![c, n], data).unwrap();
        let xv = t.constant(x.clone());
        let w = t.constant(Tensor::new(vec![c, c, 1], eye).unwrap());
        let y = t.conv1d(xv, w, 1, Padding::Same).unwrap();
        prop_assert_eq!(t.value(y), &x);
    }

    #[test]
    fn depthwise_channels_do_not_mix(
        (c, n, data) in signal(4, 12),
        k in 1usize..6,
        stride in 1usize..3,
        kernel_seed in prop::collection::vec(-1.0..1.0f64, 24),
        noise in prop::collection::vec(-5.0..5.0f64, 48),
    ) {
        prop_assume!(c >= 2);
        let w = Tensor::new(vec![c, k], (0..c * k).map(|i| kernel_seed[i % kernel_seed.len()]).collect()).unwrap();
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(input.clone());
            let wv = t.constant(w.clone());
            let y = t.depthwise_conv1d(xv, wv, stride, Padding::Same).unwrap();
            t.value(y).clone()
        };
        let x = Tensor::new(vec![c, n], data).unwrap();
        let base = run(&x);
        let out_n = base.shape()[1];
        // Perturb every channel except channel 0.
        let mut other = x.clone();
        for i in n..c * n {
            other.data_mut()[i] += noise[i % noise.len()];
        }
        let moved = run(&other);
        prop_assert_eq!(&base.data()[..out_n], &moved.data()[..out_n]);
    }

    #[test]
    fn sum_of_sigmoid_gradient(data in prop::collection::vec(-4.0..4.0f64, 1..12)) {
        let x = Tensor::from_slice(&data);
        let err = grad_check(|t, v| { let s = t.sigmoid(v); Ok(t.sum(s)) }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-6, "{}", err);
    }
}

#[test]
fn conv_swish_pool_composite_gradient() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (b, cin, cout, n, k) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(3..9), 3);
        let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = Tensor::new(vec![b, cin, n], draw(b * cin * n)).unwrap();
        let w = Tensor::new(vec![cout, cin, k], draw(cout * cin * k)).unwrap();
        let readout = Tensor::new(vec![b, cout], draw(b * cout)).unwrap();
        let err = grad_check_many(
            |t, v| {
                let y = t.conv1d(v[0], v[1], 1, Padding::Same)?;
                let y = t.swish(y);
                let p = t.global_avg_pool(y)?;
                let p = t.mul_const(p, &readout)?;
                Ok(t.sum(p))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
