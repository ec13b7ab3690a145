use avfd::attention::scaled_dot_attention;
use avfd::ops::{gelu, layer_norm, matmul, softmax_rows};
use avfd::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
}

fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let data = perm.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_bit_exact_against_the_triple_loop((a, b) in sized_pair(64)) {
        let c = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        prop_assert_eq!(c.data(), want.as_slice());
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..12, 1usize..12).prop_flat_map(|(m, n)| matrix(m, n))) {
        let big = x.map(|v| v * 50.0);
        for t in [x, big] {
            let s = softmax_rows(&t).unwrap();
            for row in s.data().chunks(t.shape()[1]) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn layer_norm_standardises_rows(x in (1usize..8, 2usize..16).prop_flat_map(|(m, n)| matrix(m, n))) {
        let n = x.shape()[1];
        let y = layer_norm(&x, &Tensor::full(&[n], 1.0), &Tensor::zeros(&[n]), 1e-5).unwrap();
        for (xr, yr) in x.data().chunks(n).zip(y.data().chunks(n)) {
            let mean = yr.iter().sum::<f64>() / n as f64;
            let var = yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let xm = xr.iter().sum::<f64>() / n as f64;
            let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            // eps shrinks the variance to xv / (xv + eps)
            prop_assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_is_monotone_on_the_positive_half(mut xs in prop::collection::vec(0.0f64..20.0, 2..50)) {
        xs.sort_by(f64::total_cmp);
        let y = gelu(&Tensor::vector(xs).unwrap());
        prop_assert!(y.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn attention_weights_are_row_stochastic(
        (q, k, v) in (1usize..8, 1usize..8, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, n, d, dv)| (matrix(m, d), matrix(n, d), matrix(n, dv)))
    ) {
        let (_, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in w.data().chunks(k.shape()[0]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_key_value_permutation_leaves_output_unchanged(
        (q, k, v, perm) in (1usize..8, 1usize..8, 1usize..6).prop_flat_map(|(m, n, d)| {
            (matrix(m, d), matrix(n, d), matrix(n, 3), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let (out, _) = scaled_dot_attention(&q, &k, &v).unwrap();
        let (pout, _) = scaled_dot_attention(&q, &permute_rows(&k, &perm), &permute_rows(&v, &perm)).unwrap();
        for (a, b) in out.data().iter().zip(pout.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_dominant_scores_select_their_value_row(n in 1usize..8, v in matrix(7, 3)) {
        // Q = K = c·I gives scores c²/√n on the diagonal and 0 elsewhere
        let c = 12.0 * (n as f64).powf(0.25);
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = c;
        }
        let q = Tensor::new(vec![n, n], eye).unwrap();
        let v = Tensor::new(vec![n, 3], v.data()[..n * 3].to_vec()).unwrap();
        let (out, _) = scaled_dot_attention(&q, &q, &v).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
