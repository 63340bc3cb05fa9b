use super::*;
use crate::tensor::{finite_difference_grad, max_rel_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, k: usize) -> FeatureBatch {
    let data = (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    FeatureBatch::new(data, n, k).unwrap()
}

/// Independent route: scaled batch variance, β·σ̄² with β = n²/(k(n−1)²)
/// and σ̄² the mean over rows of the squared distance to the batch mean.
fn scaled_variance(x: &FeatureBatch) -> f64 {
    let (n, k) = (x.rows(), x.cols());
    let mut mean = vec![0.0; k];
    for row in x.data().chunks_exact(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let sigma2 = x
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(&v, &m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    let beta = (n * n) as f64 / (k as f64 * ((n - 1) * (n - 1)) as f64);
    beta * sigma2
}

#[test]
fn identical_rows_give_zero_loss() {
    let x = FeatureBatch::new(vec![3.0, -1.0, 3.0, -1.0, 3.0, -1.0], 3, 2).unwrap();
    assert_eq!(compactness_forward(&x), 0.0);
}

#[test]
fn two_row_example_evaluates_to_four() {
    // z_1 = -2, z_2 = 2, loss = (4+4)/2
    let x = FeatureBatch::new(vec![0.0, 2.0], 2, 1).unwrap();
    assert_eq!(compactness_forward(&x), 4.0);
}

#[test]
fn loss_equals_scaled_batch_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_batch(&mut rng, 4, 3);
    let l = compactness_forward(&x);
    let v = scaled_variance(&x);
    assert!((l - v).abs() / l < 1e-12, "{l} vs {v}");
}

#[test]
fn identical_rows_give_zero_gradient() {
    let x = FeatureBatch::new(vec![1.5; 8], 4, 2).unwrap();
    assert!(compactness_backward(&x).iter().all(|&g| g == 0.0));
}

#[test]
fn two_row_example_gradient() {
    // l(eps) = (eps - 2)^2 has slope -4 at eps = 0
    let x = FeatureBatch::new(vec![0.0, 2.0], 2, 1).unwrap();
    assert_eq!(compactness_backward(&x), vec![-4.0, 4.0]);

    let fd = finite_difference_grad(
        &|t| Ok(compactness_forward(&FeatureBatch::from_tensor(t)?)),
        &Tensor::new(vec![0.0, 2.0], &[2, 1]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(max_rel_error(&compactness_backward(&x), fd.data(), 1e-6) < 1e-8);
}

#[test]
fn gradient_matches_finite_differences_on_random_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random_batch(&mut rng, 3, 5);
    let analytic = compactness_backward(&x);
    let fd = finite_difference_grad(
        &|t| Ok(compactness_forward(&FeatureBatch::from_tensor(t)?)),
        &Tensor::new(x.data().to_vec(), &[3, 5]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(max_rel_error(&analytic, fd.data(), 1e-6) < 1e-8);
}

#[test]
fn batches_smaller_than_two_are_rejected() {
    assert!(FeatureBatch::new(vec![1.0, 2.0], 1, 2).is_err());
    assert!(FeatureBatch::new(vec![], 0, 0).is_err());
}

#[test]
fn non_finite_batches_are_rejected() {
    assert!(FeatureBatch::new(vec![1.0, f64::NAN], 2, 1).is_err());
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    for c in [2usize, 5, 10] {
        let ce = cross_entropy(&vec![0.7; c], 1, c, &[c - 1]).unwrap();
        assert!((ce - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_known_value() {
    let ce = cross_entropy(&[1.0, 2.0, 3.0], 1, 3, &[2]).unwrap();
    let expected = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
    assert!((ce - expected).abs() < 1e-14);
    assert!((ce - 0.40761).abs() < 1e-5);
}

#[test]
fn cross_entropy_stays_stable_for_confident_logits() {
    let ce = cross_entropy(&[10.0, -10.0], 1, 2, &[0]).unwrap();
    let expected = (-20.0f64).exp().ln_1p();
    assert!((ce - expected).abs() < 1e-12);
    assert!((ce - 2.061e-9).abs() < 1e-11);
    // far outside f64::exp range without max subtraction
    let ce = cross_entropy(&[1000.0, 0.0], 1, 2, &[0]).unwrap();
    assert!(ce.is_finite() && ce >= 0.0);
}

#[test]
fn cross_entropy_rejects_out_of_range_labels() {
    assert!(matches!(
        cross_entropy(&[0.0, 0.0], 1, 2, &[2]),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn composite_known_value() {
    let ce = cross_entropy(&[1.0, 2.0, 3.0], 1, 3, &[2]).unwrap();
    let bundle = composite(ce, 4.0, 0.1).unwrap();
    assert!((bundle.composite - 0.80761).abs() < 1e-5);
    assert!((bundle.composite - (bundle.descriptiveness + 0.1 * bundle.compactness)).abs() < 1e-15);
}

#[test]
fn composite_degenerate_cases() {
    let b = composite(0.7, 123.0, 0.0).unwrap();
    assert_eq!(b.composite, 0.7);
    let b = composite(0.0, 0.0, 0.1).unwrap();
    assert_eq!(b.composite, 0.0);
    assert!(composite(0.1, 0.1, -0.5).is_err());
}

#[test]
fn tape_wrapper_agrees_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let data: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::tracked(data.clone(), &[4, 8]).unwrap();
    compactness_loss(&x).unwrap().backward().unwrap();
    let fd = finite_difference_grad(
        &|t| compactness_loss(t)?.item(),
        &Tensor::new(data, &[4, 8]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(max_rel_error(&x.grad().unwrap(), fd.data(), 1e-6) < 1e-8);
}

#[test]
fn cross_entropy_tape_wrapper_agrees_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels = [2usize, 0, 3];
    let x = Tensor::tracked(data.clone(), &[3, 4]).unwrap();
    cross_entropy_loss(&x, &labels).unwrap().backward().unwrap();
    let fd = finite_difference_grad(
        &|t| cross_entropy_loss(t, &labels)?.item(),
        &Tensor::new(data, &[3, 4]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(max_rel_error(&x.grad().unwrap(), fd.data(), 1e-6) < 1e-7);
}

#[test]
fn gradient_columns_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for &(n, k) in &[(2usize, 3usize), (4, 1), (8, 16)] {
        let x = random_batch(&mut rng, n, k);
        let grad = compactness_backward(&x);
        let scale = grad.iter().fold(0.0f64, |a, &g| a.max(g.abs())).max(1.0);
        for j in 0..k {
            let col_sum: f64 = (0..n).map(|i| grad[i * k + j]).sum();
            assert!(col_sum.abs() <= 1e-12 * scale * n as f64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_nonnegative_and_zero_only_for_identical_rows(
        row in proptest::collection::vec(-5.0f64..5.0, 4),
        delta in 0.01f64..1.0,
        n in 2usize..6,
    ) {
        let k = row.len();
        let identical: Vec<f64> = row.iter().cycle().take(n * k).cloned().collect();
        let x = FeatureBatch::new(identical.clone(), n, k).unwrap();
        let l = compactness_forward(&x);
        let scale = row.iter().fold(1.0f64, |a, &v| a.max(v * v));
        prop_assert!(l >= 0.0);
        prop_assert!(l <= 1e-28 * scale, "identical rows should give ~0, got {l}");

        let mut perturbed = identical;
        perturbed[0] += delta;
        let x = FeatureBatch::new(perturbed, n, k).unwrap();
        prop_assert!(compactness_forward(&x) > 0.0);
    }

    #[test]
    fn loss_is_translation_invariant(
        data in proptest::collection::vec(-3.0f64..3.0, 12),
        shift in proptest::collection::vec(-10.0f64..10.0, 3),
    ) {
        let x = FeatureBatch::new(data.clone(), 4, 3).unwrap();
        let shifted: Vec<f64> = data
            .chunks_exact(3)
            .flat_map(|row| row.iter().zip(&shift).map(|(&v, &s)| v + s))
            .collect();
        let y = FeatureBatch::new(shifted, 4, 3).unwrap();
        let (a, b) = (compactness_forward(&x), compactness_forward(&y));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn loss_scales_quadratically(
        data in proptest::collection::vec(-3.0f64..3.0, 8),
        exp in -2i32..3,
    ) {
        // powers of two scale exactly
        let alpha = (2.0f64).powi(exp);
        let x = FeatureBatch::new(data.clone(), 4, 2).unwrap();
        let scaled: Vec<f64> = data.iter().map(|&v| v * alpha).collect();
        let y = FeatureBatch::new(scaled, 4, 2).unwrap();
        prop_assert_eq!(
            (alpha * alpha * compactness_forward(&x)).to_bits(),
            compactness_forward(&y).to_bits()
        );
    }

    #[test]
    fn loss_is_permutation_invariant(
        data in proptest::collection::vec(-3.0f64..3.0, 12),
        swap in (0usize..4, 0usize..4),
    ) {
        let x = FeatureBatch::new(data.clone(), 4, 3).unwrap();
        let mut permuted = data;
        for j in 0..3 {
            permuted.swap(swap.0 * 3 + j, swap.1 * 3 + j);
        }
        let y = FeatureBatch::new(permuted, 4, 3).unwrap();
        let (a, b) = (compactness_forward(&x), compactness_forward(&y));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));

        // the gradient permutes with the rows
        let ga = compactness_backward(&x);
        let gb = compactness_backward(&y);
        for j in 0..3 {
            let (r0, r1) = (swap.0 * 3 + j, swap.1 * 3 + j);
            prop_assert!((ga[r0] - gb[r1]).abs() <= 1e-12 * ga[r0].abs().max(1.0));
        }
    }

    #[test]
    fn variance_identity_holds_for_arbitrary_batches(
        data in proptest::collection::vec(-4.0f64..4.0, 24),
    ) {
        let x = FeatureBatch::new(data, 4, 6).unwrap();
        let l = compactness_forward(&x);
        let v = scaled_variance(&x);
        prop_assert!((l - v).abs() <= 1e-12 * l.abs().max(1e-30));
    }
}
