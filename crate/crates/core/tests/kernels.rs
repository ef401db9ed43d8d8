use proptest::prelude::*;
use tisa::autodiff::Tape;
use tisa::gradcheck::{central_difference, relative_error};
use tisa::{attention_case_b, eval_kernel, kernel_gradients, materialize_fp, Kernel, KernelParams, Matrix, SeededRng};

const H: f64 = 1e-5;

fn kernel(width_floor: f64, center: f64) -> impl Strategy<Value = Kernel> {
    (-3.0f64..3.0, width_floor..2.0, any::<bool>(), -center..center)
        .prop_map(|(a, b, neg, c)| Kernel::new(a, if neg { -b } else { b }, c))
}

fn params(width_floor: f64, center: f64) -> impl Strategy<Value = KernelParams> {
    proptest::collection::vec(kernel(width_floor, center), 1..6).prop_map(|k| KernelParams::new(k, 0, 0))
}

fn with_flat(p: &KernelParams, idx: usize, value: f64) -> KernelParams {
    let mut flat = p.to_flat();
    flat[idx] = value;
    KernelParams::from_flat(&flat, p.layer, p.head).unwrap()
}

proptest! {
    #[test]
    fn larger_matrices_contain_smaller_ones(p in params(0.0, 20.0), n in 1usize..24, delta in prop_oneof![Just(1usize), Just(7), Just(64)]) {
        let small = materialize_fp(&p, n);
        let big = materialize_fp(&p, n + delta);
        for start in [0, delta / 2, delta] {
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(big.get(start + i, start + j).to_bits(), small.get(i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn bounded_by_amplitudes(p in params(0.0, 20.0), k in -2_000_000i64..2_000_000) {
        let v = eval_kernel(&p, k);
        prop_assert!(v.is_finite());
        prop_assert!(v.abs() <= p.amplitude_bound() + 1e-12);
    }

    // The central difference in `b` has truncation error of order
    // `h² (k - c)⁴` relative to the gradient, so offsets stay within a few
    // units of the centers.
    #[test]
    fn gradients_match_central_differences(p in params(1e-3, 3.0), k in -6i64..=6, upstream in -2.0f64..2.0) {
        let grads = kernel_gradients(&p, k, upstream);
        let flat = p.to_flat();
        for (s, g) in grads.iter().enumerate() {
            for (slot, analytic) in [g.amplitude, g.width, g.center].into_iter().enumerate() {
                let idx = 3 * s + slot;
                let numeric = central_difference(|x| upstream * eval_kernel(&with_flat(&p, idx, x), k), flat[idx], H);
                prop_assert!(
                    relative_error(analytic, numeric) < 1e-6,
                    "kernel {s} slot {slot}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn far_offsets_stay_finite() {
    let p = KernelParams::new(vec![Kernel::new(1.5, 0.3, 2.0), Kernel::new(-0.7, 1e-9, -4.0)], 0, 0);
    for k in [1_000_000, -1_000_000] {
        let v = eval_kernel(&p, k);
        assert!(v.is_finite());
        // The narrow kernel has vanished; the very wide one has not.
        assert!((v - -0.7 * (-1e-9 * (k as f64 + 4.0).powi(2)).exp()).abs() < 1e-12);
    }
}

#[test]
fn zero_width_gradient_is_zero() {
    let p = KernelParams::new(vec![Kernel::new(1.0, 0.0, 0.0)], 0, 0);
    assert_eq!(kernel_gradients(&p, 3, 1.0)[0].width, 0.0);
}

/// Scalar loss `Σ W ∘ attention_case_b(q, k, v, F_P(θ))` computed with plain
/// matrix code, independent of the tape.
fn direct_loss(q: &Matrix, k: &Matrix, v: &Matrix, theta: &KernelParams, w: &Matrix) -> f64 {
    let out = attention_case_b(q, k, v, &materialize_fp(theta, q.rows())).unwrap();
    out.hadamard(w).unwrap().sum()
}

#[test]
fn kernel_gradient_through_case_b_attention() {
    let mut rng = SeededRng::new(3);
    let (n, d_k) = (6, 4);
    let q = rng.normal_matrix(n, d_k, 1.0);
    let k = rng.normal_matrix(n, d_k, 1.0);
    let v = rng.normal_matrix(n, d_k, 1.0);
    let w = rng.normal_matrix(n, d_k, 1.0);
    let theta = KernelParams::new(
        vec![
            Kernel::new(1.2, 0.4, -1.0),
            Kernel::new(-0.6, 0.1, 2.5),
            Kernel::new(0.3, -0.8, 0.0),
        ],
        0,
        0,
    );

    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let row = tape.leaf(Matrix::row_vector(&theta.to_flat()));
    let raw = tape.matmul_transposed(qv, kv).unwrap();
    let scaled = tape.div(raw, (d_k as f64).sqrt());
    let fp = tape.toeplitz(row, n).unwrap();
    let scores = tape.add(scaled, fp).unwrap();
    let probs = tape.softmax_rows(scores);
    let out = tape.matmul(probs, vv).unwrap();
    let loss = tape.weighted_sum(out, &w).unwrap();

    let direct = direct_loss(&q, &k, &v, &theta, &w);
    assert!((tape.scalar(loss) - direct).abs() < 1e-12);

    let grads = tape.backward(loss);
    let analytic = grads.get(row).unwrap();
    let flat = theta.to_flat();
    for (idx, &x) in flat.iter().enumerate() {
        let numeric = central_difference(|t| direct_loss(&q, &k, &v, &with_flat(&theta, idx, t), &w), x, H);
        let err = relative_error(analytic.as_slice()[idx], numeric);
        assert!(
            err < 1e-6,
            "parameter {idx}: analytic {} numeric {numeric}",
            analytic.as_slice()[idx]
        );
    }
}
