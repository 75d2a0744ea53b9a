//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default variance floor for batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let mut t = Tape::new();
        let eye = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = t.constant(mat(&[&[1.0, 0.0]]));
        let col = t.constant(mat(&[&[2.0], &[5.0]]));
        let out = t.matmul(row, col).unwrap();
        assert_eq!(t.value(out).shape(), &[1, 1]);
        assert_eq!(t.value(out).data(), &[2.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let err = grad_check(
            |t, a| {
                let b = t.constant(b.clone());
                let c = t.matmul(a, b)?;
                Ok(t.sum(c))
            },
            &a,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, b| {
                let a = t.constant(a.clone());
                let c = t.matmul(a, b)?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            },
            &b,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

        let pos = t.constant(Tensor::vector(vec![0.5, 1.5]));
        let y = t.relu(pos);
        assert_eq!(t.value(y).data(), &[0.5, 1.5]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-0.5, 0.5, 0.0]));
        let y = t.relu(x);
        let y = t.scale(y, 3.0);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 4.0], &[3.0, 4.0]]));
        let gamma = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let beta = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.batch_norm(x, gamma, beta, 1e-12).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[2] - 1.0).abs() < 1e-9);
        // constant column collapses to zero
        assert_eq!((v[1], v[3]), (0.0, 0.0));
    }

    #[test]
    fn batch_norm_requires_two_rows() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 2.0]]));
        let gamma = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let beta = t.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            t.batch_norm(x, gamma, beta, BN_EPS),
            Err(Error::DegenerateBatch { rows: 1, .. })
        ));
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(4, 3, &mut rng);
        let gamma = Tensor::vector(vec![1.3, -0.7, 0.4]);
        let beta = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let w = random(4, 3, &mut rng);
        // weighted sum so the gradient does not vanish identically
        let loss = |t: &mut Tape, x: Var, g: Var, b: Var| -> crate::Result<Var> {
            let y = t.batch_norm(x, g, b, BN_EPS)?;
            let w = t.constant(w.clone());
            let y = t.mul(y, w)?;
            let y2 = t.mul(y, y)?;
            let s = t.add(y, y2)?;
            Ok(t.sum(s))
        };
        let err_x = grad_check(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                loss(t, x, g, b)
            },
            &x,
            1e-4,
        )
        .unwrap();
        let err_g = grad_check(
            |t, g| {
                let xv = t.constant(x.clone());
                let b = t.constant(beta.clone());
                loss(t, xv, g, b)
            },
            &gamma,
            1e-4,
        )
        .unwrap();
        let err_b = grad_check(
            |t, b| {
                let xv = t.constant(x.clone());
                let g = t.constant(gamma.clone());
                loss(t, xv, g, b)
            },
            &beta,
            1e-4,
        )
        .unwrap();
        assert!(err_x < 1e-5 && err_g < 1e-5 && err_b < 1e-5, "{err_x} {err_g} {err_b}");
    }

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![3, 7]));
        let l = t.softmax_cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((t.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!((t.value(l).item().unwrap() - 1.9459).abs() < 1e-4);

        let confident = t.constant(mat(&[&[500.0, 0.0, 0.0]]));
        let l = t.softmax_cross_entropy(confident, &[0]).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            t.softmax_cross_entropy(logits, &[0, 3]),
            Err(Error::Label { row: 1, label: 3, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(5, 3, &mut rng);
        let labels = [0, 2, 1, 1, 0];
        let err = grad_check(|t, z| t.softmax_cross_entropy(z, &labels), &logits, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn squared_l2_rowmean_values() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[1.0, 0.0]]));
        let b = t.constant(mat(&[&[0.0, 1.0]]));
        let l = t.squared_l2_rowmean(a, b).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 2.0);
        let l = t.squared_l2_rowmean(a, a).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);

        let a = t.constant(mat(&[&[1.0, 2.0], &[0.0, 0.0]]));
        let b = t.constant(mat(&[&[0.0, 2.0], &[0.0, 1.0]]));
        let l = t.squared_l2_rowmean(a, b).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 1.0);

        let c = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(t.squared_l2_rowmean(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[6.0]);

        assert!(matches!(t.backward(x).map(|_| ()), Ok(())));
        let v = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn every_reachable_param_gets_a_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, -2.0]));
        let unused = t.param(Tensor::scalar(1.0));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn grad_check_trivial_functions() {
        let err = grad_check(|t, x| Ok(t.sum(x)), &Tensor::scalar(0.7), 1e-4).unwrap();
        assert!(err < 1e-12);
        let x = Tensor::vector(vec![-1.2, -0.4, 0.3, 2.5]);
        let err = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn shared_use_accumulates_path_gradients() {
        // f(x) = sum(x*x) + sum(3x) via two consumers of x; df/dx = 2x + 3
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -2.0, 4.0]));
        let sq = t.mul(x, x).unwrap();
        let a = t.sum(sq);
        let lin = t.scale(x, 3.0);
        let b = t.sum(lin);
        let f = t.add(a, b).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, -1.0, 11.0]);
    }

    /// Random reverse-topological order over the tape prefix ending at `loss`.
    fn random_reverse_topological(t: &Tape, loss: Var, rng: &mut ChaCha8Rng) -> Vec<Var> {
        let n = loss.index() + 1;
        let mut pending_consumers = vec![0usize; n];
        for k in 0..n {
            for i in t.inputs_of(Var(k)) {
                pending_consumers[i.index()] += 1;
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&k| pending_consumers[k] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while !ready.is_empty() {
            ready.shuffle(rng);
            let k = ready.pop().unwrap();
            order.push(Var(k));
            for i in t.inputs_of(Var(k)) {
                pending_consumers[i.index()] -= 1;
                if pending_consumers[i.index()] == 0 {
                    ready.push(i.index());
                }
            }
        }
        order
    }

    #[test]
    fn backward_is_independent_of_valid_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.param(random(6, 3, &mut rng));
        let w1 = t.param(random(3, 4, &mut rng));
        let w2 = t.param(random(3, 4, &mut rng));
        let h1 = t.matmul(x, w1).unwrap();
        let h1 = t.relu(h1);
        let h2 = t.matmul(x, w2).unwrap();
        let gamma = t.param(Tensor::vector(vec![1.0, 0.5, 2.0, -1.0]));
        let beta = t.param(Tensor::vector(vec![0.0, 0.1, 0.2, 0.3]));
        let h2 = t.batch_norm(h2, gamma, beta, BN_EPS).unwrap();
        let g = t.gather_rows(h2, &[1, 0, 3, 2, 5, 4]).unwrap();
        let mix = t.lerp(h1, g, 0.3).unwrap();
        let loss = t.squared_l2_rowmean(mix, h1).unwrap();

        let reference = t.backward(loss).unwrap();
        for _ in 0..20 {
            let order = random_reverse_topological(&t, loss, &mut rng);
            let got = t.backward_in_order(loss, &order).unwrap();
            for v in [x, w1, w2, gamma, beta] {
                assert_eq!(reference.get(v), got.get(v));
            }
        }
    }

    #[test]
    fn backward_in_order_rejects_invalid_order() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0]));
        let s = t.sum(x);
        assert!(t.backward_in_order(s, &[x, s]).is_err());
        assert!(t.backward_in_order(s, &[s]).is_err());
        assert!(t.backward_in_order(s, &[s, x]).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn primitive_gradients_match_central_differences(
            seed in any::<u64>(),
            rows in 2usize..6,
            cols in 1usize..5,
            weight in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(rows, cols, &mut rng);
            let other = random(rows, cols, &mut rng);
            let w = random(cols, 3, &mut rng);
            let bias = Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let perm: Vec<usize> = (0..rows).rev().collect();
            let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
            let err = grad_check(
                |t, x| {
                    let o = t.constant(other.clone());
                    let g = t.gather_rows(x, &perm)?;
                    let m = t.lerp(x, g, weight)?;
                    let d = t.squared_l2_rowmean(m, o)?;
                    let w = t.constant(w.clone());
                    let b = t.constant(bias.clone());
                    let h = t.matmul(m, w)?;
                    let h = t.add_bias(h, b)?;
                    let ce = t.softmax_cross_entropy(h, &labels)?;
                    t.add(d, ce)
                },
                &x,
                1e-4,
            ).unwrap();
            prop_assert!(err < 1e-4, "relative error {}", err);
        }
    }
}
