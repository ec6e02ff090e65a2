//! Minimal reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]s; a [`Tape`] records every primitive applied in
//! a forward pass and [`Tape::backward`] walks it in reverse. Tapes are
//! rebuilt for each forward pass.

mod check;
mod scalar;
mod tape;
mod tensor;

pub use check::{finite_difference_check, gradient_check};
pub use scalar::Scalar;
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let eye = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let zero = tape.constant(Tensor::zeros([2, 2]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);

        let r = tape.constant(t(&[&[1.0, 2.0]]));
        let col = tape.constant(t(&[&[3.0], &[4.0]]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).shape(), &[1, 1]);
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let zero = tape.constant(Tensor::from_f64(&[0.0]));
        let s = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let th = tape.tanh(zero).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0]);

        let y = tape.constant(Tensor::from_f64(&[1.0, 1.0]));
        assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[0.0]).with_grad());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[1.0, 2.0], &[1.0, 2.0], 0.0),
            (&[3.0], &[1.0], 4.0),
            (&[0.0, 0.0], &[1.0, -1.0], 1.0),
        ];
        for (p, q, want) in cases {
            let p = tape.constant(Tensor::from_f64(p));
            let q = tape.constant(Tensor::from_f64(q));
            let l = tape.mse_loss(p, q).unwrap();
            assert_eq!(tape.value(l).item().unwrap(), want);
        }
        let e = tape.constant(Tensor::from_f64(&[]));
        assert!(matches!(tape.mse_loss(e, e), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[&[1.0], &[2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);

        let x = tape.constant(Tensor::from_f64(&[5.0, 6.0]));
        let empty = tape.constant(Tensor::from_f64(&[]));
        let same = tape.concat(&[x, empty], 0).unwrap();
        assert_eq!(tape.value(same), tape.value(x));

        let parts: Vec<Var> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| tape.constant(Tensor::from_f64(&[v])))
            .collect();
        let c = tape.concat(&parts, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let bad = tape.constant(Tensor::zeros([3, 1]));
        assert!(matches!(tape.concat(&[a, bad], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_f64(&[3.0]).with_grad());
        let zero = tape.constant(Tensor::from_f64(&[0.0]));
        let l = tape.mse_loss(w, zero).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[-1.0, 2.0]).with_grad());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::from_f64(&[1.0]).with_grad());
        assert!(matches!(tape.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn leaf_used_twice_accumulates_both_paths() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1.5]).with_grad());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn replaying_backward_doubles_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[0.3, -0.7]).with_grad());
        let y = tape.tanh(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_self_checks() {
        let x = Tensor::<f64>::from_f64(&[0.7]);
        let err = finite_difference_check(|_, v| Ok(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");

        let x = Tensor::<f64>::from_f64(&[0.3, -1.2, 2.5]);
        let target = Tensor::from_f64(&[1.0, 0.0, -1.0]);
        let err = finite_difference_check(
            |tape, v| {
                let t = tape.constant(target.clone());
                tape.mse_loss(v, t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn finite_difference_rejects_non_finite() {
        let x = Tensor::<f64>::from_f64(&[1.0]);
        let r = finite_difference_check(
            |tape, v| {
                let s = tape.scale(v, f64::INFINITY)?;
                tape.sum(s)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn causal_conv_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new([1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv1d_causal(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0, 7.0]);

        let x = tape.constant(Tensor::new([1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let y = tape.conv1d_causal(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 4.0, 6.0, 8.0]);

        let unit = tape.constant(Tensor::new([1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d_causal(x, unit, b, 3).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn batch_norm_train_normalizes_each_channel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64).collect();
        let x = tape.constant(Tensor::new([2, 3, 4], data).unwrap());
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        for ch in tape.value(y).data().chunks(12) {
            let mean = ch.iter().sum::<f64>() / 12.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }
}
