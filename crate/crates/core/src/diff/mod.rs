//! Dense tensors and a reverse-mode gradient tape.
//!
//! All learned computation in this crate is expressed through [`Tape`]
//! operations so that one backward pass yields gradients for every parameter.
//! The tape is an append-only arena: each op pushes a node holding its output
//! value and the indices of its inputs, and [`Tape::backward`] walks the arena
//! in reverse. Gradients for a fan-out accumulate additively.
//!
//! Tensors are row-major `f64` with explicit shapes. Batched image-like data
//! uses batch × channels × spatial order throughout.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_grad, max_rel_err};
pub use tape::{GatherTable, Gradients, ReduceKind, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum DiffError {
    /// Operand shapes are incompatible for the named op.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An op received or produced a NaN or infinity.
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    /// An op attribute (axis, stride, slice range, ...) is out of range.
    #[error("{op}: {msg}")]
    BadArg { op: &'static str, msg: String },
    /// Tensor data length does not match the shape product.
    #[error("tensor: shape {shape:?} needs {want} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    /// Backward was called on a non-scalar value.
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_matches_elementwise_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let z = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0])).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[0.3, -2.0, 7.0, 0.0, 1.0, 1.5, -0.5, 4.0])).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ones_conv_counts_coverage() {
        // 3x3 kernel of ones over a 5x5 image of ones, pad 1: the center
        // output sees all 9 taps.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
        let d = tape.value(y).data();
        assert_eq!(d[2 * 5 + 2], 9.0);
        assert_eq!(d[0], 4.0); // corner sees a 2x2 window
        assert_eq!(d[2], 6.0); // edge sees a 2x3 window
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 4.0, -0.25]), true).unwrap();
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = sum(x) + sum(x) -> dy/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let a = tape.sum_all(x).unwrap();
        let b = tape.sum_all(x).unwrap();
        let y = tape.add(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreached_leaf_reads_as_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let y = tape.leaf(t(&[2], &[5.0, 6.0]), true).unwrap();
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(y).is_none());
        assert_eq!(g.tensor(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 2]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let err = tape.constant(t(&[1], &[f64::NAN])).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarLoss(_)));
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])).unwrap();
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 2).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let mut tape = Tape::new();
        let ad: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let bd: Vec<f64> = (0..12).map(|i| 1.0 - i as f64 * 0.25).collect();
        let a3 = tape.constant(t(&[2, 2, 3], &ad)).unwrap();
        let b3 = tape.constant(t(&[2, 3, 2], &bd)).unwrap();
        let y = tape.bmm(a3, b3, false).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        for n in 0..2 {
            let a2 = tape.constant(t(&[2, 3], &ad[n * 6..(n + 1) * 6])).unwrap();
            let b2 = tape.constant(t(&[3, 2], &bd[n * 6..(n + 1) * 6])).unwrap();
            let m = tape.matmul(a2, b2).unwrap();
            assert_eq!(
                tape.value(y).data()[n * 4..(n + 1) * 4],
                *tape.value(m).data()
            );
        }
    }

    #[test]
    fn bmm_transposed_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let ad: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let bd: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 1.0).collect();
        let a3 = tape.constant(t(&[1, 2, 3], &ad)).unwrap();
        let b3 = tape.constant(t(&[1, 2, 3], &bd)).unwrap();
        let y = tape.bmm(a3, b3, true).unwrap();
        let a2 = tape.constant(t(&[2, 3], &ad)).unwrap();
        let b2 = tape.constant(t(&[2, 3], &bd)).unwrap();
        let bt = tape.transpose(b2).unwrap();
        let m = tape.matmul(a2, bt).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(m).data());
    }

    #[test]
    fn bmm_gradients_match_finite_differences() {
        for transpose_b in [false, true] {
            let ad: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
            let bd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
            let at = t(&[2, 2, 3], &ad);
            let bt = if transpose_b {
                t(&[2, 2, 3], &bd)
            } else {
                t(&[2, 3, 2], &bd)
            };
            let build = |ts: &[Tensor]| -> Result<(Tape, Var, Vec<Var>), DiffError> {
                let mut tape = Tape::new();
                let a = tape.leaf(ts[0].clone(), true)?;
                let b = tape.leaf(ts[1].clone(), true)?;
                let y = tape.bmm(a, b, transpose_b)?;
                let sq = tape.mul(y, y)?;
                let loss = tape.sum_all(sq)?;
                Ok((tape, loss, vec![a, b]))
            };
            let inputs = vec![at, bt];
            let (tape, loss, vars) = build(&inputs).unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut f = |ts: &[Tensor]| -> Result<f64, DiffError> {
                let (tape, loss, _) = build(ts)?;
                Ok(tape.value(loss).item())
            };
            let numeric = finite_difference_grad(&mut f, &inputs, 1e-6).unwrap();
            let analytic: Vec<Tensor> = vars.iter().map(|v| grads.tensor(*v)).collect();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-7, "transpose_b={transpose_b}: rel err {err}");
        }
    }

    #[test]
    fn layernorm_standardizes_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0])).unwrap();
        let gm = tape.constant(Tensor::full(&[4], 1.0)).unwrap();
        let bt = tape.constant(Tensor::zeros(&[4])).unwrap();
        let y = tape.layernorm(x, gm, bt, 1e-8).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reduce_variance_is_population() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let v = tape.reduce(x, 1, ReduceKind::Var).unwrap();
        // Population variance of 1..4 is 1.25 (sample variance would be 5/3).
        assert!((tape.value(v).item() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn masked_variance_matches_manual() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 2], &[1.0, 10.0])).unwrap();
        let b = tape.constant(t(&[1, 1, 2], &[3.0, 20.0])).unwrap();
        let c = tape.constant(t(&[1, 1, 2], &[5.0, 30.0])).unwrap();
        // Position 0 sees all three views, position 1 only the first two.
        let masks = std::sync::Arc::new(vec![
            vec![true, true],
            vec![true, true],
            vec![true, false],
        ]);
        let v = tape.masked_variance(&[a, b, c], masks).unwrap();
        let d = tape.value(v).data();
        assert!((d[0] - 8.0 / 3.0).abs() < 1e-12); // var{1,3,5}
        assert!((d[1] - 25.0).abs() < 1e-12); // var{10,20}
    }

    #[test]
    fn gather_applies_taps_per_channel() {
        let mut tape = Tape::new();
        let src = tape.constant(t(&[1, 2, 4], &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0])).unwrap();
        let table = std::sync::Arc::new(GatherTable::new(
            4,
            &[
                vec![(0, 0.5), (1, 0.5)], // midpoint of first two cells
                vec![],                   // no taps -> zero
            ],
        ));
        let y = tape.gather(src, table, &[1, 2, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 10.5, 0.0]);
    }

    #[test]
    fn finite_difference_recovers_quadratic_slope() {
        let mut f = |xs: &[Tensor]| Ok(xs[0].item() * xs[0].item());
        let g = finite_difference_grad(&mut f, &[Tensor::scalar(3.0)], 1e-4).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_on_identity_is_exactly_one() {
        let mut f = |xs: &[Tensor]| Ok(xs[0].item());
        let g = finite_difference_grad(&mut f, &[Tensor::scalar(0.37)], 1e-5).unwrap();
        assert!((g[0].item() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn conv_transpose_inverts_stride_two_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv_transpose2d(x, w, b, 2, 0).unwrap();
        // (3-1)*2 + 2 = 6 on both sides.
        assert_eq!(tape.shape(y), &[1, 1, 6, 6]);
        // Stride 2 with a 2x2 kernel tiles the output exactly once.
        assert!(tape.value(y).data().iter().all(|v| *v == 1.0));
    }
}
