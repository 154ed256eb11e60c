//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Values are recorded on an append-only [`Tape`]; `backward` replays the
//! arena once in reverse. Pullbacks are themselves recorded ops, so
//! gradients obtained through [`Tensor::grad_as_graph`] stay differentiable
//! and second derivatives fall out of the same machinery.
//!
//! Reduction orders are fixed everywhere: identical inputs give
//! bit-identical outputs and gradients. Any op that produces a NaN or an
//! infinity fails at that op with [`Error::NonFinite`].

mod error;
mod kernels;
mod tape;
mod value;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Tensor};
pub use value::{broadcast_shape, Value};

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(tape: &Tape, shape: &[usize], data: &[f64]) -> Tensor {
        tape.var(Value::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn square_gradient_at_three() {
        let tape = Tape::new();
        let x = tape.var(Value::scalar(3.0)).unwrap();
        let y = x.square().unwrap();
        let grads = y.backward().unwrap();
        // d(x^2)/dx = 2x = 6
        assert_eq!(grads.get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Value::scalar(2.0)).unwrap();
        let c = tape.scalar_const(5.0);
        let y = x.mul(&c).unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 5.0);
        assert_eq!(grads.get(&c).unwrap().item(), 0.0);
    }

    #[test]
    fn off_path_leaf_is_zero_not_error() {
        let tape = Tape::new();
        let x = tape.var(Value::scalar(2.0)).unwrap();
        let z = tape.var(Value::vector(vec![1.0, 2.0])).unwrap();
        let y = x.square().unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&z).unwrap().data(), &[0.0, 0.0]);
        let gz = y.grad_as_graph(&z).unwrap();
        assert_eq!(gz.data(), &[0.0, 0.0]);
    }

    #[test]
    fn double_backward_of_cube() {
        let tape = Tape::new();
        let x = tape.var(Value::scalar(2.0)).unwrap();
        let y = x.square().unwrap().mul(&x).unwrap(); // x^3
        let dy = y.grad_as_graph(&x).unwrap(); // 3x^2 = 12
        assert!((dy.item() - 12.0).abs() < 1e-12);
        let d2y = dy.grad_as_graph(&x).unwrap(); // 6x = 12
        assert!((d2y.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let a = tv(&tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tv(&tape, &[3], &[10.0, 20.0, 30.0]);
        let y = a.add(&b).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        // b is used in both rows, so its gradient is the column sum of ones.
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(&a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_finite_faults_at_the_op() {
        let tape = Tape::new();
        let x = tape.var(Value::scalar(0.0)).unwrap();
        let one = tape.scalar_const(1.0);
        let err = one.div(&x).unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "div"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tv(&tape, &[2, 2], &[1.0; 4]);
        let b = tv(&tape, &[3], &[1.0; 3]);
        match a.add(&b).unwrap_err() {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_known_gradients() {
        let tape = Tape::new();
        let a = tv(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tv(&tape, &[2, 1], &[5.0, 6.0]);
        let y = a.matmul(&b).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        // dy/dA = 1 * b^T stacked per row
        assert_eq!(grads.get(&a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        // dy/dB = A^T * 1
        assert_eq!(grads.get(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let tape = Tape::new();
        let x = tv(&tape, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = x.gather_rows(&[2, 0, 2]).unwrap();
        let y = g.sum_all().unwrap();
        let grads = y.backward().unwrap();
        // row 2 selected twice, row 1 never
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn segment_max_routes_to_first_winner() {
        let tape = Tape::new();
        let x = tv(&tape, &[4, 1], &[1.0, 7.0, 7.0, 3.0]);
        let m = x.segment_max(&[0, 0, 0, 1], 2).unwrap();
        assert_eq!(m.data(), &[7.0, 3.0]);
        let y = m.sum_all().unwrap();
        let grads = y.backward().unwrap();
        // tie at rows 1 and 2: gradient goes to the first
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn norm_rows_value_and_gradient() {
        let tape = Tape::new();
        let x = tv(&tape, &[1, 2], &[3.0, 4.0]);
        let n = x.norm_rows().unwrap();
        assert_eq!(n.data(), &[5.0]);
        let grads = n.sum_all().unwrap().backward().unwrap();
        let gx = grads.get(&x).unwrap();
        assert!((gx.data()[0] - 0.6).abs() < 1e-15);
        assert!((gx.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tv(&tape, &[2], &[1.0, 2.0]);
        match x.backward().unwrap_err() {
            Error::NonScalarRoot { shape } => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarRoot, got {other:?}"),
        }
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let tape = Tape::new();
        let x = tv(&tape, &[3], &[-2.0, 0.0, 5.0]);
        let y = x.abs().unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn norm_rows_zero_row_subgradient() {
        let tape = Tape::new();
        let x = tv(&tape, &[2, 2], &[0.0, 0.0, 3.0, 4.0]);
        let y = x.norm_rows().unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        // Row of zeros sits at the kink of the norm; its subgradient is zero
        // while the other row keeps the x/|x| direction.
        let gx = grads.get(&x).unwrap();
        for (got, want) in gx.data().iter().zip([0.0, 0.0, 0.6, 0.8]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn sum_axis_collapses_columns() {
        let tape = Tape::new();
        let x = tape.var(Value::ones(&[2, 3])).unwrap();
        let y = x.sum_axis(1).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn scatter_then_gather_disjoint_is_identity() {
        let tape = Tape::new();
        let base = tape.var(Value::zeros(&[4, 2])).unwrap();
        let src = tv(&tape, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = [2usize, 0, 3];
        let scattered = base.scatter_add_rows(&idx, &src).unwrap();
        let back = scattered.gather_rows(&idx).unwrap();
        assert_eq!(back.data(), src.data());
        let grads = back.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(&src).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn second_derivative_of_linear_map_is_zero() {
        let tape = Tape::new();
        let x = tv(&tape, &[3], &[1.0, -2.0, 0.5]);
        let w = tv(&tape, &[3], &[2.0, 3.0, 4.0]);
        let y = x.mul(&w).unwrap().sum_all().unwrap();
        let dy = y.grad_as_graph(&x).unwrap();
        assert_eq!(dy.data(), w.data());
        let d2 = dy.sum_all().unwrap().grad_as_graph(&x).unwrap();
        assert_eq!(d2.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn force_loss_parameter_gradient_closed_form() {
        // E(k) = k * sum(r^2), force f = -dE/dr = -2k r. A squared-error
        // force loss L = sum((f - f*)^2) then has dL/dk = sum(2 (f - f*)
        // * (-2 r)) = 4 sum(r (2k r + f*)), checkable by hand.
        let tape = Tape::new();
        let k = tape.var(Value::scalar(1.5)).unwrap();
        let r = tv(&tape, &[3], &[1.0, -2.0, 0.5]);
        let f_star = tape.constant(Value::vector(vec![0.5, 1.0, -1.0]));
        let e = r.square().unwrap().sum_all().unwrap().mul(&k).unwrap();
        let f = e.grad_as_graph(&r).unwrap().neg().unwrap();
        let loss = f.sub(&f_star).unwrap().square().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let got = grads.get(&k).unwrap().item();
        let want: f64 = [1.0, -2.0, 0.5]
            .iter()
            .zip([0.5, 1.0, -1.0])
            .map(|(&ri, fs)| 4.0 * ri * (2.0 * 1.5 * ri + fs))
            .sum();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
