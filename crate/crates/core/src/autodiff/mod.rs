//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built eagerly: every operation computes its value
//! immediately and records its parents. [`Graph::grad`] walks the graph
//! backwards and emits the vector-Jacobian products as *new nodes*, so the
//! resulting gradients can themselves be differentiated. The gradient
//! inversion attacks rely on this: they minimize a distance between
//! parameter gradients with respect to the model inputs.
//!
//! Every operation rejects non-finite results with [`Error::NonFinite`].
//!
//! [`Error::NonFinite`]: crate::Error::NonFinite

mod graph;
mod tensor;

pub use graph::{Graph, Var, PAD};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_transposed_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let c = g.matmul_t(a, b, true, false).unwrap();
        assert_eq!(g.value(c).data(), &[9.0, 12.0]);
        let at = g.transpose(a).unwrap();
        let d = g.matmul(at, b).unwrap();
        assert_eq!(g.value(c), g.value(d));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn causal_dilated_conv_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1d_causal(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn division_by_zero_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, b), Err(crate::Error::NonFinite("div"))));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let gx = g.grad(loss, &[x]).unwrap()[0];
        assert_eq!(g.value(gx).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.grad(x3, &[x]).unwrap()[0];
        assert_eq!(g.value(d1).item(), 12.0);
        let d2 = g.grad(d1, &[x]).unwrap()[0];
        assert_eq!(g.value(d2).item(), 12.0);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.grad(loss, &[x, unused]).unwrap();
        assert_eq!(g.value(grads[1]).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.grad(x, &[x]), Err(crate::Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_add_gradient_reduces() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::vector(vec![1.0, -1.0]));
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.grad(loss, &[x, b]).unwrap();
        assert_eq!(g.value(grads[1]).data(), &[3.0, 3.0]);
        assert_eq!(g.value(grads[0]).data(), &[1.0; 6]);
    }

    #[test]
    fn sqrt_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let n = g.sqrt(s).unwrap();
        let gx = g.grad(n, &[x]).unwrap()[0];
        assert_eq!(g.value(gx).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_are_adjoint() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let w = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.grad(loss, &[a, b]).unwrap();
        assert!(close(g.value(grads[0]).data(), &[1.0, 4.0], 0.0));
        assert!(close(g.value(grads[1]).data(), &[2.0, 3.0, 5.0, 6.0], 0.0));
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 5.0, 2.0]).unwrap());
        let y = g.max_pool1d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        let loss = g.sum(y).unwrap();
        let gx = g.grad(loss, &[x]).unwrap()[0];
        assert_eq!(g.value(gx).data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
