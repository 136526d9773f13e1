//! Central-finite-difference oracle for gradient verification.
//!
//! The oracle only ever calls the forward path: `f` rebuilds its graph from
//! plain leaf tensors, so the numbers here are independent of the reverse
//! pass they are used to check.

use crate::numerics::Tensor;

/// Central differences `(f(x+eps) - f(x-eps)) / 2 eps` for every element of
/// every input tensor.
pub fn finite_diff_grads<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let shape = inputs[i].shape().to_vec();
        let mut grad = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            grad[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::new(shape, grad).expect("gradient matches input shape"));
    }
    out
}

/// Largest relative discrepancy between analytic and numeric gradients,
/// with a symmetric denominator guarded against zero.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn finite_differences_recover_a_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let grads = finite_diff_grads(&[x], 1e-5, |inputs| {
            inputs[0].data().iter().map(|v| v * v).sum()
        });
        for (g, want) in grads[0].data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((g - want).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_agrees_with_tape_on_a_small_graph() {
        let a0 = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let b0 = Tensor::new(vec![2, 2], vec![-0.2, 0.9, 0.4, -1.3]).unwrap();

        let eval = |inputs: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf_grad(inputs[0].clone());
            let b = tape.leaf_grad(inputs[1].clone());
            let c = tape.matmul(a, b).unwrap();
            let d = tape.tanh(c);
            let e = tape.softmax(d).unwrap();
            let s = tape.mean(e);
            tape.value(s).item().unwrap()
        };

        let numeric = finite_diff_grads(&[a0.clone(), b0.clone()], 1e-5, eval);

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf_grad(a0);
        let b = tape.leaf_grad(b0);
        let c = tape.matmul(a, b).unwrap();
        let d = tape.tanh(c);
        let e = tape.softmax(d).unwrap();
        let s = tape.mean(e);
        let grads = tape.backward(s).unwrap();

        assert!(max_rel_err(grads.get(a).unwrap(), &numeric[0]) < 1e-6);
        assert!(max_rel_err(grads.get(b).unwrap(), &numeric[1]) < 1e-6);
    }
}
