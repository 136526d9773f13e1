//! Gated recurrent unit step, composed from tape ops so gradients flow
//! through the standard reverse pass.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, Var};

/// Parameter handles for one GRU direction. Gate blocks are packed along the
/// last axis in `[reset, update, candidate]` order.
#[derive(Clone, Copy)]
pub struct GruCellVars {
    /// `[d_in, 3h]`
    pub w_x: Var,
    /// `[h, 3h]`
    pub w_h: Var,
    /// `[3h]`
    pub b_x: Var,
    /// `[3h]`
    pub b_h: Var,
}

/// One GRU update: reset gate `r`, update gate `z`, candidate `n`,
/// `h_t = (1 - z) * n + z * h_prev`.
pub fn gru_cell<T: Element>(
    tape: &mut Tape<T>,
    x_t: Var,
    h_prev: Var,
    vars: GruCellVars,
) -> Result<Var> {
    let xw = tape.matmul(x_t, vars.w_x)?;
    let x_gates = tape.add(xw, vars.b_x)?;
    gru_cell_from_gates(tape, x_gates, h_prev, vars)
}

/// GRU update when the input-side gate preactivations `x W_x + b_x` are
/// already available (they can be computed for every step in one matmul).
pub fn gru_cell_from_gates<T: Element>(
    tape: &mut Tape<T>,
    x_gates: Var,
    h_prev: Var,
    vars: GruCellVars,
) -> Result<Var> {
    let hs = tape.value(h_prev).shape().to_vec();
    if hs.len() != 2 {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!("h_prev rank {} != 2", hs.len()),
        });
    }
    let h = hs[1];
    if tape.value(x_gates).shape() != [hs[0], 3 * h] {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!(
                "x gates {:?} vs h_prev {:?}",
                tape.value(x_gates).shape(),
                hs
            ),
        });
    }

    let hw = tape.matmul(h_prev, vars.w_h)?;
    let h_gates = tape.add(hw, vars.b_h)?;

    let xr = tape.slice(x_gates, 1, 0, h)?;
    let xz = tape.slice(x_gates, 1, h, h)?;
    let xn = tape.slice(x_gates, 1, 2 * h, h)?;
    let hr = tape.slice(h_gates, 1, 0, h)?;
    let hz = tape.slice(h_gates, 1, h, h)?;
    let hn = tape.slice(h_gates, 1, 2 * h, h)?;

    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre);
    let gated = tape.mul(r, hn)?;
    let n_pre = tape.add(xn, gated)?;
    let n = tape.tanh(n_pre);

    // (1 - z) * n + z * h_prev
    let zn = tape.mul(z, n)?;
    let zh = tape.mul(z, h_prev)?;
    let keep = tape.sub(n, zn)?;
    tape.add(keep, zh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn zeros_vars(tape: &mut Tape<f64>, d_in: usize, h: usize) -> GruCellVars {
        GruCellVars {
            w_x: tape.leaf_grad(Tensor::zeros(vec![d_in, 3 * h])),
            w_h: tape.leaf_grad(Tensor::zeros(vec![h, 3 * h])),
            b_x: tape.leaf_grad(Tensor::zeros(vec![3 * h])),
            b_h: tape.leaf_grad(Tensor::zeros(vec![3 * h])),
        }
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let mut tape = Tape::<f64>::new();
        let vars = zeros_vars(&mut tape, 2, 3);
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap());
        let h0 = tape.leaf(Tensor::zeros(vec![1, 3]));
        let h1 = gru_cell(&mut tape, x, h0, vars).unwrap();
        for &v in tape.value(h1).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn saturated_update_gate_copies_previous_state() {
        let mut tape = Tape::<f64>::new();
        let h = 3;
        // large bias on the update-gate block only
        let mut bx = vec![0.0; 3 * h];
        for v in bx.iter_mut().take(2 * h).skip(h) {
            *v = 30.0;
        }
        let vars = GruCellVars {
            w_x: tape.leaf(Tensor::zeros(vec![2, 3 * h])),
            w_h: tape.leaf(Tensor::zeros(vec![h, 3 * h])),
            b_x: tape.leaf(Tensor::new(vec![3 * h], bx).unwrap()),
            b_h: tape.leaf(Tensor::zeros(vec![3 * h])),
        };
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.2, 0.1]).unwrap());
        let h0 = tape.leaf(Tensor::new(vec![1, h], vec![0.5, -0.25, 0.8]).unwrap());
        let h1 = gru_cell(&mut tape, x, h0, vars).unwrap();
        for (a, b) in tape.value(h1).data().iter().zip(tape.value(h0).data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn state_stays_in_unit_interval() {
        let mut tape = Tape::<f64>::new();
        let h = 4;
        let mut seed = 77u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let vars = GruCellVars {
            w_x: tape.leaf(Tensor::from_fn(vec![3, 3 * h], |_| rnd())),
            w_h: tape.leaf(Tensor::from_fn(vec![h, 3 * h], |_| rnd())),
            b_x: tape.leaf(Tensor::from_fn(vec![3 * h], |_| rnd())),
            b_h: tape.leaf(Tensor::from_fn(vec![3 * h], |_| rnd())),
        };
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |_| rnd() * 2.0));
        let h0 = tape.leaf(Tensor::from_fn(vec![2, h], |_| rnd() * 0.99));
        let h1 = gru_cell(&mut tape, x, h0, vars).unwrap();
        for &v in tape.value(h1).data() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let vars = zeros_vars(&mut tape, 2, 3);
        let x = tape.leaf(Tensor::zeros(vec![1, 5]));
        let h0 = tape.leaf(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            gru_cell(&mut tape, x, h0, vars),
            Err(Error::Shape { .. })
        ));
    }
}
