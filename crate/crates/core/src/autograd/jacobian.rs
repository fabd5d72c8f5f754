//! Dense input-output Jacobians by repeated reverse sweeps.

use super::params::ParamStore;
use super::tape::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor4;

/// Largest input or output dimension materialized densely.
pub const DENSE_JACOBIAN_LIMIT: usize = 4096;

/// `J[i][j] = ∂out_i / ∂x_j` for a single sample `x` (batch 1). The block
/// runs in [`Mode::Eval`], so BN layers use running statistics.
pub fn jacobian_of<F>(store: &ParamStore, x: &Tensor4, block: F) -> Result<Matrix>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if x.dims().batch != 1 {
        return Err(Error::dim(format!(
            "jacobian input must have batch 1, got {}",
            x.dims()
        )));
    }
    let n_in = x.len();
    if n_in > DENSE_JACOBIAN_LIMIT {
        return Err(Error::JacobianTooLarge {
            dim: n_in,
            limit: DENSE_JACOBIAN_LIMIT,
        });
    }
    let mut tape = Tape::new(Mode::Eval);
    let input = tape.input_with_grad(x.clone());
    let out = block(&mut tape, input)?;
    let od = tape.value(out).dims();
    let n_out = od.len();
    if n_out > DENSE_JACOBIAN_LIMIT {
        return Err(Error::JacobianTooLarge {
            dim: n_out,
            limit: DENSE_JACOBIAN_LIMIT,
        });
    }
    let mut j = Matrix::zeros(n_out, n_in);
    let mut seed = Tensor4::zeros(od);
    for i in 0..n_out {
        seed.data_mut()[i] = 1.0;
        let g = tape.backward_inputs(store, out, &seed)?;
        if let Some(gx) = g.input(input) {
            j.row_mut(i).copy_from_slice(gx.data());
        }
        seed.data_mut()[i] = 0.0;
    }
    Ok(j)
}
