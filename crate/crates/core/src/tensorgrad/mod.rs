//! Minimal dense tensors with reverse-mode differentiation, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, rel_err, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{Grads, Graph, Var};
pub use params::{Param, ParamId, ParamStore, Session};
#[cfg(test)]
pub(crate) use tensor::gelu;
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Zero-vector guard used by every cosine distance.
pub const COSINE_EPS: f64 = 1e-8;

/// `1 − ⟨a_i,b_i⟩ / (max(‖a_i‖,eps)·max(‖b_i‖,eps))` over the last dimension.
pub fn cosine_distance_rows<T: Scalar>(g: &Graph<T>, a: Var, b: Var, eps: T) -> Result<Var> {
    let an = g.l2_normalize_rows(a, eps);
    let bn = g.l2_normalize_rows(b, eps);
    let prod = g.mul(an, bn)?;
    let sim = g.sum_lastdim(prod);
    Ok(g.affine(sim, -T::one(), T::one()))
}

/// Linear layer `x·W + b` with `W: [in, out]`.
pub fn linear<T: Scalar>(g: &Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}
