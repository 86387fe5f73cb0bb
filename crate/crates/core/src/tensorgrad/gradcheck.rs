//! Central finite-difference gradient checking (64-bit only).

use super::graph::Var;
use super::params::{ParamId, ParamStore, Session};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err > self.tol).collect()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of `f` against central differences for every
/// trainable parameter in `store`.
///
/// `f` must build a deterministic scalar loss from the session it is given.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Session<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<(ParamId, crate::Tensor<f64>)> = {
        let s = Session::new(store);
        let loss = f(&s)?;
        s.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let s = Session::new(store);
        let loss = f(&s)?;
        Ok(s.value(loss).item())
    };
    let mut params = Vec::new();
    for (id, grad) in analytic {
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
        let max_abs_grad = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: worst,
            max_abs_grad,
        });
    }
    Ok(GradCheckReport { params, tol })
}
