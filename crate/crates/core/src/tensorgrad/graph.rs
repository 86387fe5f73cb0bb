//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its output and whatever it
//! needs for the backward pass. `backward` walks the nodes in strict reverse
//! recording order, so identical graphs yield bitwise-identical gradients.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gelu, gelu_grad, MatmulPlan, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        plan: MatmulPlan,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        row: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Square {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: usize,
        inv: Vec<T>,
        clamped: Vec<bool>,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    SumLast {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    MeanRows {
        x: usize,
    },
    DivLast {
        x: usize,
        s: usize,
    },
    MinLast {
        x: usize,
        argmin: Vec<usize>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, dims: &[usize], f: impl FnOnce(&mut [T])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(dims));
    f(t.data_mut());
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(va.dims(), vb.dims())?;
        let mut out = vec![T::zero(); plan.out_len()];
        plan.forward(va.data(), vb.data(), &mut out);
        let t = Tensor::new(plan.out_dims.clone(), out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, plan }, self.needs(&[a.0, b.0])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(&self.value(b))?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, self.needs(&[a.0, b.0])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(&self.value(b))?;
        Ok(self.push(t, Op::Sub { a: a.0, b: b.0 }, self.needs(&[a.0, b.0])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(&self.value(b))?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, self.needs(&[a.0, b.0])))
    }

    /// `x + row`, broadcasting a `[d]` row over `[.., d]`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let t = self.value(x).add_row(&self.value(row))?;
        Ok(self.push(t, Op::AddRow { x: x.0, row: row.0 }, self.needs(&[x.0, row.0])))
    }

    /// `scale·x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| v * scale + shift);
        self.push(t, Op::Affine { x: x.0, scale }, self.needs(&[x.0]))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn relu(&self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn square(&self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn softmax_lastdim(&self, x: Var) -> Var {
        let t = self.value(x).softmax_lastdim();
        self.push(t, Op::Softmax { x: x.0 }, self.needs(&[x.0]))
    }

    /// Layer normalisation over the last dimension (population variance).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if vg.dims() != [d] || vb.dims() != [d] {
            return Err(Error::shape("layer_norm", vx.dims(), vg.dims()));
        }
        let inv_d = T::one() / T::c(d as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = vec![T::zero(); vx.len()];
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.dims().to_vec(), out)?;
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Rows divided by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut inv = Vec::with_capacity(vx.rows());
        let mut clamped = Vec::with_capacity(vx.rows());
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let c = n <= eps;
            let i = T::one() / if c { eps } else { n };
            inv.push(i);
            clamped.push(c);
            for v in row.iter_mut() {
                *v *= i;
            }
        }
        let t = Tensor::new(vx.dims().to_vec(), out).expect("same dims");
        self.push(t, Op::L2Normalize { x: x.0, inv, clamped }, self.needs(&[x.0]))
    }

    pub fn transpose_last(&self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose_last()?;
        Ok(self.push(t, Op::Transpose { x: x.0 }, self.needs(&[x.0])))
    }

    pub fn reshape(&self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = (*self.value(x)).clone().reshape(dims)?;
        Ok(self.push(t, Op::Reshape { x: x.0 }, self.needs(&[x.0])))
    }

    pub fn sum_lastdim(&self, x: Var) -> Var {
        let t = self.value(x).sum_lastdim();
        self.push(t, Op::SumLast { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::MeanAll { x: x.0 }, self.needs(&[x.0]))
    }

    /// Mean over every leading position, leaving `[d]`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let t = self.value(x).mean_rows();
        self.push(t, Op::MeanRows { x: x.0 }, self.needs(&[x.0]))
    }

    /// `x[.., j] / s[..]`.
    pub fn div_lastdim(&self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let d = vx.last_dim();
        if vx.dims()[..vx.rank() - 1] != *vs.dims() {
            return Err(Error::shape("div_lastdim", vx.dims(), vs.dims()));
        }
        let mut out = vx.data().to_vec();
        for (row, &sv) in out.chunks_mut(d).zip(vs.data()) {
            for v in row.iter_mut() {
                *v /= sv;
            }
        }
        let t = Tensor::new(vx.dims().to_vec(), out)?;
        Ok(self.push(t, Op::DivLast { x: x.0, s: s.0 }, self.needs(&[x.0, s.0])))
    }

    /// Minimum over the last dimension with its argmin (smallest index wins ties).
    pub fn min_lastdim(&self, x: Var) -> (Var, Vec<usize>) {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut vals = Vec::with_capacity(vx.rows());
        let mut argmin = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(d) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmin.push(best);
        }
        let t = Tensor::new(vx.dims()[..vx.rank() - 1].to_vec(), vals).expect("dims");
        let v = self.push(
            t,
            Op::MinLast {
                x: x.0,
                argmin: argmin.clone(),
            },
            self.needs(&[x.0]),
        );
        (v, argmin)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.dims(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let want = |i: usize| nodes[i].needs_grad;
            let val = |i: usize| &*nodes[i].value;
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, plan } => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = want(*a).then(|| grads[*a].take().unwrap_or_else(|| Tensor::zeros(va.dims())));
                    let mut gb = want(*b).then(|| grads[*b].take().unwrap_or_else(|| Tensor::zeros(vb.dims())));
                    plan.backward(
                        va.data(),
                        vb.data(),
                        gd,
                        ga.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                    if ga.is_some() {
                        grads[*a] = ga;
                    }
                    if gb.is_some() {
                        // a == b shares one slot; the second take above saw None, so merge
                        match (&mut grads[*b], gb) {
                            (Some(existing), Some(extra)) => existing.add_assign(&extra)?,
                            (slot, extra) => *slot = extra,
                        }
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    if want(*a) {
                        acc(&mut grads[*a], val(*a).dims(), |s| {
                            s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v)
                        });
                    }
                    if want(*b) {
                        acc(&mut grads[*b], val(*b).dims(), |s| {
                            s.iter_mut().zip(gd).for_each(|(o, &v)| *o += sign * v)
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if want(*a) {
                        acc(&mut grads[*a], val(*a).dims(), |s| {
                            for i in 0..s.len() {
                                s[i] += gd[i] * vb[i];
                            }
                        });
                    }
                    if want(*b) {
                        acc(&mut grads[*b], val(*b).dims(), |s| {
                            for i in 0..s.len() {
                                s[i] += gd[i] * va[i];
                            }
                        });
                    }
                }
                Op::AddRow { x, row } => {
                    if want(*x) {
                        acc(&mut grads[*x], val(*x).dims(), |s| {
                            s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v)
                        });
                    }
                    if want(*row) {
                        let d = val(*row).len();
                        acc(&mut grads[*row], val(*row).dims(), |s| {
                            for chunk in gd.chunks(d) {
                                for (o, &v) in s.iter_mut().zip(chunk) {
                                    *o += v;
                                }
                            }
                        });
                    }
                }
                Op::Affine { x, scale } => {
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * *scale)
                    });
                }
                Op::Relu { x } => {
                    let vx = val(*x).data();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for i in 0..s.len() {
                            if vx[i] > T::zero() {
                                s[i] += gd[i];
                            }
                        }
                    });
                }
                Op::Gelu { x } => {
                    let vx = val(*x).data();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for i in 0..s.len() {
                            s[i] += gd[i] * gelu_grad(vx[i]);
                        }
                    });
                }
                Op::Square { x } => {
                    let vx = val(*x).data();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for i in 0..s.len() {
                            s[i] += gd[i] * T::c(2.0) * vx[i];
                        }
                    });
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for ((srow, yrow), grow) in s.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                            let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                srow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.last_dim();
                    let vg = val(*gamma).data();
                    if want(*gamma) {
                        acc(&mut grads[*gamma], &[d], |s| {
                            for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                                for j in 0..d {
                                    s[j] += grow[j] * hrow[j];
                                }
                            }
                        });
                    }
                    if want(*beta) {
                        acc(&mut grads[*beta], &[d], |s| {
                            for grow in gd.chunks(d) {
                                for j in 0..d {
                                    s[j] += grow[j];
                                }
                            }
                        });
                    }
                    if want(*x) {
                        let inv_d = T::one() / T::c(d as f64);
                        acc(&mut grads[*x], val(*x).dims(), |s| {
                            let mut dh = vec![T::zero(); d];
                            for (r, (srow, (grow, hrow))) in
                                s.chunks_mut(d).zip(gd.chunks(d).zip(xhat.chunks(d))).enumerate()
                            {
                                let mut m1 = T::zero();
                                let mut m2 = T::zero();
                                for j in 0..d {
                                    dh[j] = grow[j] * vg[j];
                                    m1 += dh[j];
                                    m2 += dh[j] * hrow[j];
                                }
                                m1 *= inv_d;
                                m2 *= inv_d;
                                for j in 0..d {
                                    srow[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                                }
                            }
                        });
                    }
                }
                Op::L2Normalize { x, inv, clamped } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for (r, (srow, (grow, yrow))) in s.chunks_mut(d).zip(gd.chunks(d).zip(y.chunks(d))).enumerate()
                        {
                            if clamped[r] {
                                for j in 0..d {
                                    srow[j] += grow[j] * inv[r];
                                }
                            } else {
                                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                                for j in 0..d {
                                    srow[j] += (grow[j] - yrow[j] * dot) * inv[r];
                                }
                            }
                        }
                    });
                }
                Op::Transpose { x } => {
                    let gt = g.transpose_last()?;
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        s.iter_mut().zip(gt.data()).for_each(|(o, &v)| *o += v)
                    });
                }
                Op::Reshape { x } => {
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        s.iter_mut().zip(gd).for_each(|(o, &v)| *o += v)
                    });
                }
                Op::SumLast { x } => {
                    let d = val(*x).last_dim();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for (srow, &gv) in s.chunks_mut(d).zip(gd) {
                            srow.iter_mut().for_each(|o| *o += gv);
                        }
                    });
                }
                Op::SumAll { x } => {
                    let gv = gd[0];
                    acc(&mut grads[*x], val(*x).dims(), |s| s.iter_mut().for_each(|o| *o += gv));
                }
                Op::MeanAll { x } => {
                    let gv = gd[0] / T::c(val(*x).len() as f64);
                    acc(&mut grads[*x], val(*x).dims(), |s| s.iter_mut().for_each(|o| *o += gv));
                }
                Op::MeanRows { x } => {
                    let vx = val(*x);
                    let d = vx.last_dim();
                    let inv = T::one() / T::c(vx.rows() as f64);
                    acc(&mut grads[*x], vx.dims(), |s| {
                        for srow in s.chunks_mut(d) {
                            for j in 0..d {
                                srow[j] += gd[j] * inv;
                            }
                        }
                    });
                }
                Op::DivLast { x, s } => {
                    let (vx, vs) = (val(*x), val(*s));
                    let d = vx.last_dim();
                    if want(*x) {
                        acc(&mut grads[*x], vx.dims(), |o| {
                            for ((orow, grow), &sv) in o.chunks_mut(d).zip(gd.chunks(d)).zip(vs.data()) {
                                for j in 0..d {
                                    orow[j] += grow[j] / sv;
                                }
                            }
                        });
                    }
                    if want(*s) {
                        acc(&mut grads[*s], vs.dims(), |o| {
                            for (r, (grow, xrow)) in gd.chunks(d).zip(vx.data().chunks(d)).enumerate() {
                                let sv = vs.data()[r];
                                let dot: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                                o[r] -= dot / (sv * sv);
                            }
                        });
                    }
                }
                Op::MinLast { x, argmin } => {
                    let d = val(*x).last_dim();
                    acc(&mut grads[*x], val(*x).dims(), |s| {
                        for (r, &j) in argmin.iter().enumerate() {
                            s[r * d + j] += gd[r];
                        }
                    });
                }
            }
        }
        Ok(Grads { grads })
    }
}
