//! Dense row-major tensors and the forward kernels the graph records.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, last dimension contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "tensor dims {:?} hold {} elements but {} were given",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Converts from another float width (used by the f64 verification path).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape("add_assign", &self.dims, &other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `row` (shape `[d]`) to every row of `self` (shape `[.., d]`).
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let d = self.last_dim();
        if row.dims != [d] {
            return Err(Error::shape("add_row", &self.dims, &row.dims));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(d) {
            for (o, &r) in chunk.iter_mut().zip(&row.data) {
                *o += r;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", &self.dims, &[]));
        }
        let (m, n) = (self.dims[r - 2], self.dims[r - 1]);
        let batch = self.data.len() / (m * n).max(1);
        let mut data = vec![T::zero(); self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut dims = self.dims.clone();
        dims.swap(r - 2, r - 1);
        Ok(Tensor { dims, data })
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`.
    ///
    /// Batch dimensions must be equal, or one operand must be a plain
    /// matrix that is broadcast over the other's batch.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.dims, &other.dims)?;
        let mut out = vec![T::zero(); plan.out_len()];
        plan.forward(&self.data, &other.data, &mut out);
        Ok(Tensor {
            dims: plan.out_dims,
            data: out,
        })
    }

    /// Row-wise softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&self) -> Self {
        let d = self.last_dim();
        let mut out = self.clone();
        if d == 0 {
            return out;
        }
        for row in out.data.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        out
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_lastdim(&self) -> Self {
        let d = self.last_dim();
        let dims = self.dims[..self.rank().saturating_sub(1)].to_vec();
        let data = self.data.chunks(d.max(1)).map(|c| c.iter().copied().sum()).collect();
        Tensor { dims, data }
    }

    /// Mean over all leading positions, keeping only the last dimension.
    pub fn mean_rows(&self) -> Self {
        let d = self.last_dim();
        let rows = self.rows();
        let mut acc = vec![T::zero(); d];
        for chunk in self.data.chunks(d) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        let inv = T::one() / T::c(rows as f64);
        Tensor {
            dims: vec![d],
            data: acc.into_iter().map(|v| v * inv).collect(),
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation
    let k = T::c(0.797_884_560_802_865_4);
    let c = T::c(0.044_715);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(0.797_884_560_802_865_4);
    let c = T::c(0.044_715);
    let half = T::c(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Batch layout of a matrix product, shared by forward and backward.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_dims: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (ab, am) = a.split_at(a.len() - 2);
        let (bb, bm) = b.split_at(b.len() - 2);
        let (m, k) = (am[0], am[1]);
        let (k2, n) = (bm[0], bm[1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (batch_dims, a_batched, b_batched) = if ab == bb {
            (ab.to_vec(), !ab.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ab.to_vec(), true, false)
        } else if ab.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(Error::shape("matmul", a, b));
        };
        let batch = batch_dims.iter().product::<usize>();
        let mut out_dims = batch_dims;
        out_dims.extend_from_slice(&[m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch,
            a_batched,
            b_batched,
            out_dims,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.a_batched && !self.b_batched {
            // one tall product
            T::gemm(self.batch * m, k, n, a, k, 1, b, n, 1, T::zero(), out, n);
            return;
        }
        for i in 0..self.batch {
            let a_off = if self.a_batched { i * m * k } else { 0 };
            let b_off = if self.b_batched { i * k * n } else { 0 };
            T::gemm(
                m,
                k,
                n,
                &a[a_off..a_off + m * k],
                k,
                1,
                &b[b_off..b_off + k * n],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
            );
        }
    }

    /// Accumulates `g·bᵀ` into `ga` and `aᵀ·g` into `gb`.
    pub fn backward<T: Scalar>(&self, a: &[T], b: &[T], g: &[T], ga: Option<&mut [T]>, gb: Option<&mut [T]>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.a_batched && !self.b_batched {
            let rows = self.batch * m;
            if let Some(ga) = ga {
                T::gemm(rows, n, k, g, n, 1, b, 1, n, T::one(), ga, k);
            }
            if let Some(gb) = gb {
                T::gemm(k, rows, n, a, 1, k, g, n, 1, T::one(), gb, n);
            }
            return;
        }
        if let Some(ga) = ga {
            for i in 0..self.batch {
                let a_off = if self.a_batched { i * m * k } else { 0 };
                let b_off = if self.b_batched { i * k * n } else { 0 };
                T::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                    &b[b_off..b_off + k * n],
                    1,
                    n,
                    T::one(),
                    &mut ga[a_off..a_off + m * k],
                    k,
                );
            }
        }
        if let Some(gb) = gb {
            for i in 0..self.batch {
                let a_off = if self.a_batched { i * m * k } else { 0 };
                let b_off = if self.b_batched { i * k * n } else { 0 };
                T::gemm(
                    k,
                    m,
                    n,
                    &a[a_off..a_off + m * k],
                    1,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                    T::one(),
                    &mut gb[b_off..b_off + k * n],
                    n,
                );
            }
        }
    }
}
