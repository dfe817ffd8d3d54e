//! Dense complex and real tensors.
//!
//! Layout: the first index runs fastest. The element `(i_0, .., i_{D-1})`
//! lives at `i_0 + N_0 * (i_1 + N_1 * (i_2 + ...))`. Every matricization,
//! product and serialized file derives from this order.
//!
//! Modes are zero-based: mode 0 is the spatial (antenna / beam) mode of a
//! channel tensor, mode 1 the frequency / delay mode, mode 2 the temporal /
//! Doppler mode.

mod io;
mod matrix;
mod scalar;

use num_complex::Complex64;

pub use io::{read_tensor, write_tensor};
pub use matrix::{Matrix, RealMatrix};
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Floor applied to denominators of element-wise division.
pub const DIV_FLOOR: f64 = 1e-12;

/// Dense tensor with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = Complex64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Real tensor, used as the carrier of element-wise variances.
pub type RealTensor = Tensor<f64>;

/// Element-wise operations from the tensor notation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    /// Hadamard product.
    Mul,
    /// Hadamard division with a denominator floor.
    Div { floor: f64 },
    /// Squared modulus (unary).
    AbsSq,
    /// Element-wise power (unary).
    Pow(f64),
    Add,
    Sub,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("tensor must have order >= 1".into()));
    }
    if let Some(pos) = shape.iter().position(|&n| n == 0) {
        return Err(Error::InvalidShape(format!("dimension {pos} is zero")));
    }
    Ok(shape.iter().product())
}

/// Splits a shape around `mode` into (product of leading dims, product of trailing dims).
fn split(shape: &[usize], mode: usize) -> (usize, usize) {
    let left = shape[..mode].iter().product();
    let right = shape[mode + 1..].iter().product();
    (left, right)
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for (i, n) in idx.iter_mut().zip(shape) {
                *i += 1;
                if *i < *n {
                    break;
                }
                *i = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor with at least one zero dimension and no elements.
    pub fn empty(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != 0 {
            return Err(Error::InvalidShape(format!("{shape:?} is not an empty shape")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Vec::new(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
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

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, n) in idx.iter().zip(&self.shape).rev() {
            debug_assert!(i < n);
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let i = self.linear_index(idx);
        self.data[i] = value;
    }

    fn check_same_shape(&self, other: &Tensor<impl Scalar>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    /// `<X, Y> = sum X * conj(Y)`.
    pub fn inner(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        let mut acc = T::zero();
        for (&x, &y) in self.data.iter().zip(&other.data) {
            acc += x * y.conj();
        }
        Ok(acc)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x.abs_sq()).sum()
    }

    pub fn fro_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    /// Mode-`mode` matricization. Column `j = l + left * r`, where `l` indexes
    /// the leading modes and `r` the trailing ones, both first-index fastest.
    pub fn matricize(&self, mode: usize) -> Result<Matrix<T>> {
        self.check_mode(mode)?;
        let n = self.shape[mode];
        let (left, right) = split(&self.shape, mode);
        let mut out = Matrix::zeros(n, left * right);
        for r in 0..right {
            for i in 0..n {
                let base = left * (i + n * r);
                for l in 0..left {
                    out[(i, l + left * r)] = self.data[base + l];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`matricize`](Self::matricize).
    pub fn from_matricized(m: &Matrix<T>, mode: usize, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if mode >= shape.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: shape.len(),
            });
        }
        let n = shape[mode];
        let (left, right) = split(shape, mode);
        if m.rows() != n || m.cols() != left * right {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
                m.rows(),
                m.cols()
            )));
        }
        let mut data = vec![T::zero(); n * left * right];
        for r in 0..right {
            for i in 0..n {
                let base = left * (i + n * r);
                for l in 0..left {
                    data[base + l] = m[(i, l + left * r)];
                }
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Mode-`mode` tensor-matrix product `X x_mode U`, i.e. `Y_(mode) = U X_(mode)`.
    pub fn mode_product(&self, u: &Matrix<T>, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        let n = self.shape[mode];
        if u.cols() != n {
            return Err(Error::ShapeMismatch(format!(
                "mode-{mode} product: matrix has {} columns, tensor dimension is {n}",
                u.cols()
            )));
        }
        let k = u.rows();
        let (left, right) = split(&self.shape, mode);
        let mut shape = self.shape.clone();
        shape[mode] = k;
        let mut data = vec![T::zero(); left * k * right];
        for r in 0..right {
            for j in 0..n {
                let src = &self.data[left * (j + n * r)..left * (j + 1 + n * r)];
                for kk in 0..k {
                    let coef = u[(kk, j)];
                    let dst = &mut data[left * (kk + k * r)..left * (kk + 1 + k * r)];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    /// Applies several mode products. With [`ModeOrder::SizeAware`] the
    /// factors run in ascending order of their growth ratio `rows / cols`,
    /// shrinking factors first, which minimizes the largest intermediate.
    pub fn multi_mode_product(
        &self,
        factors: &[(&Matrix<T>, usize)],
        order: ModeOrder,
    ) -> Result<Self> {
        let seq: Vec<usize> = match order {
            ModeOrder::AsGiven => (0..factors.len()).collect(),
            ModeOrder::SizeAware => plan_mode_order(factors),
        };
        let mut out: Option<Self> = None;
        for i in seq {
            let (u, mode) = factors[i];
            let cur = out.as_ref().unwrap_or(self);
            out = Some(cur.mode_product(u, mode)?);
        }
        Ok(out.unwrap_or_else(|| self.clone()))
    }

    /// `X x_{-mode} Y = X_(mode) Y_(mode)^T`, contracting every mode except `mode`.
    pub fn contract_except(&self, other: &Self, mode: usize) -> Result<Matrix<T>> {
        self.check_mode(mode)?;
        if other.order() != self.order()
            || self
                .shape
                .iter()
                .zip(&other.shape)
                .enumerate()
                .any(|(k, (a, b))| k != mode && a != b)
        {
            return Err(Error::ShapeMismatch(format!(
                "contract_except along mode {mode}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let p = self.shape[mode];
        let q = other.shape[mode];
        let (left, right) = split(&self.shape, mode);
        let mut out = Matrix::zeros(p, q);
        for r in 0..right {
            for j in 0..q {
                let ys = &other.data[left * (j + q * r)..left * (j + 1 + q * r)];
                for i in 0..p {
                    let xs = &self.data[left * (i + p * r)..left * (i + 1 + p * r)];
                    let mut acc = T::zero();
                    for (&x, &y) in xs.iter().zip(ys) {
                        acc += x * y;
                    }
                    out[(i, j)] += acc;
                }
            }
        }
        Ok(out)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map<U: Scalar, V: Scalar>(
        &self,
        other: &Tensor<U>,
        f: impl Fn(T, U) -> V,
    ) -> Result<Tensor<V>> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn conj(&self) -> Self {
        self.map(T::conj)
    }

    pub fn abs_sq(&self) -> RealTensor {
        self.map(T::abs_sq)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x.scale(s))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Element-wise division; denominators with modulus below `floor` are
    /// replaced by `floor`.
    pub fn div_floor(&self, other: &Self, floor: f64) -> Result<Self> {
        self.zip_map(other, |a, b| {
            if b.abs() < floor {
                a.div(T::from_real(floor))
            } else {
                a.div(b)
            }
        })
    }

    /// Element-wise product with a real tensor.
    pub fn mul_real(&self, other: &RealTensor) -> Result<Self> {
        self.zip_map(other, |a, b| a.scale(b))
    }

    /// Element-wise division by a real tensor with a denominator floor.
    pub fn div_real(&self, other: &RealTensor, floor: f64) -> Result<Self> {
        self.zip_map(other, |a, b| a.scale(1.0 / floored(b, floor)))
    }

    /// Convex combination `w * self + (1 - w) * other`.
    pub fn blend(&self, other: &Self, w: f64) -> Result<Self> {
        self.zip_map(other, |a, b| a.scale(w) + b.scale(1.0 - w))
    }

    /// Largest element-wise modulus of the difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Denominator floor shared by the real-valued division helpers.
pub fn floored(x: f64, floor: f64) -> f64 {
    if x.abs() < floor {
        floor
    } else {
        x
    }
}

impl RealTensor {
    pub fn to_complex(&self) -> Tensor<Complex64> {
        self.map(|x| Complex64::new(x, 0.0))
    }

    /// Element-wise reciprocal with the division floor.
    pub fn recip(&self, floor: f64) -> Self {
        self.map(|x| 1.0 / floored(x, floor))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl Tensor<Complex64> {
    pub fn re(&self) -> RealTensor {
        self.map(|x| x.re)
    }
}

/// Execution order for [`Tensor::multi_mode_product`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeOrder {
    AsGiven,
    SizeAware,
}

/// Factor indices sorted by ascending `rows / cols`; ties keep their input order.
pub fn plan_mode_order<T: Scalar>(factors: &[(&Matrix<T>, usize)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..factors.len()).collect();
    // compare r_a / c_a < r_b / c_b without division
    idx.sort_by(|&a, &b| {
        let (ua, ub) = (factors[a].0, factors[b].0);
        (ua.rows() * ub.cols()).cmp(&(ub.rows() * ua.cols()))
    });
    idx
}

/// Element count of the largest tensor (input, intermediates, output) produced
/// when the mode products are applied in `seq` order.
pub fn largest_intermediate(shape: &[usize], dims: &[(usize, usize, usize)], seq: &[usize]) -> usize {
    // dims: (rows, cols, mode)
    let mut cur = shape.to_vec();
    let mut largest: usize = cur.iter().product();
    for &i in seq {
        let (rows, _, mode) = dims[i];
        cur[mode] = rows;
        largest = largest.max(cur.iter().product());
    }
    largest
}

/// Evaluates an [`ElementwiseOp`]. Binary ops require `y`.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, x: &Tensor<T>, y: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let rhs = || y.ok_or_else(|| Error::InvalidParameter(format!("{op:?} needs two operands")));
    match op {
        ElementwiseOp::Mul => x.hadamard(rhs()?),
        ElementwiseOp::Div { floor } => x.div_floor(rhs()?, floor),
        ElementwiseOp::Add => x.add(rhs()?),
        ElementwiseOp::Sub => x.sub(rhs()?),
        ElementwiseOp::AbsSq => Ok(x.map(|v| T::from_real(v.abs_sq()))),
        ElementwiseOp::Pow(p) => Ok(x.map(|v| v.powf(p))),
    }
}
