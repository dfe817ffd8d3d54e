#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsbli::tensor::{Matrix, RealTensor, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn rand_c<R: Rng>(r: &mut R) -> Complex64 {
    c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
}

pub fn rand_tensor<R: Rng>(r: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rand_c(r)).collect()).unwrap()
}

pub fn rand_real_tensor<R: Rng>(r: &mut R, shape: &[usize], lo: f64, hi: f64) -> RealTensor {
    let n = shape.iter().product();
    RealTensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn rand_matrix<R: Rng>(r: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rand_c(r))
}

/// Multi-index of linear position `lin` with the first index fastest.
pub fn unravel(mut lin: usize, shape: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .map(|&n| {
            let i = lin % n;
            lin /= n;
            i
        })
        .collect()
}

pub fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).rev().fold(0, |acc, (&i, &n)| acc * n + i)
}

pub fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

pub fn rel_err_real(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Mode product by explicit index loops.
pub fn naive_mode_product(x: &Tensor, u: &Matrix, d: usize) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape[d] = u.rows();
    let n: usize = shape.iter().product();
    let mut out = vec![c(0.0, 0.0); n];
    for (lin, o) in out.iter_mut().enumerate() {
        let mut idx = unravel(lin, &shape);
        let r = idx[d];
        let mut acc = c(0.0, 0.0);
        for k in 0..x.shape()[d] {
            idx[d] = k;
            acc += u[(r, k)] * x.data()[ravel(&idx, x.shape())];
        }
        *o = acc;
    }
    Tensor::from_vec(&shape, out).unwrap()
}

/// `Σ_{all modes but d} X[.., i, ..] Y[.., j, ..]` by explicit loops.
pub fn naive_contract_except(x: &Tensor, y: &Tensor, d: usize) -> Matrix {
    let (p, q) = (x.shape()[d], y.shape()[d]);
    let mut out = Matrix::zeros(p, q);
    for lin in 0..x.len() {
        let idx = unravel(lin, x.shape());
        let i = idx[d];
        for j in 0..q {
            let mut jdx = idx.clone();
            jdx[d] = j;
            out[(i, j)] += x.data()[lin] * y.data()[ravel(&jdx, y.shape())];
        }
    }
    out
}

pub fn naive_inner(x: &Tensor, y: &Tensor) -> Complex64 {
    x.data().iter().zip(y.data()).map(|(a, b)| a * b.conj()).sum()
}
