//! Dense row-major tensors with cheap clones.
//!
//! Storage is `Arc<Vec<F>>`: cloning a tensor is O(1) and mutation goes
//! through copy-on-write, so parameters can be registered on an autodiff
//! graph without copying their buffers. A tensor whose storage is shared
//! between threads is treated as immutable.

use crate::real::Real;
use rand::Rng as _;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Dense tensor: shape plus row-major data.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor from a shape and matching data buffer.
    ///
    /// Panics if the element count does not match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![F::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Normal(0, std) init. Draws are made in f64 so that 32- and 64-bit
    /// runs with the same seed visit the same RNG sequence.
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            data.push(F::from_f64(z * std));
        }
        Self::from_vec(shape, data)
    }

    /// Uniform(lo, hi) init, drawn in f64 (see [`Tensor::randn`]).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(F::from_f64(rng.gen_range(lo..hi)));
        }
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access via copy-on-write.
    pub fn data_mut(&mut self) -> &mut [F] {
        if Arc::get_mut(&mut self.data).is_none() {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).expect("unique after copy-on-write")
    }

    /// Marks this tensor as a trainable leaf for graph registration.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, value: bool) {
        self.requires_grad = value;
    }

    /// Stable identity of the underlying buffer; used to map parameters to
    /// graph leaves.
    pub fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const u8 as usize
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        Self::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "sub shape mismatch");
        Self::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a - b)
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Squared Euclidean norm of the whole buffer.
    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[F] {
        assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }
}

/// `c = a @ b` for row-major 2-D buffers, with optional transposes.
///
/// `a` is `(m,k)` (or `(k,m)` when `trans_a`), `b` is `(k,n)` (or `(n,k)`
/// when `trans_b`), `c` is `(m,n)` and is accumulated with `beta`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm out size");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain 2-D matrix product helper for non-graph code.
pub fn matmul2d<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.rank(), 2);
    assert_eq!(b.rank(), 2);
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul2d inner dim");
    let mut out = vec![F::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, F::zero(), &mut out);
    Tensor::from_vec(&[m, n], out)
}

/// Cosine similarity of two equal-length vectors; zero vectors yield 0.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x.to_f64() * y.to_f64();
        na += x.to_f64() * x.to_f64();
        nb += y.to_f64() * y.to_f64();
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
