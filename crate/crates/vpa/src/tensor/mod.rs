//! Dense f64 tensors with reverse-mode autodiff over a dynamic tape.
//!
//! Values are immutable once created; gradients are only produced for
//! explicitly registered leaves (see [`tape::Graph`]). All math is 64-bit
//! so that finite-difference oracles are meaningful.

pub mod fd;
pub mod tape;

use crate::error::{Result, VpaError};

/// Dense n-dimensional real array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(VpaError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(VpaError::Shape(format!("zero dimension in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn zeros_like(o: &Tensor) -> Self {
        Tensor::zeros(&o.shape)
    }

    pub fn ones_like(o: &Tensor) -> Self {
        Tensor::full(&o.shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Gaussian-filled tensor (mean 0, given std), seeded by the caller's rng.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    /// Row count / column count for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.ndim() - 1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_in_place(&mut self, o: &Tensor) {
        debug_assert_eq!(self.shape, o.shape);
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Numpy-style broadcast shape of two shapes (aligned right).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(VpaError::Shape(format!("cannot broadcast {:?} with {:?}", a, b)));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides for indexing `src` as if broadcast to `out` (0-stride
/// on broadcast dimensions).
fn broadcast_strides(out: &[usize], src: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1usize;
    for i in (0..src.len()).rev() {
        let oi = i + nd - src.len();
        if src[i] != 1 {
            strides[oi] = s;
        }
        s *= src[i];
    }
    strides
}

fn for_each_broadcast(out_shape: &[usize], strides: &[&[usize]], mut f: impl FnMut(&[usize])) {
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offs = vec![0usize; strides.len()];
    for _ in 0..n {
        f(&offs);
        // odometer increment
        for d in (0..nd).rev() {
            idx[d] += 1;
            for (k, st) in strides.iter().enumerate() {
                offs[k] += st[d];
            }
            if idx[d] < out_shape[d] {
                break;
            }
            for (k, st) in strides.iter().enumerate() {
                offs[k] -= st[d] * out_shape[d];
            }
            idx[d] = 0;
        }
    }
}

/// Elementwise combine of two tensors broadcast to `shape`.
pub fn broadcast_zip(shape: &[usize], a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let sa = broadcast_strides(shape, &a.shape);
    let sb = broadcast_strides(shape, &b.shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(shape, &[&sa, &sb], |offs| {
        data.push(f(a.data[offs[0]], b.data[offs[1]]));
    });
    Tensor { shape: shape.to_vec(), data }
}

/// Three-input variant, used by division gradients.
pub fn broadcast_zip3(
    shape: &[usize],
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Tensor {
    let sa = broadcast_strides(shape, &a.shape);
    let sb = broadcast_strides(shape, &b.shape);
    let sc = broadcast_strides(shape, &c.shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(shape, &[&sa, &sb, &sc], |offs| {
        data.push(f(a.data[offs[0]], b.data[offs[1]], c.data[offs[2]]));
    });
    Tensor { shape: shape.to_vec(), data }
}

/// Sum `t` down to `shape` (the reverse of broadcasting), for gradient
/// accumulation into a broadcast operand.
pub fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let strides = broadcast_strides(&t.shape, shape);
    let mut out = Tensor::zeros(shape);
    let mut i = 0usize;
    for_each_broadcast(&t.shape, &[&strides], |offs| {
        out.data[offs[0]] += t.data[i];
        i += 1;
    });
    out
}

/// Plain 2-D matrix product: a is p x q, b is q x r.
pub fn matmul2(a: &[f64], p: usize, q: usize, b: &[f64], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub fn transpose2(a: &[f64], p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            out[j * p + i] = a[i * q + j];
        }
    }
    out
}
