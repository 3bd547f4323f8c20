//! Dense row-major N-D arrays.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Contiguous row-major array. Activations use `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// `[N, C, H, W]` of a 4-D tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        dims4(&self.shape)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Element-type conversion.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Sample `n` of a batched tensor, keeping a leading unit dimension.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if self.shape.is_empty() || n >= self.shape[0] {
            return Err(Error::shape(
                "batch_item",
                format!("index {} for shape {:?}", n, self.shape),
            ));
        }
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Concatenates along the leading (batch) dimension.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

pub fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape("dims4", format!("expected 4-D tensor, got {:?}", shape))),
    }
}
