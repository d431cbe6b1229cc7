use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Floating-point type used for every tensor. `f64` unless the crate is
/// built with the `f32` feature.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// A dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Scalar>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None })
    }

    pub fn full(shape: Vec<usize>, value: Scalar) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Internal constructor for op outputs whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns when viewed as a matrix; a 1-D tensor is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[Scalar] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a tensor holding exactly one element.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("dimensions must be positive, got {shape:?}")));
    }
    Ok(())
}

/// Glorot/Xavier uniform initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
///
/// For a 2-D shape `[rows, cols]`, `fan_out = rows` and `fan_in = cols`;
/// trailing dimensions beyond the second act as a receptive field. A 1-D
/// shape `[n]` uses `fan_in = fan_out = n`.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    check_shape(shape)?;
    let (fan_in, fan_out) = xavier_fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng_for(seed, &[0x7861_7669]);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..=bound) as Scalar)
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

pub(crate) fn xavier_fans(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 1 {
        return (shape[0], shape[0]);
    }
    let receptive: usize = shape[2..].iter().product();
    (shape[1] * receptive, shape[0] * receptive)
}
