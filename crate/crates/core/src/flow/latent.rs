use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// State of the flow ODE: a `(channels, height, width)` tensor.
#[derive(Debug, Clone)]
pub struct Latent(Tensor);

impl Latent {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(crate::error::invalid(format!(
                "latent must be (channels, height, width), got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self(tensor))
    }

    pub fn from_vec(data: Vec<f32>, shape: (usize, usize, usize)) -> Result<Self> {
        let expected = shape.0 * shape.1 * shape.2;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.0, shape.1, shape.2],
                got: vec![data.len()],
            });
        }
        Self::new(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn from_vec_f64(data: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        Self::new(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    /// A single scalar viewed as a `1 x 1 x 1` latent.
    pub fn scalar(value: f64) -> Self {
        Self(Tensor::full(value, (1, 1, 1), &Device::Cpu).expect("scalar tensor"))
    }

    pub fn zeros(shape: (usize, usize, usize), dtype: DType) -> Result<Self> {
        Self::new(Tensor::zeros(shape, dtype, &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype()
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }

    pub fn to_vec_f64(&self) -> Result<Vec<f64>> {
        Ok(self.0.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Value of a `1 x 1 x 1` latent.
    pub fn to_scalar(&self) -> Result<f64> {
        let v = self.to_vec_f64()?;
        if v.len() != 1 {
            return Err(crate::error::invalid("latent is not a scalar"));
        }
        Ok(v[0])
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec_f64()?.iter().all(|x| x.is_finite()))
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.0.dims() != other.0.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.0.dims().to_vec(),
                got: other.0.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// `self + scale * direction`.
    pub fn axpy(&self, scale: f64, direction: &Latent) -> Result<Latent> {
        self.ensure_same_shape(direction)?;
        Ok(Latent((&self.0 + (&direction.0 * scale)?)?))
    }

    /// Root-mean-square of the entries.
    pub fn rms(&self) -> Result<f64> {
        let v = self.to_vec_f64()?;
        Ok((v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt())
    }

    /// Bitwise comparison of the stored values.
    pub fn bit_eq(&self, other: &Latent) -> Result<bool> {
        if self.0.dims() != other.0.dims() || self.0.dtype() != other.0.dtype() {
            return Ok(false);
        }
        let a = self.to_vec_f64()?;
        let b = other.to_vec_f64()?;
        Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
