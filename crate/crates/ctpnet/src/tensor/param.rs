//! Named trainable parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;
use crate::error::{Error, Result};

/// A tracked leaf tensor with a unique name path inside its model
/// (e.g. "crl.theta_tq"). Updating the value swaps in a fresh leaf,
/// which also drops any accumulated gradient.
pub struct Parameter {
    name: String,
    value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Parameter> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::leaf(data, shape, true)?,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Parameter {
        let numel = shape.iter().product();
        Parameter::new(name, vec![0.0; numel], shape).expect("zeros: valid shape")
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Parameter {
        let numel = shape.iter().product();
        Parameter::new(name, vec![1.0; numel], shape).expect("ones: valid shape")
    }

    /// Weight matrix with entries i.i.d. uniform in ±√(1/fan_in).
    pub fn uniform_fan_in<R: Rng>(
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Parameter {
        let fan_in = shape[0] as f64;
        let bound = (1.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Parameter::new(name, data, shape).expect("uniform init: valid shape")
    }

    /// Entries i.i.d. normal with the given standard deviation.
    pub fn normal<R: Rng>(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Parameter {
        let dist = Normal::new(0.0, std).expect("valid std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Parameter::new(name, data, shape).expect("normal init: valid shape")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Gradient from the last backward pass; zeros when unreachable.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.value
            .grad()
            .unwrap_or_else(|| vec![0.0; self.value.numel()])
    }

    /// Replaces the value with a fresh tracked leaf of the same shape.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {}: expected {} elements, got {}",
                self.name,
                self.value.numel(),
                data.len()
            )));
        }
        self.value = Tensor::leaf(data, &self.value.shape().to_vec(), true)?;
        Ok(())
    }
}
