//! A small dense neural-network core with hand-derived gradients.
//!
//! Everything runs in `f64`. Tensors are row-major; a batch of feature
//! vectors is a `(batch, features)` matrix and a weight matrix is stored as
//! `(input_dim, output_dim)` so that a layer computes `y = x W`.

mod layers;
mod mlp;

pub use layers::{
    cross_entropy_loss, group_norm_backward, group_norm_forward, group_norm_forward_backward,
    linear_backward, linear_forward, sgd_step, GroupNormCache, SgdOptions, GN_EPS,
};
pub use mlp::{Activation, ModelSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite tensor entry at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the entries. The shape cannot change through this.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Views a 1-D or 2-D tensor as `(batch, features)`.
    pub(crate) fn batch_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [f] => Ok((1, *f)),
            [b, f] => Ok((*b, *f)),
            s => Err(Error::dim(format!("expected a 1-D or 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (n, f) = self.batch_dims()?;
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * f..(r + 1) * f]);
        }
        Ok(Tensor {
            shape: vec![rows.len(), f],
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// One named parameter array of the model; the unit of quantization and
/// aggregation. `layer_id` runs from 1 to the number of linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub layer_id: usize,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

impl ParamBlock {
    pub fn new(layer_id: usize, kind: ParamKind, tensor: Tensor) -> Self {
        ParamBlock {
            layer_id,
            kind,
            tensor,
        }
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}
