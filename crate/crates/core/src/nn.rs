//! Parameter storage and MLP building blocks on top of `diffcore`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Flat parameter arrays with their shapes, in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl Params {
    pub fn zeros(shapes: Vec<Vec<usize>>) -> Self {
        let values = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        Params { shapes, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Untracked constants, for inference.
    pub fn constants(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&self.shapes)
            .map(|(v, s)| Tensor::new(v.clone(), s).expect("shapes validated at construction"))
            .collect()
    }

    /// Fresh leaves on the current tape, for training.
    pub fn leaves(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&self.shapes)
            .map(|(v, s)| Tensor::param(v.clone(), s).expect("shapes validated at construction"))
            .collect()
    }

    pub fn check_shapes(&self, expected: &[Vec<usize>]) -> Result<()> {
        if self.shapes != expected
            || self.values.iter().zip(&self.shapes).any(|(v, s)| v.len() != s.iter().product::<usize>())
        {
            return Err(Error::contract("parameter shapes do not match the model layout"));
        }
        Ok(())
    }
}

/// Shapes of a dense stack with layer sizes `sizes = [in, h1, ..., out]`: `[in, out]` weight then `[out]` bias per layer.
pub fn mlp_shapes(sizes: &[usize]) -> Vec<Vec<usize>> {
    sizes.windows(2).flat_map(|w| [vec![w[0], w[1]], vec![w[1]]]).collect()
}

/// Uniform(±1/√fan_in) weights and biases.
pub fn init_mlp<R: Rng>(sizes: &[usize], rng: &mut R) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * sizes.len());
    for w in sizes.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        out.push((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect());
        out.push((0..w[1]).map(|_| rng.random_range(-bound..bound)).collect());
    }
    out
}

/// Dense layers with ReLU between them and a linear last layer.
/// `params` holds alternating weights and biases.
pub fn mlp_forward(x: &Tensor, params: &[Tensor]) -> Result<Tensor> {
    let n = params.len() / 2;
    let mut h = x.clone();
    for (i, layer) in params.chunks_exact(2).enumerate() {
        h = h.matmul(&layer[0])?.add(&layer[1])?;
        if i + 1 < n {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Promote a rank-1 input to a single-row batch.
pub(crate) fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        2 => Ok(x.clone()),
        1 => x.reshape(&[1, x.numel()]),
        _ => Err(Error::shape("batch", format!("expected rank 1 or 2, got {:?}", x.shape()))),
    }
}

pub(crate) fn rows_tensor(m: &Matrix, rows: &[usize]) -> Result<Tensor> {
    Tensor::new(m.select_rows(rows).into_data(), &[rows.len(), m.cols()])
}

pub(crate) fn tensor_to_matrix(t: &Tensor) -> Result<Matrix> {
    let t = as_batch(t)?;
    Matrix::new(t.rows(), t.cols(), t.to_vec())
}
